use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, RunOptions, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::kinetics::ChemDataset;
use crate::model::count_macs;
use crate::objective::{LossWeights, Metrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    Components,
    Losses,
}

impl Grid {
    pub fn parse(s: &str) -> Result<Grid> {
        match s {
            "components" => Ok(Grid::Components),
            "losses" => Ok(Grid::Losses),
            _ => Err(Error::Config(format!("grid must be components or losses, got {s:?}"))),
        }
    }

    pub fn rows(self, base: &TrainConfig) -> Vec<GridRow> {
        match self {
            Grid::Components => component_grid(base),
            Grid::Losses => loss_grid(base),
        }
    }
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub name: String,
    pub config: TrainConfig,
}

/// The autoencoder baseline, each component alone, the two partial stacks
/// and the full model.
pub fn component_grid(base: &TrainConfig) -> Vec<GridRow> {
    // attn, time embedding, inr, fno
    let flags = [
        ("AE", [false, false, false, false]),
        ("AE+Attn", [true, false, false, false]),
        ("AE+TimeEmb", [false, true, false, false]),
        ("AE+INR", [false, false, true, false]),
        ("AE+FNO", [false, false, false, true]),
        ("AE+Attn+TimeEmb", [true, true, false, false]),
        ("AE+Attn+TimeEmb+INR", [true, true, true, false]),
        ("Full", [true, true, true, true]),
    ];
    flags
        .iter()
        .map(|(name, [attn, time, inr, fno])| {
            let mut config = base.clone();
            config.model.use_attn = *attn;
            config.model.use_time_emb = *time;
            config.model.use_inr = *inr;
            config.model.use_fno = *fno;
            GridRow {
                name: name.to_string(),
                config,
            }
        })
        .collect()
}

/// MSE alone, then adding the derivative, identity and mass terms with
/// their base weights.
pub fn loss_grid(base: &TrainConfig) -> Vec<GridRow> {
    let w = base.loss;
    let pick = |d: bool, idn: bool, mass: bool| LossWeights {
        recon: w.recon,
        d1: if d { w.d1 } else { 0.0 },
        d2: if d { w.d2 } else { 0.0 },
        identity: if idn { w.identity } else { 0.0 },
        mass: if mass { w.mass } else { 0.0 },
    };
    [
        ("MSE", pick(false, false, false)),
        ("MSE+Derivs", pick(true, false, false)),
        ("MSE+Derivs+Idn", pick(true, true, false)),
        ("MSE+Derivs+Mass", pick(true, false, true)),
        ("MSE+Derivs+Idn+Mass", pick(true, true, true)),
    ]
    .into_iter()
    .map(|(name, loss)| {
        let mut config = base.clone();
        config.model.use_attn = true;
        config.model.use_time_emb = true;
        config.model.use_inr = true;
        config.model.use_fno = true;
        config.loss = loss;
        GridRow {
            name: name.to_string(),
            config,
        }
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// 1 for the lowest validation RMSE.
    pub rank: usize,
    pub val: Metrics,
    pub params: usize,
    pub macs: u64,
    pub final_loss: f64,
}

/// Train every row with the same schedule and seed and evaluate the final
/// model on `val`. Rows keep grid order; `rank` orders them by RMSE.
pub fn run_grid(rows: &[GridRow], train: &ChemDataset, val: &ChemDataset, threads: usize) -> Result<Vec<AblationRow>> {
    for row in rows {
        row.config.validate()?;
        row.config.check_dataset(train)?;
    }
    let run = |row: &GridRow| -> Result<AblationRow> {
        let mut trainer = Trainer::new(row.config.clone(), Some(train.meta.clone()))?;
        trainer.run(train, None, &RunOptions::default())?;
        Ok(AblationRow {
            name: row.name.clone(),
            rank: 0,
            val: evaluate(&trainer.model, val)?,
            params: trainer.model.params.numel(),
            macs: count_macs(&row.config.model).total(),
            final_loss: trainer.loss_trace.last().copied().unwrap_or(f64::NAN),
        })
    };
    let results: Vec<Result<AblationRow>> =
        crate::workers::run_pool(threads, || rows.par_iter().map(run).collect());
    let mut out = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[a].val.rmse.total_cmp(&out[b].val.rmse).then(a.cmp(&b)));
    for (rank, i) in order.into_iter().enumerate() {
        out[i].rank = rank + 1;
    }
    Ok(out)
}
