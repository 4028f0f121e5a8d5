//! Optimizer, training loop, checkpoints and the ablation grids.

mod ablation;
mod adam;
mod checkpoint;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{augment_roll, ChemDataset, NormMeta};
use crate::model::{time_grid, ChemNNEModel, ModelConfig};
use crate::objective::{loss_total, metrics, LossBreakdown, LossTerms, LossWeights, Metrics, SpeciesMap};
use crate::tensor::{Tape, Tensor, TensorError};

pub use ablation::{component_grid, loss_grid, run_grid, AblationRow, Grid, GridRow};
pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CNCK_MAGIC, CNCK_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient-norm cap.
    pub clip_norm: Option<f64>,
    /// Random cyclic time shift of each batch.
    pub roll: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iters: 5000,
            batch_size: 16,
            lr: 1e-3,
            eval_every: 500,
            seed: 0,
            clip_norm: None,
            roll: false,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: Schedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()
    }

    /// Fail early if the dataset does not fit the model or the loss.
    pub fn check_dataset(&self, ds: &ChemDataset) -> Result<()> {
        let m = &self.model;
        let want = [m.n_in, m.n_env, m.n_out, m.n_steps];
        let got = [ds.n_in(), ds.n_env(), ds.n_out(), ds.n_steps()];
        if want != got {
            return Err(Error::Config(format!(
                "dataset has n_in, n_env, n_out, n_steps = {got:?} but the model expects {want:?}"
            )));
        }
        if ds.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if self.loss.identity > 0.0 && ds.meta.species_map().is_empty() {
            return Err(Error::Config(
                "loss.identity > 0 but the task shares no species between inputs and outputs; set loss.identity = 0".into(),
            ));
        }
        Ok(())
    }
}

/// One validation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    /// Mean training losses since the previous row.
    pub loss: LossBreakdown,
    pub val: Option<Metrics>,
}

pub const HISTORY_CSV_HEADER: &str =
    "iter,loss_total,loss_recon,loss_d1,loss_d2,loss_idn,loss_mass,val_rmse,val_mae,val_mbe";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.iter, l.total, l.recon, l.d1, l.d2, l.identity, l.mass
        ));
        match &r.val {
            Some(v) => out.push_str(&format!(",{},{},{}\n", v.rmse, v.mae, v.mbe)),
            None => out.push_str(",,,\n"),
        }
    }
    out
}

/// Model predictions for a whole dataset, in chunks.
pub fn predict_dataset(model: &ChemNNEModel, ds: &ChemDataset) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let t = time_grid(ds.n_steps());
    let mut data = Vec::with_capacity(ds.traj.numel());
    let mut start = 0;
    while start < ds.len() {
        let len = CHUNK.min(ds.len() - start);
        let out = model.predict(&ds.x0.slice_rows(start, len), &ds.env.slice_rows(start, len), &t)?;
        data.extend_from_slice(out.data());
        start += len;
    }
    Ok(Tensor::new(&[ds.len(), ds.n_steps(), ds.n_out()], data)?)
}

/// Pooled metrics of the model on a dataset.
pub fn evaluate(model: &ChemNNEModel, ds: &ChemDataset) -> Result<Metrics> {
    Ok(metrics(&predict_dataset(model, ds)?, &ds.traj)?)
}

fn quantize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Where and how often the trainer writes files.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `last.cnck`, `best.cnck`, `final.cnck` and `history.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this iteration instead of `schedule.iters`.
    pub stop_at: Option<usize>,
    /// Print a line per validation point.
    pub verbose: bool,
}

/// Training state. Everything that influences later iterations lives here
/// and round-trips through [`Checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ChemNNEModel,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub history: Vec<HistoryRow>,
    /// Total training loss of every iteration.
    pub loss_trace: Vec<f64>,
    pub norm_meta: Option<NormMeta>,
    /// Lowest validation RMSE so far.
    pub best_rmse: Option<f64>,
    /// Model at that point, if it was reached in this process.
    pub best_model: Option<ChemNNEModel>,
    /// Losses accumulated since the last history row.
    pending: Vec<LossBreakdown>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig, norm_meta: Option<NormMeta>) -> Result<Trainer> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.schedule.seed);
        let model = ChemNNEModel::build(&config.model, &mut init_rng)?;
        let adam = AdamState::new(&model.params, config.schedule.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(config.schedule.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            model,
            adam,
            rng,
            iteration: 0,
            history: Vec::new(),
            loss_trace: Vec::new(),
            norm_meta,
            best_rmse: None,
            best_model: None,
            pending: Vec::new(),
            last_checkpoint: None,
        })
    }

    /// One optimizer step on a random batch.
    pub fn step(&mut self, train: &ChemDataset, map: &SpeciesMap) -> Result<LossBreakdown> {
        let s = &self.config.schedule;
        let n = train.len();
        let rows: Vec<usize> = (0..s.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let (env, x0, mut traj) = train.batch(&rows);
        let mut t = time_grid(train.n_steps());
        if s.roll {
            let tau = self.rng.random_range(0..train.n_steps());
            let (steps, n_out) = (train.n_steps(), train.n_out());
            let mut rolled = Vec::with_capacity(traj.numel());
            for b in 0..rows.len() {
                let one = traj.slice_rows(b, 1).reshape(&[steps, n_out])?;
                rolled.extend_from_slice(augment_roll(&one, tau)?.data());
            }
            traj = Tensor::new(traj.shape(), rolled)?;
            t = augment_roll(&t.reshape(&[steps, 1])?, tau)?.reshape(&[steps])?;
        }

        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let (x0v, kv) = (tape.constant(x0), tape.constant(env));
        let abort = |msg: String| Error::Training {
            iteration: self.iteration + 1,
            msg,
            checkpoint: self.last_checkpoint.clone(),
        };
        let forward = || -> Result<_> {
            let pred = self.model.forward(&p, x0v, kv, tape.constant(t))?;
            let terms = LossTerms::compute(&self.model, &p, x0v, kv, pred, tape.constant(traj), map)?;
            loss_total(&terms, &self.config.loss)
        };
        // Diverged parameters can trip a NaN guard inside the forward pass
        // before the loss is formed.
        let (total, breakdown) = match forward() {
            Err(Error::Tensor(TensorError::Numeric(msg))) => return Err(abort(msg)),
            other => other?,
        };
        if !breakdown.total.is_finite() {
            return Err(abort(format!("loss became {}", breakdown.total)));
        }
        tape.backward(total)?;
        let mut grads = p.grads();
        if let Some(max) = s.clip_norm {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                for g in &mut grads {
                    *g = g.map(|v| v * max / norm);
                }
            }
        }
        self.adam.step(&mut self.model.params, &grads)?;
        self.iteration += 1;
        self.loss_trace.push(breakdown.total);
        self.pending.push(breakdown);
        Ok(breakdown)
    }

    /// Round parameters and moments to f32, the precision checkpoints
    /// store, so a resumed run continues from exactly this state.
    fn sync_precision(&mut self) {
        for p in self.model.params.iter_mut() {
            quantize(&mut p.value);
        }
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            quantize(t);
        }
    }

    fn close_interval(&mut self, val: Option<&ChemDataset>) -> Result<()> {
        let k = self.pending.len().max(1) as f64;
        let mut mean = LossBreakdown::default();
        for b in self.pending.drain(..) {
            mean.total += b.total / k;
            mean.recon += b.recon / k;
            mean.d1 += b.d1 / k;
            mean.d2 += b.d2 / k;
            mean.identity += b.identity / k;
            mean.mass += b.mass / k;
        }
        let val_metrics = match val {
            Some(ds) if !ds.is_empty() => match evaluate(&self.model, ds) {
                Err(Error::Tensor(TensorError::Numeric(msg))) => {
                    return Err(Error::Training {
                        iteration: self.iteration,
                        msg: format!("validation failed: {msg}"),
                        checkpoint: self.last_checkpoint.clone(),
                    })
                }
                other => Some(other?),
            },
            _ => None,
        };
        if let Some(m) = val_metrics {
            if self.best_rmse.is_none_or(|b| m.rmse < b) {
                self.best_rmse = Some(m.rmse);
                self.best_model = Some(self.model.clone());
            }
        }
        self.history.push(HistoryRow {
            iter: self.iteration,
            loss: mean,
            val: val_metrics,
        });
        Ok(())
    }

    /// Train until `schedule.iters` (or `opts.stop_at`). Validation,
    /// precision sync and checkpoint writing happen every `eval_every`
    /// iterations and at the end of the schedule.
    pub fn run(&mut self, train: &ChemDataset, val: Option<&ChemDataset>, opts: &RunOptions) -> Result<()> {
        self.config.check_dataset(train)?;
        if let Some(v) = val {
            if v.n_in() != train.n_in() || v.n_out() != train.n_out() || v.n_steps() != train.n_steps() {
                return Err(Error::Config("validation set shape differs from the training set".into()));
            }
        }
        if let Some(dir) = &opts.out_dir {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let map = train.meta.species_map();
        let end = opts.stop_at.unwrap_or(self.config.schedule.iters).min(self.config.schedule.iters);
        while self.iteration < end {
            self.step(train, &map)?;
            let every = self.config.schedule.eval_every;
            if self.iteration % every == 0 || self.iteration == self.config.schedule.iters {
                self.sync_precision();
                self.close_interval(val)?;
                if opts.verbose {
                    let row = self.history.last().expect("just pushed");
                    match &row.val {
                        Some(v) => eprintln!(
                            "iter {:>6}  loss {:.5e}  val rmse {:.5} mae {:.5} mbe {:+.5}",
                            row.iter, row.loss.total, v.rmse, v.mae, v.mbe
                        ),
                        None => eprintln!("iter {:>6}  loss {:.5e}", row.iter, row.loss.total),
                    }
                }
                if let Some(dir) = &opts.out_dir {
                    self.write_outputs(dir)?;
                }
            }
        }
        Ok(())
    }

    fn write_outputs(&mut self, dir: &Path) -> Result<()> {
        let ck = self.checkpoint();
        let last = dir.join("last.cnck");
        save_checkpoint(&last, &ck)?;
        self.last_checkpoint = Some(last);
        if self.iteration == self.config.schedule.iters {
            save_checkpoint(&dir.join("final.cnck"), &ck)?;
        }
        let latest = self.history.last().and_then(|r| r.val).map(|m| m.rmse);
        if latest.is_some() && latest == self.best_rmse {
            save_checkpoint(&dir.join("best.cnck"), &ck)?;
        }
        let csv = dir.join("history.csv");
        std::fs::write(&csv, history_csv(&self.history)).map_err(Error::io(&csv))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Trainer> {
        ck.into_trainer()
    }
}

/// Build a trainer for `config` and run the whole schedule.
pub fn train_loop(
    config: TrainConfig,
    train: &ChemDataset,
    val: Option<&ChemDataset>,
    opts: &RunOptions,
) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, Some(train.meta.clone()))?;
    trainer.run(train, val, opts)?;
    Ok(trainer)
}
