use std::time::Instant;

use serde::Serialize;

use super::{time_grid, ChemNNEModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WARMUP_RUNS: usize = 3;
pub const TIMED_RUNS: usize = 30;

#[derive(Clone, Debug, Serialize)]
pub struct TimingReport {
    pub batch: usize,
    pub runs: usize,
    /// Median wall time of one batched forward pass divided by the batch size.
    pub per_sample_seconds: f64,
}

/// Median inference time per sample over [`TIMED_RUNS`] batched forward
/// passes after [`WARMUP_RUNS`] discarded ones. Rows are drawn cyclically
/// from `x0`/`env` to fill the batch.
pub fn timing_harness(
    model: &ChemNNEModel,
    x0: &Tensor,
    env: &Tensor,
    batch: usize,
) -> Result<TimingReport> {
    let n = x0.shape().first().copied().unwrap_or(0);
    if n == 0 || batch == 0 {
        return Err(Error::Config("timing needs a non-empty dataset and batch".into()));
    }
    let rows: Vec<usize> = (0..batch).map(|i| i % n).collect();
    let xb = x0.gather_rows(&rows);
    let kb = env.gather_rows(&rows);
    let t = time_grid(model.config.n_steps);
    let mut times = Vec::with_capacity(TIMED_RUNS);
    for run in 0..WARMUP_RUNS + TIMED_RUNS {
        let start = Instant::now();
        let out = model.predict(&xb, &kb, &t)?;
        let elapsed = start.elapsed().as_secs_f64();
        std::hint::black_box(out);
        if run >= WARMUP_RUNS {
            times.push(elapsed);
        }
    }
    times.sort_by(f64::total_cmp);
    let median = if TIMED_RUNS % 2 == 1 {
        times[TIMED_RUNS / 2]
    } else {
        0.5 * (times[TIMED_RUNS / 2 - 1] + times[TIMED_RUNS / 2])
    };
    Ok(TimingReport {
        batch,
        runs: TIMED_RUNS,
        per_sample_seconds: median / batch as f64,
    })
}
