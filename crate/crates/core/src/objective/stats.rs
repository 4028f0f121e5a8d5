use std::fmt::Write;

use crate::tensor::{Tensor, TensorError};

pub const STATS_CSV_HEADER: &str = "species_index,species_name,t_index,mean_err,var_err";

/// Mean and population variance of signed errors per `(t, species)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub mean: Tensor,
    pub variance: Tensor,
    pub samples: usize,
    /// `[S, T, N]` signed errors, kept on request.
    pub errors: Option<Tensor>,
}

/// Two-pass statistics over the leading (sample) axis of `[S, T, N]` sets.
pub fn error_stats(pred: &Tensor, truth: &Tensor, keep_errors: bool) -> Result<ErrorStats, TensorError> {
    if pred.shape() != truth.shape() || pred.rank() != 3 {
        return Err(TensorError::Dimension {
            op: "error_stats",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let (s, t, n) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if s == 0 {
        return Err(TensorError::Contract("error statistics of an empty set".into()));
    }
    let cells = t * n;
    let errors: Vec<f64> = pred.data().iter().zip(truth.data()).map(|(p, y)| p - y).collect();
    let mut mean = vec![0.0; cells];
    for row in errors.chunks(cells) {
        for (m, e) in mean.iter_mut().zip(row) {
            *m += e;
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let mut var = vec![0.0; cells];
    for row in errors.chunks(cells) {
        for ((v, e), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (e - m) * (e - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= s as f64);
    Ok(ErrorStats {
        mean: Tensor::new(&[t, n], mean)?,
        variance: Tensor::new(&[t, n], var)?,
        samples: s,
        errors: keep_errors.then(|| Tensor::new(&[s, t, n], errors)).transpose()?,
    })
}

impl ErrorStats {
    pub fn steps(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn species(&self) -> usize {
        self.mean.shape()[1]
    }

    /// Variance at step `t` averaged over species.
    pub fn mean_variance_at(&self, t: usize) -> f64 {
        let n = self.species();
        self.variance.data()[t * n..(t + 1) * n].iter().sum::<f64>() / n as f64
    }

    /// Per-species RMSE over samples and steps, from `mean^2 + var`.
    pub fn species_rmse(&self) -> Vec<f64> {
        let (t, n) = (self.steps(), self.species());
        (0..n)
            .map(|j| {
                let ms: f64 = (0..t)
                    .map(|i| {
                        let m = self.mean.at(&[i, j]);
                        m * m + self.variance.at(&[i, j])
                    })
                    .sum();
                (ms / t as f64).sqrt()
            })
            .collect()
    }

    /// The `k` species with the largest RMSE, worst first.
    pub fn worst_species(&self, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.species_rmse().into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    /// One row per cell with 1-based step indices.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from(STATS_CSV_HEADER);
        out.push('\n');
        for j in 0..self.species() {
            let name = names.get(j).map(String::as_str).unwrap_or("");
            for t in 0..self.steps() {
                let _ = writeln!(
                    out,
                    "{j},{name},{},{:e},{:e}",
                    t + 1,
                    self.mean.at(&[t, j]),
                    self.variance.at(&[t, j])
                );
            }
        }
        out
    }
}
