use nalgebra::{DMatrix, DVector};

use super::mechanism::{Environment, Mechanism};
use crate::error::{Error, Result};

/// Mass-action right-hand side `dc/dt` and its dense Jacobian.
pub fn rhs_and_jacobian(mech: &Mechanism, rates: &[f64], c: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = mech.n_species();
    let mut dc = vec![0.0; n];
    let mut jac = DMatrix::zeros(n, n);
    let mut partial = Vec::new();
    for (r, &k) in mech.reactions.iter().zip(rates) {
        let mut rate = k;
        for &(s, m) in &r.reactants {
            rate *= c[s].powi(m as i32);
        }
        // d rate / d c_m for every reactant m
        partial.clear();
        for &(m, sm) in &r.reactants {
            let mut d = k * sm as f64 * c[m].powi(sm as i32 - 1);
            for &(s, ss) in &r.reactants {
                if s != m {
                    d *= c[s].powi(ss as i32);
                }
            }
            partial.push((m, d));
        }
        for &(s, m) in &r.reactants {
            dc[s] -= m as f64 * rate;
            for &(col, d) in &partial {
                jac[(s, col)] -= m as f64 * d;
            }
        }
        for &(s, m) in &r.products {
            dc[s] += m as f64 * rate;
            for &(col, d) in &partial {
                jac[(s, col)] += m as f64 * d;
            }
        }
    }
    (dc, jac)
}

/// Right-hand side only.
pub fn rhs(mech: &Mechanism, rates: &[f64], c: &[f64]) -> Vec<f64> {
    let mut dc = vec![0.0; mech.n_species()];
    for (r, &k) in mech.reactions.iter().zip(rates) {
        let mut rate = k;
        for &(s, m) in &r.reactants {
            rate *= c[s].powi(m as i32);
        }
        for &(s, m) in &r.reactants {
            dc[s] -= m as f64 * rate;
        }
        for &(s, m) in &r.products {
            dc[s] += m as f64 * rate;
        }
    }
    dc
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorOptions {
    /// Agreement required between successive refinements, relative to
    /// `|c| + abs_floor`.
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Newton stops once every component of the update is below this.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Initial and maximal substeps per output interval.
    pub min_substeps: usize,
    pub max_substeps: usize,
    /// A run fails if more than this fraction of its steps clip negatives.
    pub max_clip_fraction: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rel_tol: 1e-6,
            abs_floor: 1e-3,
            newton_tol: 1e-10,
            max_newton: 20,
            min_substeps: 4,
            max_substeps: 1 << 16,
            max_clip_fraction: 0.05,
        }
    }
}

/// Output of one fixed-step backward-Euler run.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedRun {
    /// `[n_outputs][n_species]` at `t_end * i / n_outputs`, `i = 1..`.
    pub outputs: Vec<Vec<f64>>,
    pub steps: usize,
    /// Steps in which a Newton iterate had a negative component clipped.
    pub clipped_steps: usize,
}

enum StepFailure {
    Newton,
    Singular,
}

fn be_step(
    mech: &Mechanism,
    rates: &[f64],
    c: &[f64],
    h: f64,
    opts: &IntegratorOptions,
    clipped: &mut bool,
) -> std::result::Result<Vec<f64>, StepFailure> {
    let n = c.len();
    let mut y = c.to_vec();
    // The iteration matrix is factored at the start of the step and
    // refactored only if the update stops shrinking.
    let factor = |y: &[f64]| {
        let (_, j) = rhs_and_jacobian(mech, rates, y);
        (DMatrix::identity(n, n) - j * h).lu()
    };
    let mut lu = factor(&y);
    let mut previous = f64::INFINITY;
    for _ in 0..opts.max_newton {
        let f = rhs(mech, rates, &y);
        let g = DVector::from_fn(n, |i, _| -(y[i] - c[i] - h * f[i]));
        let delta = lu.solve(&g).ok_or(StepFailure::Singular)?;
        let mut worst = 0.0_f64;
        for i in 0..n {
            y[i] += delta[i];
            worst = worst.max(delta[i].abs());
            if y[i] < 0.0 {
                y[i] = 0.0;
                *clipped = true;
            }
        }
        if worst <= opts.newton_tol {
            return Ok(y);
        }
        if worst > 0.5 * previous {
            lu = factor(&y);
        }
        previous = worst;
    }
    Err(StepFailure::Newton)
}

/// Backward Euler with `substeps` equal steps per output interval.
pub fn integrate_fixed(
    mech: &Mechanism,
    rates: &[f64],
    c0: &[f64],
    t_end: f64,
    n_outputs: usize,
    substeps: usize,
    opts: &IntegratorOptions,
) -> Result<FixedRun> {
    if c0.len() != mech.n_species() {
        return Err(Error::Config(format!(
            "initial state has {} species, mechanism has {}",
            c0.len(),
            mech.n_species()
        )));
    }
    if !(t_end > 0.0) || n_outputs == 0 || substeps == 0 {
        return Err(Error::Config("integration needs t_end > 0 and at least one output and step".into()));
    }
    if c0.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Config("initial concentrations must be non-negative".into()));
    }
    let h = t_end / (n_outputs * substeps) as f64;
    let mut c = c0.to_vec();
    let mut outputs = Vec::with_capacity(n_outputs);
    let mut clipped_steps = 0;
    for _ in 0..n_outputs {
        for _ in 0..substeps {
            let mut clipped = false;
            c = be_step(mech, rates, &c, h, opts, &mut clipped).map_err(|e| Error::Integration {
                sample: None,
                msg: match e {
                    StepFailure::Newton => format!(
                        "Newton did not converge in {} iterations (step {h:e})",
                        opts.max_newton
                    ),
                    StepFailure::Singular => format!("singular Newton matrix (step {h:e})"),
                },
            })?;
            clipped_steps += clipped as usize;
        }
        outputs.push(c.clone());
    }
    Ok(FixedRun {
        outputs,
        steps: n_outputs * substeps,
        clipped_steps,
    })
}

/// Result of an adaptive-refinement integration.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[n_outputs][n_species]`.
    pub outputs: Vec<Vec<f64>>,
    /// Substeps per output interval of the finest run used.
    pub substeps: usize,
}

type States = Vec<Vec<f64>>;

fn combine(fine: &States, coarse: &States, factor: f64) -> States {
    fine.iter()
        .zip(coarse)
        .map(|(f, c)| f.iter().zip(c).map(|(a, b)| a + (a - b) / factor).collect())
        .collect()
}

/// Integrate `c0` over `[0, t_end]` and report `n_outputs` equally spaced
/// states (the initial state excluded).
///
/// Backward Euler is run with the substep count doubled from
/// `min_substeps`. Its global error expands in powers of the step, so the
/// runs are combined in a Richardson table (`T[k][j] = T[k][j-1] +
/// (T[k][j-1] - T[k-1][j-1]) / (2^j - 1)`, at most `MAX_ORDER` columns).
/// Refinement stops when the two newest diagonal estimates agree within
/// `rel_tol (|c| + abs_floor)` at every output point, and the newest
/// estimate is returned.
pub fn integrate(
    mech: &Mechanism,
    env: &Environment,
    c0: &[f64],
    t_end: f64,
    n_outputs: usize,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    const MAX_ORDER: usize = 4;
    env.validate()?;
    let rates = mech.rates(env);
    let mut n = opts.min_substeps.max(1);
    // row of the table built from the previous run
    let mut row: Vec<States> = Vec::new();
    let mut last_err = String::new();
    while n <= opts.max_substeps {
        let run = match integrate_fixed(mech, &rates, c0, t_end, n_outputs, n, opts) {
            Ok(run) => run,
            Err(e) => {
                // A finer step may still converge.
                last_err = e.to_string();
                row.clear();
                n *= 2;
                continue;
            }
        };
        let clip_ok = run.clipped_steps as f64 <= opts.max_clip_fraction * run.steps as f64;
        let mut next = vec![run.outputs];
        for j in 1..=row.len().min(MAX_ORDER - 1) {
            let factor = ((1usize << j) - 1) as f64;
            next.push(combine(&next[j - 1], &row[j - 1], factor));
        }
        if !row.is_empty() && clip_ok {
            let best = next.last().expect("non-empty");
            let prev = row.last().expect("non-empty");
            let agree = best.iter().zip(prev).all(|(a, b)| {
                a.iter()
                    .zip(b)
                    .all(|(x, y)| (x - y).abs() <= opts.rel_tol * (x.abs() + opts.abs_floor))
            });
            if agree && next.len() > 2 {
                return Ok(Trajectory {
                    outputs: next.pop().expect("non-empty"),
                    substeps: n,
                });
            }
        }
        if !clip_ok {
            last_err = format!(
                "{} of {} steps clipped negative concentrations",
                run.clipped_steps, run.steps
            );
        }
        row = next;
        n *= 2;
    }
    Err(Error::Integration {
        sample: None,
        msg: if last_err.is_empty() {
            format!("no agreement within {} substeps per output", opts.max_substeps)
        } else {
            format!("no agreement within {} substeps per output ({last_err})", opts.max_substeps)
        },
    })
}
