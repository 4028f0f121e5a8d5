use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mechanism::{Environment, Mechanism};
use super::ode::{integrate, IntegratorOptions};
use crate::error::{Error, Result};
use crate::objective::SpeciesMap;
use crate::tensor::{Tensor, TensorError};
use crate::workers::run_pool;

pub const ENV_NAMES: [&str; 3] = ["temperature", "humidity", "radiation"];

/// Raw concentrations are floored here before taking the logarithm.
pub const CONC_FLOOR: f64 = 1e-3;

/// Precursors whose initial concentrations move together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecursorGroup {
    pub species: Vec<String>,
    pub low: f64,
    pub high: f64,
    pub levels: usize,
}

/// Full-factorial design over precursor groups and environment channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub groups: Vec<PrecursorGroup>,
    /// Fixed initial concentrations of non-precursor species; others start at 0.
    pub background: Vec<(String, f64)>,
    pub env_min: [f64; 3],
    pub env_max: [f64; 3],
    pub env_levels: [usize; 3],
    /// Minutes.
    pub t_end: f64,
    pub n_outputs: usize,
}

impl SamplingPlan {
    /// The plan used with the bundled mechanism: 2 levels per group and 3 per
    /// environment channel, 216 samples over 55 minutes.
    pub fn demo() -> SamplingPlan {
        let group = |species: &[&str], low, high| PrecursorGroup {
            species: species.iter().map(|s| s.to_string()).collect(),
            low,
            high,
            levels: 2,
        };
        SamplingPlan {
            groups: vec![
                group(&["AR1", "AR2"], 1.0, 20.0),
                group(&["ISO", "MT"], 0.5, 10.0),
                group(&["NO", "DMS"], 1.0, 20.0),
            ],
            background: [("O3", 40.0), ("OH", 1e-4), ("HO2", 1e-3), ("NO2", 5.0), ("H2O2", 1.0), ("SO2", 1.0)]
                .iter()
                .map(|(s, v)| (s.to_string(), *v))
                .collect(),
            env_min: [270.0, 0.2, 0.0],
            env_max: [310.0, 0.9, 1000.0],
            env_levels: [3, 3, 3],
            t_end: 55.0,
            n_outputs: 11,
        }
    }

    /// Demo plan shrunk to `levels` per environment channel.
    pub fn with_env_levels(mut self, levels: [usize; 3]) -> Self {
        self.env_levels = levels;
        self
    }

    pub fn n_conc(&self) -> usize {
        self.groups.iter().map(|g| g.levels).product()
    }

    pub fn n_env(&self) -> usize {
        self.env_levels.iter().product()
    }

    pub fn n_samples(&self) -> usize {
        self.n_conc() * self.n_env()
    }

    /// Output times in minutes.
    pub fn time_minutes(&self) -> Vec<f64> {
        (1..=self.n_outputs)
            .map(|i| self.t_end * i as f64 / self.n_outputs as f64)
            .collect()
    }

    /// Precursor species in group order.
    pub fn precursors(&self) -> Vec<String> {
        self.groups.iter().flat_map(|g| g.species.iter().cloned()).collect()
    }

    pub fn validate(&self, mech: &Mechanism) -> Result<()> {
        let mut seen = Vec::new();
        for g in &self.groups {
            if g.species.is_empty() || g.levels == 0 {
                return Err(Error::Config("precursor group needs species and at least one level".into()));
            }
            if !(g.low > 0.0 && g.high >= g.low && g.high.is_finite()) {
                return Err(Error::Config(format!(
                    "precursor bounds must satisfy 0 < low <= high, got {} and {}",
                    g.low, g.high
                )));
            }
            for s in &g.species {
                if mech.index_of(s).is_none() {
                    return Err(Error::Config(format!("precursor {s} is not in the mechanism")));
                }
                if seen.contains(s) {
                    return Err(Error::Config(format!("precursor {s} appears in two groups")));
                }
                seen.push(s.clone());
            }
        }
        if seen.is_empty() {
            return Err(Error::Config("sampling plan has no precursor groups".into()));
        }
        for (s, v) in &self.background {
            if mech.index_of(s).is_none() {
                return Err(Error::Config(format!("background species {s} is not in the mechanism")));
            }
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("background {s} = {v} must be non-negative")));
            }
        }
        for ch in 0..3 {
            if self.env_levels[ch] == 0 || !(self.env_min[ch] <= self.env_max[ch]) {
                return Err(Error::Config(format!(
                    "environment channel {} needs at least one level and min <= max",
                    ENV_NAMES[ch]
                )));
            }
        }
        for ends in [self.env_min, self.env_max] {
            Environment::from_array(ends).validate()?;
        }
        if !(self.t_end > 0.0) || self.n_outputs < 3 {
            return Err(Error::Config("plan needs t_end > 0 and at least 3 outputs".into()));
        }
        Ok(())
    }

    fn conc_level(g: &PrecursorGroup, i: usize) -> f64 {
        if g.levels == 1 {
            return (g.low * g.high).sqrt();
        }
        let f = i as f64 / (g.levels - 1) as f64;
        g.low * (g.high / g.low).powf(f)
    }

    fn env_level(&self, ch: usize, i: usize) -> f64 {
        let (lo, hi, n) = (self.env_min[ch], self.env_max[ch], self.env_levels[ch]);
        if n == 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }

    /// Initial state and environment of grid point `id`. Concentration
    /// levels vary slowest, the last environment channel fastest.
    pub fn sample(&self, mech: &Mechanism, id: usize) -> (Vec<f64>, Environment) {
        let mut c0 = vec![0.0; mech.n_species()];
        for (s, v) in &self.background {
            c0[mech.index_of(s).expect("validated")] = *v;
        }
        let mut rest = id;
        let mut env = [0.0; 3];
        for ch in (0..3).rev() {
            env[ch] = self.env_level(ch, rest % self.env_levels[ch]);
            rest /= self.env_levels[ch];
        }
        for g in self.groups.iter().rev() {
            let v = Self::conc_level(g, rest % g.levels);
            rest /= g.levels;
            for s in &g.species {
                c0[mech.index_of(s).expect("validated")] = v;
            }
        }
        (c0, Environment::from_array(env))
    }
}

/// The three prediction tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Predict the input species.
    Intra = 1,
    /// Predict significant non-input species.
    Inter = 2,
    /// Predict every non-precursor species from the precursors plus the
    /// task-2 set.
    Hybrid = 3,
}

impl Task {
    pub fn from_number(n: u8) -> Result<Task> {
        match n {
            1 => Ok(Task::Intra),
            2 => Ok(Task::Inter),
            3 => Ok(Task::Hybrid),
            _ => Err(Error::Config(format!("task must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("split must be train, val or test, got {s:?}"))),
        }
    }

    pub fn from_bits(b: u32) -> Option<Split> {
        Split::ALL.get(b as usize).copied()
    }
}

/// Everything needed to map stored values back to physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub log_base: f64,
    pub divisor: f64,
    pub floor: f64,
    pub env_names: Vec<String>,
    pub env_min: Vec<f64>,
    pub env_max: Vec<f64>,
    pub task: u8,
    pub input_species: Vec<String>,
    pub output_species: Vec<String>,
    pub time_minutes: Vec<f64>,
    pub split: Split,
    /// Grid index of every stored sample, in storage order.
    pub sample_ids: Vec<usize>,
}

impl NormMeta {
    pub fn normalize_conc(&self, v: f64) -> f64 {
        v.max(self.floor).log10() / self.divisor
    }

    pub fn denormalize_conc(&self, v: f64) -> f64 {
        10f64.powf(v * self.divisor)
    }

    pub fn normalize_env(&self, ch: usize, v: f64) -> f64 {
        let (lo, hi) = (self.env_min[ch], self.env_max[ch]);
        if hi > lo {
            2.0 * (v - lo) / (hi - lo) - 1.0
        } else {
            0.0
        }
    }

    pub fn denormalize_env(&self, ch: usize, v: f64) -> f64 {
        let (lo, hi) = (self.env_min[ch], self.env_max[ch]);
        lo + 0.5 * (v + 1.0) * (hi - lo)
    }

    /// Input/output positions of species present on both sides.
    pub fn species_map(&self) -> SpeciesMap {
        SpeciesMap::shared(&self.input_species, &self.output_species)
    }
}

/// One normalized split.
#[derive(Clone, Debug, PartialEq)]
pub struct ChemDataset {
    /// `[n, n_env]`.
    pub env: Tensor,
    /// `[n, n_in]`.
    pub x0: Tensor,
    /// `[n, T, n_out]`.
    pub traj: Tensor,
    pub meta: NormMeta,
}

impl ChemDataset {
    pub fn len(&self) -> usize {
        self.env.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_env(&self) -> usize {
        self.env.shape()[1]
    }

    pub fn n_in(&self) -> usize {
        self.x0.shape()[1]
    }

    pub fn n_steps(&self) -> usize {
        self.traj.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.traj.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let m = &self.meta;
        let ok = self.env.rank() == 2
            && self.x0.rank() == 2
            && self.traj.rank() == 3
            && self.x0.shape()[0] == n
            && self.traj.shape()[0] == n
            && m.sample_ids.len() == n
            && m.input_species.len() == self.n_in()
            && m.output_species.len() == self.n_out()
            && m.time_minutes.len() == self.n_steps()
            && m.env_min.len() == self.n_env()
            && m.env_max.len() == self.n_env();
        if !ok {
            return Err(Error::Config(format!(
                "dataset arrays env {:?}, x0 {:?}, traj {:?} disagree with their metadata",
                self.env.shape(),
                self.x0.shape(),
                self.traj.shape()
            )));
        }
        if !(m.divisor > 0.0 && m.divisor.is_finite()) {
            return Err(Error::Config(format!("normalization divisor must be positive, got {}", m.divisor)));
        }
        Ok(())
    }

    /// `(env, x0, traj)` rows of the given samples.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Tensor, Tensor) {
        (
            self.env.gather_rows(rows),
            self.x0.gather_rows(rows),
            self.traj.gather_rows(rows),
        )
    }

    /// Trajectories in physical units.
    pub fn denormalized_traj(&self) -> Tensor {
        self.traj.map(|v| self.meta.denormalize_conc(v))
    }
}

/// Fixed 64-bit mix (splitmix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Partition `ids` 0.6/0.2/0.2 by hash order. Each part is returned sorted.
pub fn split_ids(ids: &[usize], seed: u64) -> [Vec<usize>; 3] {
    let mut order = ids.to_vec();
    order.sort_by_key(|&i| (mix64(seed ^ mix64(i as u64)), i));
    let n = order.len();
    let n_train = (0.6 * n as f64).round() as usize;
    let n_val = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

/// Cyclic shift of the time axis: `out[t] = traj[(t + tau) mod T]`.
pub fn augment_roll(traj: &Tensor, tau: usize) -> Result<Tensor, TensorError> {
    if traj.rank() != 2 {
        return Err(TensorError::Contract(format!(
            "augment_roll expects [T, n], got {:?}",
            traj.shape()
        )));
    }
    let (t, n) = (traj.shape()[0], traj.shape()[1]);
    if tau >= t {
        return Err(TensorError::Contract(format!("roll offset {tau} outside [0, {t})")));
    }
    let src = traj.data();
    let mut out = Vec::with_capacity(src.len());
    for i in 0..t {
        let from = (i + tau) % t;
        out.extend_from_slice(&src[from * n..(from + 1) * n]);
    }
    Tensor::new(&[t, n], out)
}

/// Task species selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    /// A non-precursor species is significant when its peak reaches this
    /// quantile of all non-precursor concentrations in the corpus.
    pub threshold_quantile: f64,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        TaskSpec {
            task,
            threshold_quantile: 0.9,
        }
    }
}

/// One simulated grid point in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub id: usize,
    pub env: Environment,
    pub c0: Vec<f64>,
    /// `[n_outputs][n_species]`.
    pub traj: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample: usize,
    pub msg: String,
}

/// Simulate every grid point, in grid order.
pub fn simulate_plan(
    mech: &Mechanism,
    plan: &SamplingPlan,
    opts: &IntegratorOptions,
    threads: usize,
) -> Result<Vec<std::result::Result<RawSample, SampleFailure>>> {
    plan.validate(mech)?;
    let run = |id: usize| {
        let (c0, env) = plan.sample(mech, id);
        match integrate(mech, &env, &c0, plan.t_end, plan.n_outputs, opts) {
            Ok(tr) => Ok(RawSample {
                id,
                env,
                c0,
                traj: tr.outputs,
            }),
            Err(e) => Err(SampleFailure {
                sample: id,
                msg: match e {
                    Error::Integration { msg, .. } => msg,
                    other => other.to_string(),
                },
            }),
        }
    };
    Ok(run_pool(threads, || {
        (0..plan.n_samples()).into_par_iter().map(run).collect()
    }))
}

/// Input and output species indices of a task over a simulated corpus.
pub fn select_species(
    mech: &Mechanism,
    plan: &SamplingPlan,
    spec: &TaskSpec,
    corpus: &[RawSample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let precursors: Vec<usize> = plan
        .precursors()
        .iter()
        .map(|s| mech.index_of(s).expect("validated"))
        .collect();
    if spec.task == Task::Intra {
        return Ok((precursors.clone(), precursors));
    }
    if !(0.0..=1.0).contains(&spec.threshold_quantile) {
        return Err(Error::Config(format!(
            "threshold quantile must lie in [0, 1], got {}",
            spec.threshold_quantile
        )));
    }
    let others: Vec<usize> = (0..mech.n_species()).filter(|s| !precursors.contains(s)).collect();
    if others.is_empty() {
        return Err(Error::Config("mechanism has no non-precursor species".into()));
    }
    let mut pooled = Vec::new();
    let mut peaks = vec![0.0_f64; others.len()];
    for sample in corpus {
        for row in &sample.traj {
            for (k, &s) in others.iter().enumerate() {
                pooled.push(row[s]);
                peaks[k] = peaks[k].max(row[s]);
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::Config("cannot select task species from an empty corpus".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let pos = spec.threshold_quantile * (pooled.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let threshold = pooled[lo] + (pooled[hi] - pooled[lo]) * (pos - lo as f64);
    let mut significant: Vec<usize> = others
        .iter()
        .zip(&peaks)
        .filter(|(_, &p)| p >= threshold)
        .map(|(&s, _)| s)
        .collect();
    if significant.is_empty() {
        let best = peaks
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| others[k])
            .expect("non-empty");
        significant.push(best);
    }
    match spec.task {
        Task::Inter => Ok((precursors, significant)),
        _ => {
            let mut inputs = precursors;
            inputs.extend(&significant);
            Ok((inputs, others))
        }
    }
}

/// Largest `|log10|` of any floored concentration in the corpus.
pub fn log_divisor(corpus: &[RawSample], floor: f64) -> f64 {
    let mut d = 0.0_f64;
    for s in corpus {
        for v in s.c0.iter().chain(s.traj.iter().flatten()) {
            d = d.max(v.max(floor).log10().abs());
        }
    }
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Normalize a subset of the corpus into one split. Stored values are
/// rounded to f32 so that they survive the binary format unchanged.
pub fn assemble(
    corpus: &[RawSample],
    ids: &[usize],
    inputs: &[usize],
    outputs: &[usize],
    meta: NormMeta,
) -> Result<ChemDataset> {
    let by_id = |id: usize| {
        corpus
            .binary_search_by_key(&id, |s| s.id)
            .map(|k| &corpus[k])
            .map_err(|_| Error::Config(format!("sample {id} is not in the corpus")))
    };
    let n = ids.len();
    let t = meta.time_minutes.len();
    let mut env = Vec::with_capacity(n * 3);
    let mut x0 = Vec::with_capacity(n * inputs.len());
    let mut traj = Vec::with_capacity(n * t * outputs.len());
    for &id in ids {
        let s = by_id(id)?;
        for (ch, v) in s.env.as_array().into_iter().enumerate() {
            env.push(round_f32(meta.normalize_env(ch, v)));
        }
        x0.extend(inputs.iter().map(|&i| round_f32(meta.normalize_conc(s.c0[i]))));
        if s.traj.len() != t {
            return Err(Error::Config(format!(
                "sample {id} has {} outputs, expected {t}",
                s.traj.len()
            )));
        }
        for row in &s.traj {
            traj.extend(outputs.iter().map(|&o| round_f32(meta.normalize_conc(row[o]))));
        }
    }
    let ds = ChemDataset {
        env: Tensor::new(&[n, 3], env)?,
        x0: Tensor::new(&[n, inputs.len()], x0)?,
        traj: Tensor::new(&[n, t, outputs.len()], traj)?,
        meta: NormMeta {
            sample_ids: ids.to_vec(),
            ..meta
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Train/val/test splits of one generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBuild {
    pub train: ChemDataset,
    pub val: ChemDataset,
    pub test: ChemDataset,
    pub failures: Vec<SampleFailure>,
    pub n_grid: usize,
}

impl DatasetBuild {
    pub fn split(&self, s: Split) -> &ChemDataset {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Simulate the plan, select task species, normalize and split.
pub fn build_dataset(
    mech: &Mechanism,
    plan: &SamplingPlan,
    spec: &TaskSpec,
    seed: u64,
    opts: &IntegratorOptions,
    threads: usize,
) -> Result<DatasetBuild> {
    let (corpus, failures): (Vec<_>, Vec<_>) = simulate_plan(mech, plan, opts, threads)?
        .into_iter()
        .partition(|r| r.is_ok());
    let corpus: Vec<RawSample> = corpus.into_iter().map(|r| r.expect("partitioned")).collect();
    let failures: Vec<SampleFailure> = failures.into_iter().map(|r| r.expect_err("partitioned")).collect();
    if corpus.is_empty() {
        return Err(Error::Integration {
            sample: failures.first().map(|f| f.sample),
            msg: format!(
                "all {} samples failed; first: {}",
                plan.n_samples(),
                failures.first().map_or("", |f| f.msg.as_str())
            ),
        });
    }
    build_from_corpus(mech, plan, spec, seed, &corpus, failures)
}

/// Like [`build_dataset`] for an already simulated corpus (sorted by id).
pub fn build_from_corpus(
    mech: &Mechanism,
    plan: &SamplingPlan,
    spec: &TaskSpec,
    seed: u64,
    corpus: &[RawSample],
    failures: Vec<SampleFailure>,
) -> Result<DatasetBuild> {
    let (inputs, outputs) = select_species(mech, plan, spec, corpus)?;
    let names = |idx: &[usize]| idx.iter().map(|&i| mech.species[i].clone()).collect::<Vec<_>>();
    let ids: Vec<usize> = corpus.iter().map(|s| s.id).collect();
    let [train, val, test] = split_ids(&ids, seed);
    let meta = |split: Split| NormMeta {
        log_base: 10.0,
        divisor: log_divisor(corpus, CONC_FLOOR),
        floor: CONC_FLOOR,
        env_names: ENV_NAMES.iter().map(|s| s.to_string()).collect(),
        env_min: plan.env_min.to_vec(),
        env_max: plan.env_max.to_vec(),
        task: spec.task.number(),
        input_species: names(&inputs),
        output_species: names(&outputs),
        time_minutes: plan.time_minutes(),
        split,
        sample_ids: Vec::new(),
    };
    Ok(DatasetBuild {
        train: assemble(corpus, &train, &inputs, &outputs, meta(Split::Train))?,
        val: assemble(corpus, &val, &inputs, &outputs, meta(Split::Val))?,
        test: assemble(corpus, &test, &inputs, &outputs, meta(Split::Test))?,
        failures,
        n_grid: plan.n_samples(),
    })
}
