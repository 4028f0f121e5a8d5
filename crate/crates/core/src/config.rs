//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! profile = paper-defaults      # optional, must come first
//! model.d = 64
//! train.iters = 2000
//! loss.mass = 0.001
//! data.groups = AR1+AR2:1:20:2, ISO+MT:0.5:10:2
//! report.species = O3, NO2
//! ```
//!
//! A `[section]` line prefixes the keys that follow it. Keys that are not
//! listed in [`RunConfig::entries`] are rejected, and so are repeated keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kinetics::{ChemDataset, IntegratorOptions, PrecursorGroup, SamplingPlan, Task, TaskSpec};
use crate::model::ModelConfig;
use crate::nn::Activation;
use crate::objective::LossWeights;
use crate::train::{Schedule, TrainConfig};

pub const PROFILES: [&str; 2] = ["default", "paper-defaults"];

/// Where the data comes from and how it is cut into tasks and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Path to a mechanism file, or `demo` for the bundled one.
    pub mechanism: String,
    pub task: Task,
    pub threshold_quantile: f64,
    /// Seed of the train/val/test split.
    pub seed: u64,
    pub plan: SamplingPlan,
    pub rel_tol: f64,
    /// Generation fails if more than this fraction of samples fail.
    pub max_failure_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportConfig {
    /// Species to plot; empty means every output species.
    pub species: Vec<String>,
    /// Number of samples drawn as trajectory figures.
    pub samples: usize,
    pub worst_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    /// `n_in`, `n_out` and `n_steps` of zero are taken from the data.
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub data: DataConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: "default".into(),
            model: ModelConfig {
                n_in: 0,
                n_out: 0,
                n_steps: 0,
                ..ModelConfig::default()
            },
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            data: DataConfig {
                mechanism: "demo".into(),
                task: Task::Intra,
                threshold_quantile: 0.9,
                seed: 0,
                plan: SamplingPlan::demo(),
                rel_tol: IntegratorOptions::default().rel_tol,
                max_failure_fraction: 0.05,
            },
            report: ReportConfig {
                species: Vec::new(),
                samples: 3,
                worst_k: 5,
            },
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> String {
    format!("{key}: cannot read {value:?} as {want}")
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| bad(key, v, std::any::type_name::<T>()))
}

fn boolean(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn num_list<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N], String> {
    let items = list(v);
    if items.len() != N {
        return Err(format!("{key}: expected {N} comma-separated values, got {}", items.len()));
    }
    let parsed = items.iter().map(|s| num(key, s)).collect::<Result<Vec<T>, String>>()?;
    parsed.try_into().map_err(|_| unreachable!())
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn auto(v: usize) -> String {
    if v == 0 {
        "auto".into()
    } else {
        v.to_string()
    }
}

fn parse_auto(key: &str, v: &str) -> Result<usize, String> {
    if v == "auto" {
        Ok(0)
    } else {
        num(key, v)
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Sine => "sine",
        Activation::Tanh => "tanh",
        Activation::Gelu => "gelu",
        Activation::Identity => "identity",
    }
}

/// `AR1+AR2:1:20:2` is species AR1 and AR2 from 1 to 20 in 2 levels.
fn parse_group(key: &str, v: &str) -> Result<PrecursorGroup, String> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(bad(key, v, "species+species:low:high:levels"));
    }
    Ok(PrecursorGroup {
        species: parts[0].split('+').map(|s| s.trim().to_string()).collect(),
        low: num(key, parts[1])?,
        high: num(key, parts[2])?,
        levels: num(key, parts[3])?,
    })
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        match name {
            "default" => {}
            // Published training setup: Adam at 1e-3, batch 4096, 100k
            // iterations, loss weights (1, 10, 10, 1, 0.001).
            "paper-defaults" => {
                cfg.profile = name.into();
                cfg.schedule.lr = 1e-3;
                cfg.schedule.batch_size = 4096;
                cfg.schedule.iters = 100_000;
                cfg.loss = LossWeights {
                    recon: 1.0,
                    d1: 10.0,
                    d2: 10.0,
                    identity: 1.0,
                    mass: 0.001,
                };
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown profile {name:?}; known: {}",
                    PROFILES.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let s = &mut self.schedule;
        let d = &mut self.data;
        match key {
            "model.n_in" => m.n_in = parse_auto(key, v)?,
            "model.n_out" => m.n_out = parse_auto(key, v)?,
            "model.n_steps" => m.n_steps = parse_auto(key, v)?,
            "model.d" => m.d = num(key, v)?,
            "model.l" => m.l = num(key, v)?,
            "model.attn_blocks" => m.attn_blocks = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.fno_blocks" => m.fno_blocks = num(key, v)?,
            "model.fno_modes" => m.fno_modes = num(key, v)?,
            "model.d_ff" => m.d_ff = num(key, v)?,
            "model.fno_activation" => {
                m.fno_activation = match v {
                    "gelu" => Activation::Gelu,
                    "sine" => Activation::Sine,
                    "tanh" => Activation::Tanh,
                    _ => return Err(bad(key, v, "gelu, sine or tanh")),
                }
            }
            "model.use_attn" => m.use_attn = boolean(key, v)?,
            "model.use_time_emb" => m.use_time_emb = boolean(key, v)?,
            "model.use_inr" => m.use_inr = boolean(key, v)?,
            "model.use_fno" => m.use_fno = boolean(key, v)?,
            "loss.recon" => self.loss.recon = num(key, v)?,
            "loss.d1" => self.loss.d1 = num(key, v)?,
            "loss.d2" => self.loss.d2 = num(key, v)?,
            "loss.identity" => self.loss.identity = num(key, v)?,
            "loss.mass" => self.loss.mass = num(key, v)?,
            "train.iters" => s.iters = num(key, v)?,
            "train.batch_size" => s.batch_size = num(key, v)?,
            "train.lr" => s.lr = num(key, v)?,
            "train.eval_every" => s.eval_every = num(key, v)?,
            "train.seed" => s.seed = num(key, v)?,
            "train.clip_norm" => s.clip_norm = if v == "none" { None } else { Some(num(key, v)?) },
            "train.roll" => s.roll = boolean(key, v)?,
            "data.mechanism" => d.mechanism = v.to_string(),
            "data.task" => d.task = Task::from_number(num(key, v)?).map_err(|e| format!("{key}: {e}"))?,
            "data.threshold_quantile" => d.threshold_quantile = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "data.groups" => d.plan.groups = list(v).iter().map(|g| parse_group(key, g)).collect::<Result<_, _>>()?,
            "data.background" => {
                d.plan.background = list(v)
                    .iter()
                    .map(|item| match item.split_once(':') {
                        Some((name, c)) => Ok((name.trim().to_string(), num(key, c.trim())?)),
                        None => Err(bad(key, item, "species:concentration")),
                    })
                    .collect::<Result<_, String>>()?
            }
            "data.env_min" => d.plan.env_min = num_list(key, v)?,
            "data.env_max" => d.plan.env_max = num_list(key, v)?,
            "data.env_levels" => d.plan.env_levels = num_list(key, v)?,
            "data.t_end" => d.plan.t_end = num(key, v)?,
            "data.n_outputs" => d.plan.n_outputs = num(key, v)?,
            "data.rel_tol" => d.rel_tol = num(key, v)?,
            "data.max_failure_fraction" => d.max_failure_fraction = num(key, v)?,
            "report.species" => self.report.species = list(v).iter().map(|s| s.to_string()).collect(),
            "report.samples" => self.report.samples = num(key, v)?,
            "report.worst_k" => self.report.worst_k = num(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.schedule;
        let d = &self.data;
        let groups: Vec<String> = d
            .plan
            .groups
            .iter()
            .map(|g| format!("{}:{}:{}:{}", g.species.join("+"), g.low, g.high, g.levels))
            .collect();
        let background: Vec<String> = d.plan.background.iter().map(|(n, c)| format!("{n}:{c}")).collect();
        vec![
            ("model.n_in", auto(m.n_in)),
            ("model.n_out", auto(m.n_out)),
            ("model.n_steps", auto(m.n_steps)),
            ("model.d", m.d.to_string()),
            ("model.l", m.l.to_string()),
            ("model.attn_blocks", m.attn_blocks.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.fno_blocks", m.fno_blocks.to_string()),
            ("model.fno_modes", m.fno_modes.to_string()),
            ("model.d_ff", m.d_ff.to_string()),
            ("model.fno_activation", activation_name(m.fno_activation).into()),
            ("model.use_attn", m.use_attn.to_string()),
            ("model.use_time_emb", m.use_time_emb.to_string()),
            ("model.use_inr", m.use_inr.to_string()),
            ("model.use_fno", m.use_fno.to_string()),
            ("loss.recon", self.loss.recon.to_string()),
            ("loss.d1", self.loss.d1.to_string()),
            ("loss.d2", self.loss.d2.to_string()),
            ("loss.identity", self.loss.identity.to_string()),
            ("loss.mass", self.loss.mass.to_string()),
            ("train.iters", s.iters.to_string()),
            ("train.batch_size", s.batch_size.to_string()),
            ("train.lr", s.lr.to_string()),
            ("train.eval_every", s.eval_every.to_string()),
            ("train.seed", s.seed.to_string()),
            ("train.clip_norm", s.clip_norm.map_or("none".into(), |c| c.to_string())),
            ("train.roll", s.roll.to_string()),
            ("data.mechanism", d.mechanism.clone()),
            ("data.task", d.task.number().to_string()),
            ("data.threshold_quantile", d.threshold_quantile.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.groups", groups.join(", ")),
            ("data.background", background.join(", ")),
            ("data.env_min", join(&d.plan.env_min)),
            ("data.env_max", join(&d.plan.env_max)),
            ("data.env_levels", join(&d.plan.env_levels)),
            ("data.t_end", d.plan.t_end.to_string()),
            ("data.n_outputs", d.plan.n_outputs.to_string()),
            ("data.rel_tol", d.rel_tol.to_string()),
            ("data.max_failure_fraction", d.max_failure_fraction.to_string()),
            ("report.species", self.report.species.join(", ")),
            ("report.samples", self.report.samples.to_string()),
            ("report.worst_k", self.report.worst_k.to_string()),
        ]
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() || k == "profile" {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if seen.contains(&key) {
                return Err(err(format!("key {key:?} is set twice")));
            }
            if key == "profile" {
                if !seen.is_empty() {
                    return Err(err("profile must be the first key".into()));
                }
                cfg = RunConfig::profile(v).map_err(|e| err(e.to_string()))?;
            } else {
                cfg.set(&key, v).map_err(err)?;
            }
            seen.push(key);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg } => Error::Parse {
                line,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    /// The fully resolved configuration; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!("profile = {}\n", self.profile);
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.schedule.seed = seed;
        self.data.seed = seed;
        self
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            task: self.data.task,
            threshold_quantile: self.data.threshold_quantile,
        }
    }

    pub fn integrator(&self) -> IntegratorOptions {
        IntegratorOptions {
            rel_tol: self.data.rel_tol,
            ..IntegratorOptions::default()
        }
    }

    /// Training configuration for a dataset. Pinned model sizes must match.
    pub fn train_config(&self, ds: &ChemDataset) -> Result<TrainConfig> {
        let mut model = self.model.clone();
        for (name, pinned, actual) in [
            ("model.n_in", &mut model.n_in, ds.n_in()),
            ("model.n_out", &mut model.n_out, ds.n_out()),
            ("model.n_steps", &mut model.n_steps, ds.n_steps()),
        ] {
            if *pinned != 0 && *pinned != actual {
                return Err(Error::Config(format!("{name} = {pinned} but the dataset has {actual}")));
            }
            *pinned = actual;
        }
        model.n_env = ds.n_env();
        let cfg = TrainConfig {
            model,
            loss: self.loss,
            schedule: self.schedule.clone(),
        };
        cfg.validate()?;
        cfg.check_dataset(ds)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_parses_back() {
        let mut cfg = RunConfig::profile("paper-defaults").unwrap();
        cfg.schedule.clip_norm = Some(10.0);
        cfg.model.n_in = 6;
        cfg.report.species = vec!["O3".into(), "NO2".into()];
        cfg.data.plan.background[1].1 = 1.25e-7;
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_entry_is_settable() {
        let base = RunConfig::default();
        for (k, v) in base.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert_eq!(c, base, "{k}");
        }
    }

    #[test]
    fn sections_and_comments() {
        let text = "# run\n[train]\niters = 10 # short\nlr=0.5\n\n[loss]\nmass = 0\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.schedule.iters, 10);
        assert_eq!(cfg.schedule.lr, 0.5);
        assert_eq!(cfg.loss.mass, 0.0);
    }

    #[test]
    fn rejects_bad_documents() {
        let line_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Parse { line, msg }) => (line, msg),
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("train.iters = 3\nmodel.colour = red").0, 2);
        assert!(line_of("model.colour = red").1.contains("model.colour"));
        assert_eq!(line_of("train.iters = 3\ntrain.iters = 4").0, 2);
        assert_eq!(line_of("train.iters = 3\nprofile = paper-defaults").0, 2);
        assert_eq!(line_of("profile = fast").0, 1);
        assert_eq!(line_of("\n\ntrain.lr = fast").0, 3);
        assert_eq!(line_of("train.roll = yes").0, 1);
        assert_eq!(line_of("data.env_min = 1, 2").0, 1);
        assert_eq!(line_of("data.groups = A:1:2").0, 1);
        assert_eq!(line_of("data.task = 4").0, 1);
        assert_eq!(line_of("just words").0, 1);
    }

    #[test]
    fn groups_and_background_lists() {
        let cfg = RunConfig::parse("data.groups = A+B:1:20:3, C:0.5:0.5:1\ndata.background = O3:40, OH:1e-4").unwrap();
        let g = &cfg.data.plan.groups;
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].species, ["A", "B"]);
        assert_eq!((g[0].low, g[0].high, g[0].levels), (1.0, 20.0, 3));
        assert_eq!(cfg.data.plan.background, [("O3".to_string(), 40.0), ("OH".to_string(), 1e-4)]);
    }

    #[test]
    fn profile_then_overrides() {
        let cfg = RunConfig::parse("profile = paper-defaults\ntrain.iters = 7").unwrap();
        assert_eq!(cfg.schedule.batch_size, 4096);
        assert_eq!(cfg.schedule.iters, 7);
        assert_eq!(cfg.profile, "paper-defaults");
    }
}
