//! The assembled emulator: encoder, latent propagator and decoder.
//!
//! ```text
//! z0      = sin(omega (W_in [x0, k] + b))            one latent per sample
//! z_i     = z0 + lambda(t_i)                          T tokens
//! z       = attention blocks (z)
//! latent  = z + FNO stack (z)
//! x(t_i)  = decoder(latent_i)                         shared across tokens
//! ```
//!
//! Ablation flags swap components for identity bypasses or plain layers so
//! the component grid can be built from one config type.

mod timing;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, AttentionBlock, Bound, Decoder, FnoBlock, InrLayer, Linear, ParamKind, ParamSet,
    TimeEmbedding,
};
use crate::spectral::half_spectrum_len;
use crate::tensor::{Tape, Tensor, Var};

pub use timing::{timing_harness, TimingReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_in: usize,
    pub n_env: usize,
    pub n_out: usize,
    pub n_steps: usize,
    pub d: usize,
    pub l: usize,
    pub attn_blocks: usize,
    pub heads: usize,
    pub fno_blocks: usize,
    pub fno_modes: usize,
    pub d_ff: usize,
    pub fno_activation: Activation,
    pub use_attn: bool,
    pub use_time_emb: bool,
    pub use_inr: bool,
    pub use_fno: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_in: 6,
            n_env: 3,
            n_out: 6,
            n_steps: 11,
            d: 128,
            l: 64,
            attn_blocks: 2,
            heads: 1,
            fno_blocks: 4,
            fno_modes: 6,
            d_ff: 256,
            fno_activation: Activation::Gelu,
            use_attn: true,
            use_time_emb: true,
            use_inr: true,
            use_fno: true,
        }
    }
}

impl ModelConfig {
    /// Default architecture for the given species counts.
    pub fn for_task(n_in: usize, n_out: usize) -> ModelConfig {
        ModelConfig {
            n_in,
            n_out,
            ..ModelConfig::default()
        }
    }

    /// Set the latent width, keeping `L = d/2` and `d_ff = 2d`.
    pub fn with_width(mut self, d: usize) -> ModelConfig {
        self.d = d;
        self.l = d / 2;
        self.d_ff = 2 * d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_in", self.n_in),
            ("n_env", self.n_env),
            ("n_out", self.n_out),
            ("n_steps", self.n_steps),
            ("d", self.d),
            ("l", self.l),
            ("attn_blocks", self.attn_blocks),
            ("heads", self.heads),
            ("fno_blocks", self.fno_blocks),
            ("fno_modes", self.fno_modes),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if 2 * self.l != self.d {
            return Err(Error::Config(format!(
                "time code width 2L = {} must equal d = {}",
                2 * self.l,
                self.d
            )));
        }
        if self.fno_modes > half_spectrum_len(self.n_steps) {
            return Err(Error::Config(format!(
                "fno_modes = {} exceeds {} available for {} steps",
                self.fno_modes,
                half_spectrum_len(self.n_steps),
                self.n_steps
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Parameter count implied by the config, split by kind.
    pub fn param_census(&self) -> Vec<(ParamKind, usize)> {
        let (d, ff) = (self.d, self.d_ff);
        let inr_kind = if self.use_inr { ParamKind::Sine } else { ParamKind::Linear };
        let mut out = vec![
            (ParamKind::Linear, (self.n_in + self.n_env) * d + d),
            (inr_kind, d * d + d),
        ];
        if self.use_time_emb {
            out.push((ParamKind::TimeEmbedding, self.l));
        }
        if self.use_attn {
            out.push((ParamKind::Attention, self.attn_blocks * (3 * d * d + 2 * d * ff + ff + d)));
        }
        if self.use_fno {
            out.push((ParamKind::Fno, self.fno_blocks * (d * d + 2 * self.fno_modes * d * d)));
        } else {
            out.push((ParamKind::Linear, self.fno_blocks * (d * d + d)));
        }
        out.push((inr_kind, d * d + d));
        out.push((ParamKind::Linear, d * d + d + d * self.n_out + self.n_out));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_census().iter().map(|(_, n)| n).sum()
    }
}

/// Normalized prediction times `i / T`, `i = 1..=T`.
pub fn time_grid(n_steps: usize) -> Tensor {
    Tensor::from_fn(&[n_steps], |i| (i + 1) as f64 / n_steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
enum Propagator {
    Fno(Vec<FnoBlock>),
    Mlp(Vec<InrLayer>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChemNNEModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    input: Linear,
    encoder_inr: InrLayer,
    time: Option<TimeEmbedding>,
    attention: Vec<AttentionBlock>,
    propagator: Propagator,
    decoder: Decoder,
}

impl ChemNNEModel {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ChemNNEModel> {
        cfg.validate()?;
        let d = cfg.d;
        let mut ps = ParamSet::new();
        let input = Linear::plain(&mut ps, "encoder.input", cfg.n_in + cfg.n_env, d, rng);
        let encoder_inr = if cfg.use_inr {
            crate::nn::siren_init(&mut ps, "encoder.inr", d, d, true, rng)
        } else {
            InrLayer::tanh(&mut ps, "encoder.inr", d, d, rng)
        };
        let time = cfg
            .use_time_emb
            .then(|| TimeEmbedding::new(&mut ps, "encoder.time", cfg.l));
        let mut attention = Vec::new();
        if cfg.use_attn {
            for i in 0..cfg.attn_blocks {
                attention.push(AttentionBlock::new(
                    &mut ps,
                    &format!("attention.{i}"),
                    d,
                    cfg.d_ff,
                    cfg.heads,
                    cfg.use_inr,
                    rng,
                )?);
            }
        }
        let propagator = if cfg.use_fno {
            Propagator::Fno(
                (0..cfg.fno_blocks)
                    .map(|i| {
                        FnoBlock::new(
                            &mut ps,
                            &format!("fno.{i}"),
                            d,
                            cfg.fno_modes,
                            cfg.fno_activation,
                            rng,
                        )
                    })
                    .collect(),
            )
        } else {
            Propagator::Mlp(
                (0..cfg.fno_blocks)
                    .map(|i| InrLayer {
                        lin: Linear::plain(&mut ps, &format!("mlp.{i}"), d, d, rng),
                        omega: 1.0,
                        act: cfg.fno_activation,
                    })
                    .collect(),
            )
        };
        let decoder = Decoder::new(&mut ps, "decoder", d, cfg.n_out, cfg.use_inr, rng);
        let model = ChemNNEModel {
            config: cfg.clone(),
            params: ps,
            input,
            encoder_inr,
            time,
            attention,
            propagator,
            decoder,
        };
        model.check_census()?;
        Ok(model)
    }

    /// Build the architecture for `cfg` and install `values` (name, tensor)
    /// in place of the initial parameters.
    pub fn from_parts(cfg: &ModelConfig, values: Vec<(String, Tensor)>) -> Result<ChemNNEModel> {
        let mut model = ChemNNEModel::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        if values.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        for (p, (name, value)) in model.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        model.check_census()?;
        Ok(model)
    }

    /// Compare the parameter set against the config-derived census.
    pub fn check_census(&self) -> Result<()> {
        let census = self.config.param_census();
        for kind in [
            ParamKind::Linear,
            ParamKind::Sine,
            ParamKind::Attention,
            ParamKind::Fno,
            ParamKind::TimeEmbedding,
        ] {
            let expect: usize = census.iter().filter(|(k, _)| *k == kind).map(|(_, n)| n).sum();
            let found = self.params.numel_of(kind);
            if expect != found {
                return Err(Error::Config(format!(
                    "parameter census mismatch for {kind:?}: expected {expect}, found {found}"
                )));
            }
        }
        Ok(())
    }

    /// `x0: [B, n_in]`, `k: [B, n_env]`, `t: [T]` to `[B, T, n_out]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x0: Var<'t>,
        k: Var<'t>,
        t: Var<'t>,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (xs, ks, ts) = (x0.shape(), k.shape(), t.shape());
        if xs.len() != 2 || xs[1] != cfg.n_in || ks.len() != 2 || ks[1] != cfg.n_env || ks[0] != xs[0]
        {
            return Err(crate::tensor::TensorError::Dimension {
                op: "model input",
                lhs: xs,
                rhs: ks,
            }
            .into());
        }
        if ts.len() != 1 || ts[0] == 0 {
            return Err(Error::Config(format!("time grid must be a non-empty vector, got {ts:?}")));
        }
        let (b, n_t, d) = (xs[0], ts[0], cfg.d);
        let h = self.input.forward(p, Var::concat(&[x0, k], 1)?)?;
        let z0 = self.encoder_inr.forward(p, h)?.reshape(&[b, 1, d])?;
        let lambda = match &self.time {
            Some(te) => te.forward(p, t)?,
            None => x0.tape().constant(Tensor::zeros(&[n_t, d])),
        };
        let mut z = z0.add(lambda)?;
        for blk in &self.attention {
            z = blk.forward(p, z)?;
        }
        let mut f = z;
        match &self.propagator {
            Propagator::Fno(blocks) => {
                for blk in blocks {
                    f = blk.forward(p, f)?;
                }
            }
            Propagator::Mlp(blocks) => {
                for blk in blocks {
                    f = blk.forward(p, f)?;
                }
            }
        }
        Ok(self.decoder.forward(p, z.add(f)?)?)
    }

    /// Decoder output at the `t = 0` code: `[B, n_out]`.
    pub fn initial<'t>(&self, p: &Bound<'t>, x0: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
        let b = x0.shape()[0];
        let t0 = x0.tape().constant(Tensor::zeros(&[1]));
        Ok(self.forward(p, x0, k, t0)?.reshape(&[b, self.config.n_out])?)
    }

    /// Inference on plain tensors.
    pub fn predict(&self, x0: &Tensor, k: &Tensor, t: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(x0.clone()), tape.constant(k.clone()), tape.constant(t.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn predict_initial(&self, x0: &Tensor, k: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self.initial(&p, tape.constant(x0.clone()), tape.constant(k.clone()))?;
        Ok((*out.value()).clone())
    }
}

/// Multiply-accumulate counts per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub encoder: u64,
    pub attention: u64,
    pub propagator: u64,
    pub decoder: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.encoder + self.attention + self.propagator + self.decoder
    }
}

/// Analytic per-sample MAC census over `n_steps` tokens. Linear layers count
/// `tokens * d_in * d_out`; spectral mixing counts 4 real MACs per complex
/// multiply over the kept modes plus a naive `T^2 d` DFT each way.
pub fn count_macs(cfg: &ModelConfig) -> MacCount {
    let (t, d) = (cfg.n_steps as u64, cfg.d as u64);
    let linear = |tokens: u64, a: usize, b: usize| tokens * a as u64 * b as u64;
    let mut m = MacCount {
        encoder: linear(1, cfg.n_in + cfg.n_env, cfg.d) + linear(1, cfg.d, cfg.d),
        ..MacCount::default()
    };
    if cfg.use_time_emb {
        m.encoder += t * cfg.l as u64;
    }
    if cfg.use_attn {
        let per = 3 * t * d * d + 2 * t * t * d + 2 * t * d * cfg.d_ff as u64;
        m.attention = cfg.attn_blocks as u64 * per;
    }
    let per = if cfg.use_fno {
        let modes = cfg.fno_modes.min(half_spectrum_len(cfg.n_steps)) as u64;
        t * d * d + 4 * modes * d * d + 2 * t * t * d
    } else {
        t * d * d
    };
    m.propagator = cfg.fno_blocks as u64 * per;
    m.decoder = linear(t, cfg.d, cfg.d) * 2 + linear(t, cfg.d, cfg.n_out);
    m
}
