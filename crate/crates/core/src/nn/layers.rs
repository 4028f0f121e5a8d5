use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::spectral::{half_spectrum_len, spectral_conv};
use crate::tensor::{Tensor, TensorError, Var};

/// SIREN first-layer frequency.
pub const OMEGA_0: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sine,
    Tanh,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Sine => x.sin(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
            Activation::Identity => x,
        }
    }
}

/// Half-width of the SIREN uniform init: `1/d_in` for the first layer,
/// `sqrt(6/d_in)` otherwise.
pub fn siren_bound(d_in: usize, is_first: bool) -> f64 {
    if is_first {
        1.0 / d_in as f64
    } else {
        (6.0 / d_in as f64).sqrt()
    }
}

/// Half-width of the init for plain linear layers.
pub fn plain_bound(d_in: usize) -> f64 {
    (1.0 / d_in as f64).sqrt()
}

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    })
}

/// `x W + b` over the last axis, `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn with_bound<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        kind: ParamKind,
        d_in: usize,
        d_out: usize,
        bound: f64,
        rng: &mut R,
    ) -> Linear {
        let w = params.add(format!("{name}.w"), kind, uniform(&[d_in, d_out], bound, rng));
        let b = params.add(format!("{name}.b"), kind, Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn plain<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Linear {
        Linear::with_bound(params, name, ParamKind::Linear, d_in, d_out, plain_bound(d_in), rng)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.matmul(p.get(self.w))?.add(p.get(self.b))
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.d_in * self.d_out) as u64
    }
}

/// `act(omega (x W + b))`; a sine layer in the INR sense when `act` is sine.
#[derive(Clone, Debug, PartialEq)]
pub struct InrLayer {
    pub lin: Linear,
    pub omega: f64,
    pub act: Activation,
}

/// SIREN-initialized sine layer. The first layer uses `omega = 30`.
pub fn siren_init<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    d_in: usize,
    d_out: usize,
    is_first: bool,
    rng: &mut R,
) -> InrLayer {
    let bound = siren_bound(d_in, is_first);
    InrLayer {
        lin: Linear::with_bound(params, name, ParamKind::Sine, d_in, d_out, bound, rng),
        omega: if is_first { OMEGA_0 } else { 1.0 },
        act: Activation::Sine,
    }
}

impl InrLayer {
    /// Same slot as a sine layer but `tanh` with plain init; the
    /// `use_inr = false` ablation.
    pub fn tanh<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> InrLayer {
        InrLayer {
            lin: Linear::plain(params, name, d_in, d_out, rng),
            omega: 1.0,
            act: Activation::Tanh,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let mut h = self.lin.forward(p, x)?;
        if self.omega != 1.0 {
            h = h.scale(self.omega);
        }
        Ok(self.act.apply(h))
    }
}

/// Learnable sinusoidal time code `(sin(2 pi theta t), cos(2 pi theta t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub theta: ParamId,
    pub l: usize,
}

impl TimeEmbedding {
    /// Frequencies start evenly spaced on `[0.1, 5.5]` cycles per window.
    pub fn new(params: &mut ParamSet, name: &str, l: usize) -> TimeEmbedding {
        let theta = Tensor::from_fn(&[l], |j| {
            if l == 1 {
                1.0
            } else {
                0.1 + 5.4 * j as f64 / (l - 1) as f64
            }
        });
        TimeEmbedding {
            theta: params.add(format!("{name}.theta"), ParamKind::TimeEmbedding, theta),
            l,
        }
    }

    /// `t: [T]` to `[T, 2L]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, t: Var<'t>) -> Result<Var<'t>, TensorError> {
        let n = t.shape().iter().product();
        let theta = p.get(self.theta).reshape(&[1, self.l])?;
        let phase = t.reshape(&[n, 1])?.matmul(theta)?.scale(TAU);
        Var::concat(&[phase.sin(), phase.cos()], 1)
    }
}

/// Unmasked self-attention over tokens with a double residual:
/// `z + ffn(z + softmax(Q K^T / sqrt(d/h)) V)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ffn_in: InrLayer,
    pub ffn_out: Linear,
    pub heads: usize,
    pub d: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        sine: bool,
        rng: &mut R,
    ) -> Result<AttentionBlock, TensorError> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        let bound = plain_bound(d);
        let mut proj = |suffix: &str, rng: &mut R| {
            params.add(
                format!("{name}.{suffix}"),
                ParamKind::Attention,
                uniform(&[d, d], bound, rng),
            )
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        let (ffn_bound, act) = if sine {
            (siren_bound(d, false), Activation::Sine)
        } else {
            (plain_bound(d), Activation::Tanh)
        };
        let ffn_in = InrLayer {
            lin: Linear::with_bound(
                params,
                &format!("{name}.ffn1"),
                ParamKind::Attention,
                d,
                d_ff,
                ffn_bound,
                rng,
            ),
            omega: 1.0,
            act,
        };
        let ffn_out = Linear::with_bound(
            params,
            &format!("{name}.ffn2"),
            ParamKind::Attention,
            d_ff,
            d,
            plain_bound(d_ff),
            rng,
        );
        Ok(AttentionBlock {
            wq,
            wk,
            wv,
            ffn_in,
            ffn_out,
            heads,
            d,
        })
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let s = x.shape();
        let (b, t) = (s[0], s[1]);
        x.reshape(&[b, t, self.heads, self.d / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// Attention weights `[B, h, T, T]`; rows sum to one.
    pub fn scores<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, TensorError> {
        let q = self.split_heads(z.matmul(p.get(self.wq))?)?;
        let k = self.split_heads(z.matmul(p.get(self.wk))?)?;
        let dh = (self.d / self.heads) as f64;
        q.matmul(k.transpose()?)?.scale(1.0 / dh.sqrt()).softmax(3)
    }

    /// `z: [B, T, d]`, already carrying the time code.
    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, TensorError> {
        let s = z.shape();
        if s.len() != 3 || s[2] != self.d {
            return Err(TensorError::Dimension {
                op: "attention",
                lhs: s,
                rhs: vec![self.d],
            });
        }
        let (b, t) = (s[0], s[1]);
        let v = self.split_heads(z.matmul(p.get(self.wv))?)?;
        let mixed = self
            .scores(p, z)?
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.d])?;
        let inner = z.add(mixed)?;
        let ffn = self.ffn_out.forward(p, self.ffn_in.forward(p, inner)?)?;
        z.add(ffn)
    }
}

/// `act(z W + F^-1(R F z))` along the token axis.
#[derive(Clone, Debug, PartialEq)]
pub struct FnoBlock {
    pub w_local: ParamId,
    pub r_re: ParamId,
    pub r_im: ParamId,
    pub modes: usize,
    pub d: usize,
    pub act: Activation,
}

impl FnoBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d: usize,
        modes: usize,
        act: Activation,
        rng: &mut R,
    ) -> FnoBlock {
        let w_local = params.add(
            format!("{name}.w"),
            ParamKind::Fno,
            uniform(&[d, d], plain_bound(d), rng),
        );
        let scale = 1.0 / (d * d) as f64;
        let mut spectral = |suffix: &str, rng: &mut R| {
            let r = Tensor::from_fn(&[modes, d, d], |_| scale * rng.random::<f64>());
            params.add(format!("{name}.{suffix}"), ParamKind::Fno, r)
        };
        let r_re = spectral("r_re", rng);
        let r_im = spectral("r_im", rng);
        FnoBlock {
            w_local,
            r_re,
            r_im,
            modes,
            d,
            act,
        }
    }

    /// `z: [B, T, d]`. Sequences shorter than the mode count use the
    /// leading `T/2 + 1` modes.
    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, TensorError> {
        let s = z.shape();
        if s.len() != 3 || s[2] != self.d {
            return Err(TensorError::Dimension {
                op: "fno",
                lhs: s,
                rhs: vec![self.d],
            });
        }
        let modes = self.modes.min(half_spectrum_len(s[1]));
        let (mut re, mut im) = (p.get(self.r_re), p.get(self.r_im));
        if modes < self.modes {
            re = re.narrow(0, 0, modes)?;
            im = im.narrow(0, 0, modes)?;
        }
        let local = z.matmul(p.get(self.w_local))?;
        Ok(self.act.apply(local.add(spectral_conv(z, re, im)?)?))
    }
}

/// Shared per-token head: sine layer, linear, activation, linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub inr: InrLayer,
    pub hidden: Linear,
    pub out: Linear,
    pub act: Activation,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        d: usize,
        n_out: usize,
        sine: bool,
        rng: &mut R,
    ) -> Decoder {
        let inr = if sine {
            siren_init(params, &format!("{name}.inr"), d, d, false, rng)
        } else {
            InrLayer::tanh(params, &format!("{name}.inr"), d, d, rng)
        };
        let hidden = Linear::plain(params, &format!("{name}.hidden"), d, d, rng);
        let out = Linear::plain(params, &format!("{name}.out"), d, n_out, rng);
        let act = if sine { Activation::Sine } else { Activation::Tanh };
        Decoder {
            inr,
            hidden,
            out,
            act,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>, TensorError> {
        let h = self.inr.forward(p, z)?;
        let h = self.act.apply(self.hidden.forward(p, h)?);
        self.out.forward(p, h)
    }
}
