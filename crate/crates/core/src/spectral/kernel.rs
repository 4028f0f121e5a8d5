//! Naive matrix DFT along one axis of a `[outer, n, inner]` layout.
//!
//! Twiddles are indexed by `(f * t) mod n` so every angle is reduced before
//! the trig call.

use std::f64::consts::TAU;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Part {
    Re,
    Im,
}

struct Twiddles {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(n: usize) -> Self {
        let angle = |j: usize| TAU * j as f64 / n as f64;
        Twiddles {
            n,
            cos: (0..n).map(|j| angle(j).cos()).collect(),
            sin: (0..n).map(|j| angle(j).sin()).collect(),
        }
    }

    fn cos(&self, f: usize, t: usize) -> f64 {
        self.cos[(f * t) % self.n]
    }

    fn sin(&self, f: usize, t: usize) -> f64 {
        self.sin[(f * t) % self.n]
    }
}

/// Weight of bin `f` when folding a half spectrum back into `n` samples.
fn fold_weight(f: usize, n: usize) -> f64 {
    if f == 0 || (n % 2 == 0 && f == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// `X[f] = sum_t x[t] e^{-2 pi i f t / n}` for `f < bins`.
pub(crate) fn forward(
    x: &[f64],
    outer: usize,
    n: usize,
    bins: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>) {
    let tw = Twiddles::new(n);
    let mut re = vec![0.0; outer * bins * inner];
    let mut im = vec![0.0; outer * bins * inner];
    for o in 0..outer {
        for f in 0..bins {
            let dst = (o * bins + f) * inner;
            for t in 0..n {
                let (c, s) = (tw.cos(f, t), tw.sin(f, t));
                let src = &x[(o * n + t) * inner..(o * n + t + 1) * inner];
                for i in 0..inner {
                    re[dst + i] += c * src[i];
                    im[dst + i] -= s * src[i];
                }
            }
        }
    }
    (re, im)
}

/// Adjoint of one output part of [`forward`].
pub(crate) fn forward_adjoint(
    g: &[f64],
    part: Part,
    outer: usize,
    n: usize,
    bins: usize,
    inner: usize,
) -> Vec<f64> {
    let tw = Twiddles::new(n);
    let mut gx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for t in 0..n {
            let dst = (o * n + t) * inner;
            for f in 0..bins {
                let w = match part {
                    Part::Re => tw.cos(f, t),
                    Part::Im => -tw.sin(f, t),
                };
                let src = &g[(o * bins + f) * inner..(o * bins + f + 1) * inner];
                for i in 0..inner {
                    gx[dst + i] += w * src[i];
                }
            }
        }
    }
    gx
}

/// Real signal of length `n` from its first `bins` half-spectrum bins,
/// scaled by `1/n`; missing bins are zero.
pub(crate) fn inverse(
    re: &[f64],
    im: &[f64],
    outer: usize,
    n: usize,
    bins: usize,
    inner: usize,
) -> Vec<f64> {
    let tw = Twiddles::new(n);
    let mut x = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for t in 0..n {
            let dst = (o * n + t) * inner;
            for f in 0..bins {
                let w = fold_weight(f, n) / n as f64;
                let (c, s) = (w * tw.cos(f, t), w * tw.sin(f, t));
                let src = (o * bins + f) * inner;
                for i in 0..inner {
                    x[dst + i] += c * re[src + i] - s * im[src + i];
                }
            }
        }
    }
    x
}

/// Adjoint of [`inverse`]: `(d/d re, d/d im)`.
pub(crate) fn inverse_adjoint(
    g: &[f64],
    outer: usize,
    n: usize,
    bins: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>) {
    let tw = Twiddles::new(n);
    let mut gre = vec![0.0; outer * bins * inner];
    let mut gim = vec![0.0; outer * bins * inner];
    for o in 0..outer {
        for f in 0..bins {
            let w = fold_weight(f, n) / n as f64;
            let dst = (o * bins + f) * inner;
            for t in 0..n {
                let (c, s) = (w * tw.cos(f, t), w * tw.sin(f, t));
                let src = &g[(o * n + t) * inner..(o * n + t + 1) * inner];
                for i in 0..inner {
                    gre[dst + i] += c * src[i];
                    gim[dst + i] -= s * src[i];
                }
            }
        }
    }
    (gre, gim)
}
