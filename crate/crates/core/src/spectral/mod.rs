//! Fourier transforms over the time axis and the truncated spectral
//! convolution used by the neural-operator layers.
//!
//! Conventions: the forward transform is un-normalized, the inverse carries
//! `1/T`. Real signals keep only the `T/2 + 1` non-redundant bins.

pub(crate) mod kernel;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Imaginary parts allowed on self-conjugate bins, relative to the largest
/// bin magnitude, before an inverse transform is rejected.
pub const HERMITIAN_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self, TensorError> {
        if re.shape() != im.shape() {
            return Err(TensorError::Dimension {
                op: "complex",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }
}

/// Number of non-redundant bins of a real signal of length `n`.
pub fn half_spectrum_len(n: usize) -> usize {
    n / 2 + 1
}

/// Forward real DFT along the last axis.
pub fn rdft(x: &Tensor) -> Result<ComplexTensor, TensorError> {
    let tape = Tape::new();
    let axis = last_axis("rdft", x)?;
    let (re, im) = tape.constant(x.clone()).rdft(axis)?;
    ComplexTensor::new((*re.value()).clone(), (*im.value()).clone())
}

/// Inverse of [`rdft`] back to `n` real samples along the last axis.
///
/// The DC bin (and the Nyquist bin for even `n`) of a real signal is real;
/// a spectrum violating that is rejected instead of silently projected.
pub fn irdft(spectrum: &ComplexTensor, n: usize) -> Result<Tensor, TensorError> {
    let axis = last_axis("irdft", &spectrum.re)?;
    let bins = spectrum.shape()[axis];
    if bins != half_spectrum_len(n) {
        return Err(TensorError::Contract(format!(
            "irdft: expected {} bins for length {n}, got {bins}",
            half_spectrum_len(n)
        )));
    }
    let scale = spectrum
        .re
        .data()
        .iter()
        .chain(spectrum.im.data())
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut self_conjugate = vec![0];
    if n % 2 == 0 {
        self_conjugate.push(n / 2);
    }
    for (row, chunk) in spectrum.im.data().chunks(bins).enumerate() {
        for &f in &self_conjugate {
            if chunk[f].abs() > HERMITIAN_TOL * scale {
                return Err(TensorError::Contract(format!(
                    "irdft: bin {f} of row {row} has imaginary part {:e}; not the spectrum of a real signal",
                    chunk[f]
                )));
            }
        }
    }
    let tape = Tape::new();
    let re = tape.constant(spectrum.re.clone());
    let im = tape.constant(spectrum.im.clone());
    let x = Var::irdft(re, im, axis, n)?;
    Ok((*x.value()).clone())
}

fn last_axis(op: &'static str, x: &Tensor) -> Result<usize, TensorError> {
    x.rank().checked_sub(1).ok_or(TensorError::InvalidAxis {
        op,
        axis: 0,
        shape: x.shape().to_vec(),
    })
}

/// Energy of a 1-D signal in time and frequency: `(sum x^2, (1/T) sum |X|^2)`
/// with the mirrored half of the spectrum counted.
pub fn parseval_check(x: &Tensor) -> Result<(f64, f64), TensorError> {
    let n = x.numel();
    let time: f64 = x.data().iter().map(|v| v * v).sum();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let spec = rdft(&x.clone().reshape(&[n])?)?;
    let freq: f64 = spec
        .re
        .data()
        .iter()
        .zip(spec.im.data())
        .enumerate()
        .map(|(f, (r, i))| {
            let w = if f == 0 || (n % 2 == 0 && f == n / 2) { 1.0 } else { 2.0 };
            w * (r * r + i * i)
        })
        .sum::<f64>()
        / n as f64;
    Ok((time, freq))
}

/// Learnable per-mode complex channel mixing, `[modes, d_out, d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralWeights {
    pub re: Tensor,
    pub im: Tensor,
}

impl SpectralWeights {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self, TensorError> {
        if re.shape() != im.shape() || re.rank() != 3 || re.shape()[1] != re.shape()[2] {
            return Err(TensorError::Dimension {
                op: "spectral weights",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(SpectralWeights { re, im })
    }

    pub fn modes(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[1]
    }

    /// Same weights restricted to the first `modes` frequencies.
    pub fn truncated(&self, modes: usize) -> SpectralWeights {
        SpectralWeights {
            re: self.re.slice_rows(0, modes),
            im: self.im.slice_rows(0, modes),
        }
    }
}

/// Spectral convolution of `z: [B, T, d]` along `T`.
///
/// Each retained mode `k` is multiplied by the complex matrix `R[k]`
/// (`out_l = sum_j R[k, l, j] Z[k, j]`); higher modes are dropped.
pub fn spectral_conv<'t>(
    z: Var<'t>,
    w_re: Var<'t>,
    w_im: Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let zs = z.shape();
    let ws = w_re.shape();
    if zs.len() != 3 || ws.len() != 3 || ws[1] != zs[2] || ws[2] != zs[2] || w_im.shape() != ws {
        return Err(TensorError::Dimension {
            op: "spectral_conv",
            lhs: zs,
            rhs: ws,
        });
    }
    let t = zs[1];
    let modes = ws[0];
    if modes > half_spectrum_len(t) {
        return Err(TensorError::Contract(format!(
            "spectral_conv keeps {modes} modes but length {t} has only {}",
            half_spectrum_len(t)
        )));
    }
    let (xr, xi) = z.rdft(1)?;
    let xr = xr.narrow(1, 0, modes)?.permute(&[1, 0, 2])?;
    let xi = xi.narrow(1, 0, modes)?.permute(&[1, 0, 2])?;
    let rr = w_re.transpose()?;
    let ri = w_im.transpose()?;
    let yr = xr.matmul(rr)?.sub(xi.matmul(ri)?)?;
    let yi = xr.matmul(ri)?.add(xi.matmul(rr)?)?;
    let yr = yr.permute(&[1, 0, 2])?;
    let yi = yi.permute(&[1, 0, 2])?;
    Var::irdft(yr, yi, 1, t)
}

/// Value-level [`spectral_conv`].
pub fn spectral_conv_value(z: &Tensor, w: &SpectralWeights) -> Result<Tensor, TensorError> {
    let tape = Tape::new();
    let out = spectral_conv(
        tape.constant(z.clone()),
        tape.constant(w.re.clone()),
        tape.constant(w.im.clone()),
    )?;
    Ok((*out.value()).clone())
}
