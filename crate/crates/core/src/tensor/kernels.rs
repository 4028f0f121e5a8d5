//! Dense kernels shared by forward and backward passes.

use super::shape::broadcast_shape;
use super::TensorError;

/// `c = a * b + beta * c` for row/column-strided operands; `c` is
/// row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch layout of `a[.., m, p] x b[.., p, n]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub p: usize,
    pub n: usize,
    /// Per output batch: (a matrix index, b matrix index).
    pub pairs: Vec<(usize, usize)>,
    /// `b` is a single matrix, so `a` can be flattened into one gemm.
    pub b_shared: bool,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self, TensorError> {
        let err = || TensorError::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
        let (p2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if p != p2 {
            return Err(err());
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| err())?;
        let total: usize = batch.iter().product();
        let a_idx = batch_indices(a_batch, &batch);
        let b_idx = batch_indices(b_batch, &batch);
        let pairs = (0..total).map(|i| (a_idx[i], b_idx[i])).collect();
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            out_shape,
            m,
            p,
            n,
            pairs,
            b_shared: b_batch.iter().product::<usize>() == 1 && a_batch.len() >= b_batch.len(),
        })
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, p, n) = (self.m, self.p, self.n);
        let mut out = vec![0.0; self.pairs.len() * m * n];
        if self.b_shared {
            let rows = self.pairs.len() * m;
            gemm(rows, p, n, a, (p, 1), b, (n, 1), 0.0, &mut out);
            return out;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                m,
                p,
                n,
                &a[ia * m * p..],
                (p, 1),
                &b[ib * p * n..],
                (n, 1),
                0.0,
                &mut out[bi * m * n..],
            );
        }
        out
    }

    /// Gradient w.r.t. `a`: `dC * B^T`, summed over broadcast batches.
    pub fn grad_a(&self, g: &[f64], b: &[f64], a_len: usize) -> Vec<f64> {
        let (m, p, n) = (self.m, self.p, self.n);
        let mut ga = vec![0.0; a_len];
        if self.b_shared {
            let rows = self.pairs.len() * m;
            gemm(rows, n, p, g, (n, 1), b, (1, n), 0.0, &mut ga);
            return ga;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                m,
                n,
                p,
                &g[bi * m * n..],
                (n, 1),
                &b[ib * p * n..],
                (1, n),
                1.0,
                &mut ga[ia * m * p..],
            );
        }
        ga
    }

    /// Gradient w.r.t. `b`: `A^T * dC`, summed over broadcast batches.
    pub fn grad_b(&self, g: &[f64], a: &[f64], b_len: usize) -> Vec<f64> {
        let (m, p, n) = (self.m, self.p, self.n);
        let mut gb = vec![0.0; b_len];
        if self.b_shared {
            let rows = self.pairs.len() * m;
            gemm(p, rows, n, a, (1, p), g, (n, 1), 0.0, &mut gb);
            return gb;
        }
        for (bi, &(ia, ib)) in self.pairs.iter().enumerate() {
            gemm(
                p,
                m,
                n,
                &a[ia * m * p..],
                (1, p),
                &g[bi * m * n..],
                (n, 1),
                1.0,
                &mut gb[ib * p * n..],
            );
        }
        gb
    }
}

/// Flat matrix index of each output batch element inside an operand batch.
fn batch_indices(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    let mut idx = vec![0; out.len()];
    let mut res = Vec::with_capacity(total);
    for _ in 0..total {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}

/// Exact GELU, `x * Phi(x)`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
