//! Trailing-dimension broadcasting.
//!
//! Shapes are right-aligned; a dimension of size 1 (or a missing leading
//! dimension) stretches to match the other operand.

use super::{Tensor, TensorError};

pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Dimension {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside the broadcast `out` shape; stretched
/// dimensions get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How `shape` maps into a broadcast output.
enum Mapping {
    Same,
    /// The operand repeats with period `n` over the flat output.
    Repeat(usize),
    General(Vec<usize>),
}

fn mapping(shape: &[usize], out: &[usize]) -> Mapping {
    let n: usize = shape.iter().product();
    let total: usize = out.iter().product();
    if n == total {
        return Mapping::Same;
    }
    // A suffix match (after leading 1s) repeats contiguously.
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Mapping::Repeat(n.max(1));
    }
    Mapping::General(broadcast_strides(shape, out))
}

/// Visits every flat output index together with the flat source offset.
fn for_each_offset(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Expands `t` to `out` (which must be a valid broadcast target).
pub(crate) fn expand(t: &Tensor, out: &[usize]) -> Vec<f64> {
    let total: usize = out.iter().product();
    match mapping(t.shape(), out) {
        Mapping::Same => t.data().to_vec(),
        Mapping::Repeat(n) => (0..total).map(|i| t.data()[i % n]).collect(),
        Mapping::General(strides) => {
            let mut v = vec![0.0; total];
            for_each_offset(out, &strides, |flat, off| v[flat] = t.data()[off]);
            v
        }
    }
}

pub(crate) fn binary_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, TensorError> {
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let total: usize = out.iter().product();
    let data = if a.shape() == out.as_slice() && b.shape() == out.as_slice() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == out.as_slice() {
        match mapping(b.shape(), &out) {
            Mapping::Repeat(n) => (0..total).map(|i| f(a.data()[i], b.data()[i % n])).collect(),
            _ => {
                let bx = expand(b, &out);
                a.data().iter().zip(&bx).map(|(&x, &y)| f(x, y)).collect()
            }
        }
    } else if b.shape() == out.as_slice() {
        match mapping(a.shape(), &out) {
            Mapping::Repeat(n) => (0..total).map(|i| f(a.data()[i % n], b.data()[i])).collect(),
            _ => {
                let ax = expand(a, &out);
                ax.iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            }
        }
    } else {
        let ax = expand(a, &out);
        let bx = expand(b, &out);
        ax.iter().zip(&bx).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor::new(&out, data)
}

/// Sums a gradient of the broadcast shape `out` back down to `target`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    let n: usize = target.iter().product();
    match mapping(target, out) {
        Mapping::Same => grad.to_vec(),
        Mapping::Repeat(period) => {
            let mut acc = vec![0.0; n];
            for chunk in grad.chunks(period) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        Mapping::General(strides) => {
            let mut acc = vec![0.0; n];
            for_each_offset(out, &strides, |flat, off| acc[off] += grad[flat]);
            acc
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_alignment() {
        assert_eq!(broadcast_shape("t", &[4, 3, 2], &[2]).unwrap(), vec![4, 3, 2]);
        assert_eq!(broadcast_shape("t", &[4, 1, 2], &[3, 2]).unwrap(), vec![4, 3, 2]);
        assert!(broadcast_shape("t", &[4, 3], &[4]).is_err());
    }

    #[test]
    fn general_expand_matches_manual() {
        let b = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let out = expand(&b, &[2, 2, 3]);
        assert_eq!(out, vec![0., 1., 2., 0., 1., 2., 3., 4., 5., 3., 4., 5.]);
    }

    #[test]
    fn reduce_to_inverts_expand_counts() {
        let g = vec![1.0; 12];
        assert_eq!(reduce_to(&g, &[2, 2, 3], &[2, 1, 3]), vec![2.0; 6]);
        assert_eq!(reduce_to(&g, &[2, 2, 3], &[3]), vec![4.0; 3]);
        assert_eq!(reduce_to(&g, &[2, 2, 3], &[2, 1, 1]), vec![6.0; 2]);
    }
}
