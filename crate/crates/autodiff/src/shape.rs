//! Shape arithmetic shared by the tape primitives.

use crate::error::{Result, TensorError};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Same-rank broadcasting: each axis must match or be 1 on one side.
pub(crate) fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(err());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(err()),
        })
        .collect()
}

/// For every flat index of `out`, the flat index into an operand of shape
/// `operand` broadcast to `out`.
pub(crate) fn broadcast_map(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if operand == out {
        return (0..n).collect();
    }
    let ostr = strides(operand);
    let eff: Vec<usize> = operand
        .iter()
        .zip(&ostr)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_singletons() {
        assert_eq!(broadcast("t", &[2, 1, 3], &[1, 4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast("t", &[2, 3], &[3, 2]).is_err());
        assert!(broadcast("t", &[3], &[1, 3]).is_err());
    }

    #[test]
    fn map_repeats_singleton_axes() {
        assert_eq!(broadcast_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_map(&[1, 3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[1, 1], &[2, 2]), vec![0; 4]);
    }
}
