use crate::{Result, TensorError};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside the broadcast `out` shape: 0 on broadcast axes.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len()).map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] }).collect()
}

/// Visit every multi-index of `shape` in row-major order, calling `f` with the
/// flat offsets produced by each stride set.
pub fn for_each_offset2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let outer = n / inner;
    for _ in 0..outer {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(pa, pb);
            pa += ia;
            pb += ib;
        }
        // advance the outer odometer
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Sum `src` (with shape `from`) down to `to`, where `to` broadcasts to `from`.
pub fn reduce_to<E: crate::Element>(src: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return src.to_vec();
    }
    let mut out = vec![E::zero(); numel(to)];
    let s_src = contiguous_strides(from);
    let s_dst = broadcast_strides(to, from);
    for_each_offset2(from, &s_src, &s_dst, |i, j| out[j] = out[j] + src[i]);
    out
}

/// Expand `src` (shape `from`, broadcastable to `to`) into a full `to`-shaped buffer.
pub fn expand_to<E: crate::Element>(src: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(numel(to));
    let s_src = broadcast_strides(from, to);
    let s_dst = contiguous_strides(to);
    for_each_offset2(to, &s_src, &s_dst, |i, _| out.push(src[i]));
    out
}

/// Resolve a possibly negative axis.
pub fn axis(rank: usize, dim: isize) -> Result<usize> {
    let d = if dim < 0 { rank as isize + dim } else { dim };
    if d < 0 || d as usize >= rank {
        return Err(TensorError::Invalid(format!("axis {dim} out of range for rank {rank}")));
    }
    Ok(d as usize)
}
