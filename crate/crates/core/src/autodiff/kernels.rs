//! Raw loops shared by the forward and backward passes.

/// Numpy-style broadcast of two shapes, aligned on trailing axes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source in `inp`.
pub(crate) fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for k in (0..inp.len()).rev() {
        if inp[k] != 1 {
            in_strides[k + offset] = stride;
        }
        stride *= inp[k];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for k in (0..rank).rev() {
            idx[k] += 1;
            pos += in_strides[k];
            if idx[k] < out[k] {
                break;
            }
            pos -= in_strides[k] * out[k];
            idx[k] = 0;
        }
    }
    map
}

/// Source index lookup that skips the map when shapes already agree, the
/// input is a single element, or the input repeats as a trailing block.
pub(crate) enum Broadcast {
    Same,
    Scalar,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Broadcast::Same;
        }
        let len: usize = inp.iter().product();
        if len == 1 {
            return Broadcast::Scalar;
        }
        let trimmed: &[usize] = {
            let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
            &inp[first..]
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
            return Broadcast::Cycle(len);
        }
        Broadcast::Map(index_map(out, inp))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Cycle(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// `c += a @ b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `ga += g @ bᵀ` with `g: m×n`, `b: k×n`, `ga: m×k`.
pub(crate) fn matmul_acc_bt(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            ga[i * k + p] += dot;
        }
    }
}

/// `gb += aᵀ @ g` with `a: m×k`, `g: m×n`, `gb: k×n`.
pub(crate) fn matmul_acc_at(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (acc, gv) in gbrow.iter_mut().zip(grow) {
                *acc += av * gv;
            }
        }
    }
}

/// Decompose a shape around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[2]), Some(vec![2]));
    }

    #[test]
    fn index_map_column_broadcast() {
        // [2,1] -> [2,3]
        assert_eq!(index_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        // [3] -> [2,3]
        assert_eq!(index_map(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn broadcast_fast_paths_match_index_map() {
        for (out, inp) in [
            (vec![2, 3, 4], vec![4]),
            (vec![2, 3, 4], vec![1, 3, 4]),
            (vec![2, 3, 4], vec![1, 1]),
            (vec![2, 3, 4], vec![3, 1]),
            (vec![5, 1], vec![1]),
        ] {
            let b = Broadcast::new(&out, &inp);
            let map = index_map(&out, &inp);
            assert!((0..map.len()).all(|i| b.at(i) == map[i]), "{out:?} {inp:?}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
