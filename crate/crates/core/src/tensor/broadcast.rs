/// Numpy-style broadcast of two shapes, `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps each element of a broadcast output back to the source element it reads.
#[derive(Debug, Clone)]
pub(crate) enum IndexMap {
    Identity,
    /// Source is a trailing block repeated over leading axes.
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    pub(crate) fn new(out: &[usize], src: &[usize]) -> IndexMap {
        let src_numel: usize = src.iter().product();
        let out_numel: usize = out.iter().product();
        if src_numel == out_numel {
            return IndexMap::Identity;
        }
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return IndexMap::Modulo(src_numel.max(1));
        }
        IndexMap::Table(offsets(out, src))
    }

    /// Gathers `src` into the broadcast output layout.
    pub(crate) fn gather(&self, src: &[f64], out_numel: usize) -> Vec<f64> {
        match self {
            IndexMap::Identity => src.to_vec(),
            IndexMap::Modulo(n) => (0..out_numel).map(|i| src[i % n]).collect(),
            IndexMap::Table(t) => t.iter().map(|&j| src[j]).collect(),
        }
    }

    /// Sums values laid out like the broadcast output back into the source layout.
    pub(crate) fn reduce(&self, grad: &[f64], src_numel: usize) -> Vec<f64> {
        match self {
            IndexMap::Identity => grad.to_vec(),
            IndexMap::Modulo(n) => {
                let mut out = vec![0.0; src_numel];
                for chunk in grad.chunks(*n) {
                    for (o, g) in out.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
                out
            }
            IndexMap::Table(t) => {
                let mut out = vec![0.0; src_numel];
                for (g, &j) in grad.iter().zip(t) {
                    out[j] += g;
                }
                out
            }
        }
    }
}

/// Source offset for every output element when `src` is broadcast to `out`.
pub(crate) fn offsets(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[pad + i] = s;
        }
        s *= src[i];
    }
    let n: usize = out.iter().product();
    let mut res = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        res.push(off);
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
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_broadcast_like_numpy() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[7]), Some(vec![7]));
    }

    #[test]
    fn table_offsets_match_manual_indexing() {
        // src [2,1,3] broadcast to [2,4,3]
        let t = offsets(&[2, 4, 3], &[2, 1, 3]);
        for a in 0..2 {
            for b in 0..4 {
                for c in 0..3 {
                    assert_eq!(t[a * 12 + b * 3 + c], a * 3 + c);
                }
            }
        }
    }

    #[test]
    fn modulo_used_for_trailing_blocks() {
        assert!(matches!(IndexMap::new(&[5, 2, 3], &[1, 3]), IndexMap::Modulo(3)));
        assert!(matches!(IndexMap::new(&[5, 2, 3], &[2, 1]), IndexMap::Table(_)));
    }
}
