//! Raw kernels over row-major slices: broadcasting and GEMM.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::scalar::Scalar;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps kernel parallelism. `1` keeps every kernel on the calling thread.
///
/// Kernels split work by output row only, so results are bit-identical for
/// any thread count.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

const PAR_MIN_WORK: usize = 1 << 16;

fn parallel(work: usize) -> bool {
    threads() > 1 && work >= PAR_MIN_WORK
}

/// Standard trailing-dimension broadcast of two shapes.
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

/// How an input of `in_shape` is addressed when broadcast to `out_shape`.
pub enum Layout {
    Same,
    /// Input repeats with period `len` along the flat output.
    Suffix(usize),
    Offsets(Vec<usize>),
}

impl Layout {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        if in_shape == out_shape {
            return Layout::Same;
        }
        let trimmed: Vec<usize> = in_shape
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        if trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed) {
            return Layout::Suffix(trimmed.iter().product());
        }
        Layout::Offsets(offsets(in_shape, out_shape))
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Layout::Same => i,
            Layout::Suffix(len) => i % len,
            Layout::Offsets(v) => v[i],
        }
    }
}

fn offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped like the broadcast output) back onto `in_len` slots.
/// `f(a[la(i)], b[lb(i)])` for `i in 0..n`, with fast paths for contiguous layouts.
pub fn binary_map<S: Scalar>(a: &[S], la: &Layout, b: &[S], lb: &Layout, n: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut out = Vec::with_capacity(n);
    match (la, lb) {
        (Layout::Same, Layout::Same) => out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y))),
        (Layout::Same, Layout::Suffix(len)) => {
            for chunk in a.chunks(*len) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        }
        (Layout::Suffix(len), Layout::Same) => {
            for chunk in b.chunks(*len) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        _ => out.extend((0..n).map(|i| f(a[la.at(i)], b[lb.at(i)]))),
    }
    out
}

pub fn reduce_into<S: Scalar>(grad: &[S], layout: &Layout, acc: &mut [S]) {
    match layout {
        Layout::Same => {
            for (a, &g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        Layout::Suffix(len) => {
            for chunk in grad.chunks(*len) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
        }
        Layout::Offsets(v) => {
            for (&o, &g) in v.iter().zip(grad) {
                acc[o] += g;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |(i, c_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |(i, c_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *cj += s;
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |(i, c_row): (usize, &mut [S])| {
        for p in 0..k {
            let api = a[p * m + i];
            if api == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    };
    if parallel(m * k * n) {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn offsets_match_manual_indexing() {
        let out = [2, 3, 4];
        let layout = Layout::new(&[3, 1], &out);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(layout.at(i * 12 + j * 4 + k), j);
                }
            }
        }
        let layout = Layout::new(&[1, 4], &out);
        assert!(matches!(layout, Layout::Suffix(4)));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [0.5, 7.0, 2.0, 16.0]);
        // bᵀ stored as 2x3
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }
}
