//! Dense kernels shared by forward and backward passes.

use crate::real::Real;

/// `c (m×n) = op(a) · op(b) + beta·c`, all row-major and contiguous.
///
/// With `ta`, `a` is stored k×m; with `tb`, `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths were checked above; strides describe those layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub len_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        len_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let padded = len_in + 2 * pad;
        if stride == 0 || kernel == 0 || padded < kernel {
            return None;
        }
        Some(ConvGeom {
            c_in,
            len_in,
            kernel,
            stride,
            pad,
            len_out: (padded - kernel) / stride + 1,
        })
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.len_in).then_some(pos as usize)
    }

    /// Unfolds one batch item (c_in × len_in) into (c_in·kernel) × len_out.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        for ci in 0..self.c_in {
            for k in 0..self.kernel {
                let row = &mut cols[(ci * self.kernel + k) * self.len_out..][..self.len_out];
                for (o, slot) in row.iter_mut().enumerate() {
                    *slot = match self.source(o, k) {
                        Some(p) => x[ci * self.len_in + p],
                        None => T::zero(),
                    };
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds columns into `dx`.
    pub fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        for ci in 0..self.c_in {
            for k in 0..self.kernel {
                let row = &cols[(ci * self.kernel + k) * self.len_out..][..self.len_out];
                for (o, &v) in row.iter().enumerate() {
                    if let Some(p) = self.source(o, k) {
                        dx[ci * self.len_in + p] += v;
                    }
                }
            }
        }
    }
}

/// Multi-head scaled dot-product attention over one batch item.
///
/// `qkv` is len × 3c (query | key | value). Writes len × c into `out` and the
/// per-head probabilities (heads × len × len) into `probs`.
pub(crate) fn attention_forward<T: Real>(
    qkv: &[T],
    len: usize,
    c: usize,
    heads: usize,
    out: &mut [T],
    probs: &mut [T],
) {
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let row = 3 * c;
    for h in 0..heads {
        let p = &mut probs[h * len * len..][..len * len];
        for i in 0..len {
            let q = &qkv[i * row + h * d..][..d];
            let pi = &mut p[i * len..][..len];
            let mut max = T::neg_infinity();
            for (j, s) in pi.iter_mut().enumerate() {
                let k = &qkv[j * row + c + h * d..][..d];
                let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut total = T::zero();
            for s in pi.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for s in pi.iter_mut() {
                *s /= total;
            }
            let o = &mut out[i * c + h * d..][..d];
            o.iter_mut().for_each(|v| *v = T::zero());
            for (j, &w) in pi.iter().enumerate() {
                let v = &qkv[j * row + 2 * c + h * d..][..d];
                for (acc, &vv) in o.iter_mut().zip(v) {
                    *acc += w * vv;
                }
            }
        }
    }
}

pub(crate) fn attention_backward<T: Real>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    len: usize,
    c: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let row = 3 * c;
    let mut dp = vec![T::zero(); len];
    for h in 0..heads {
        let p = &probs[h * len * len..][..len * len];
        for i in 0..len {
            let pi = &p[i * len..][..len];
            let doi = &dout[i * c + h * d..][..d];
            // dV_j += p_ij · dO_i ; dP_ij = dO_i · V_j
            for j in 0..len {
                let v = &qkv[j * row + 2 * c + h * d..][..d];
                dp[j] = doi.iter().zip(v).map(|(&a, &b)| a * b).sum();
                let dv = &mut dqkv[j * row + 2 * c + h * d..][..d];
                for (acc, &g) in dv.iter_mut().zip(doi) {
                    *acc += pi[j] * g;
                }
            }
            let inner: T = pi.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for j in 0..len {
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds == T::zero() {
                    continue;
                }
                for e in 0..d {
                    let qe = qkv[i * row + h * d + e];
                    let ke = qkv[j * row + c + h * d + e];
                    dqkv[i * row + h * d + e] += ds * ke;
                    dqkv[j * row + c + h * d + e] += ds * qe;
                }
            }
        }
    }
}
