//! Dense kernels with hand-written backward passes. Matrices are row-major.

use super::Scalar;

#[inline]
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from(x).expect("representable constant")
}

/// `c = [c +] op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// With `a_t`, `a` is stored `k x m`; with `b_t`, `b` is stored `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "matmul operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// `y = x w + b` with `w` stored `d_in x d_out`.
pub(crate) fn linear<T: Scalar>(x: &[T], rows: usize, d_in: usize, w: &[T], b: &[T], d_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d_out];
    for row in y.chunks_exact_mut(d_out) {
        row.copy_from_slice(b);
    }
    matmul(rows, d_in, d_out, x, false, w, false, &mut y, true);
    y
}

/// Accumulates parameter gradients of [`linear`] and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    d_in: usize,
    w: &[T],
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    matmul(d_in, rows, d_out, x, true, dy, false, dw, true);
    for row in dy.chunks_exact(d_out) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        matmul(rows, d_out, d_in, dy, false, w, true, dx, true);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormOut<T> {
    pub out: Vec<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm<T: Scalar>(x: &[T], d: usize, gain: &[T], bias: &[T]) -> LayerNormOut<T> {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = cast::<T>(1.0 / d as f64);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_d;
        let r = T::one() / (var + cast(LN_EPS)).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - m) * r * gain[i] + bias[i];
        }
        mean.push(m);
        rstd.push(r);
    }
    LayerNormOut { out, mean, rstd }
}

/// Accumulates into `dx`, `dgain` and `dbias`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cache: &LayerNormOut<T>,
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let inv_d = cast::<T>(1.0 / d as f64);
    for (r, ((dyr, xr), dxr)) in dy.chunks_exact(d).zip(x.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
        let (m, rs) = (cache.mean[r], cache.rstd[r]);
        let mut sum_dn = T::zero();
        let mut sum_dn_n = T::zero();
        for i in 0..d {
            let n = (xr[i] - m) * rs;
            let dn = dyr[i] * gain[i];
            dgain[i] += dyr[i] * n;
            dbias[i] += dyr[i];
            sum_dn += dn;
            sum_dn_n += dn * n;
        }
        for i in 0..d {
            let n = (xr[i] - m) * rs;
            let dn = dyr[i] * gain[i];
            dxr[i] += rs * (dn - inv_d * sum_dn - n * inv_d * sum_dn_n);
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu<T: Scalar>(x: &[T]) -> Vec<T> {
    let (s, c, half) = (cast::<T>(GELU_SCALE), cast::<T>(0.044715), cast::<T>(0.5));
    x.iter()
        .map(|&v| half * v * (T::one() + (s * (v + c * v * v * v)).tanh()))
        .collect()
}

/// `dx = dy * gelu'(x)`, overwriting `dy`.
pub(crate) fn gelu_backward_inplace<T: Scalar>(dy: &mut [T], x: &[T]) {
    let (s, c, half) = (cast::<T>(GELU_SCALE), cast::<T>(0.044715), cast::<T>(0.5));
    let three = cast::<T>(3.0);
    for (g, &v) in dy.iter_mut().zip(x) {
        let inner = s * (v + c * v * v * v);
        let t = inner.tanh();
        let sech2 = T::one() - t * t;
        let local = half * (T::one() + t) + half * v * sech2 * s * (T::one() + three * c * v * v);
        *g *= local;
    }
}

/// One group of query rows attending to one group of key rows.
#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    pub q_start: usize,
    pub n_q: usize,
    pub kv_start: usize,
    pub n_kv: usize,
    /// `n_q x n_kv` visibility.
    pub mask: Vec<bool>,
    pub prob_start: usize,
}

impl AttnBlock {
    pub fn prob_len(&self, heads: usize) -> usize {
        heads * self.n_q * self.n_kv
    }
}

/// Masked multi-head scaled dot-product attention. Rows with no visible key
/// produce zeros.
pub(crate) fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    blocks: &[AttnBlock],
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = d / heads;
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let mut scores = Vec::new();
    for blk in blocks {
        scores.resize(blk.n_kv, T::zero());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..blk.n_q {
                let qrow = &q[(blk.q_start + i) * d + off..][..dh];
                let mrow = &blk.mask[i * blk.n_kv..(i + 1) * blk.n_kv];
                let prow = &mut probs[blk.prob_start + (h * blk.n_q + i) * blk.n_kv..][..blk.n_kv];
                let mut max = T::neg_infinity();
                for j in 0..blk.n_kv {
                    if mrow[j] {
                        let krow = &k[(blk.kv_start + j) * d + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let orow = &mut out[(blk.q_start + i) * d + off..][..dh];
                orow.iter_mut().for_each(|x| *x = T::zero());
                if max == T::neg_infinity() {
                    prow.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..blk.n_kv {
                    prow[j] = if mrow[j] {
                        let e = (scores[j] - max).exp();
                        sum += e;
                        e
                    } else {
                        T::zero()
                    };
                }
                let inv = T::one() / sum;
                for j in 0..blk.n_kv {
                    if mrow[j] {
                        prow[j] *= inv;
                        let p = prow[j];
                        let vrow = &v[(blk.kv_start + j) * d + off..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `dq`, `dk`, `dv` from `dout`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: usize,
    heads: usize,
    blocks: &[AttnBlock],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / heads;
    let scale = cast::<T>(1.0 / (dh as f64).sqrt());
    let mut dp = Vec::new();
    for blk in blocks {
        dp.resize(blk.n_kv, T::zero());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..blk.n_q {
                let prow = &probs[blk.prob_start + (h * blk.n_q + i) * blk.n_kv..][..blk.n_kv];
                let mrow = &blk.mask[i * blk.n_kv..(i + 1) * blk.n_kv];
                let qi = (blk.q_start + i) * d + off;
                let dorow = &dout[qi..qi + dh];
                let mut weighted = T::zero();
                for j in 0..blk.n_kv {
                    if mrow[j] && prow[j] != T::zero() {
                        let kj = (blk.kv_start + j) * d + off;
                        dp[j] = dot(dorow, &v[kj..kj + dh]);
                        weighted += prow[j] * dp[j];
                        for (g, &x) in dv[kj..kj + dh].iter_mut().zip(dorow) {
                            *g += prow[j] * x;
                        }
                    }
                }
                for j in 0..blk.n_kv {
                    if mrow[j] && prow[j] != T::zero() {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        let kj = (blk.kv_start + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] += ds * k[kj + t];
                            dk[kj + t] += ds * q[qi + t];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Scalar>(logits: &[T], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(width) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64().unwrap()));
        let lse = max + row.iter().map(|&x| (x.to_f64().unwrap() - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&x| x.to_f64().unwrap() - lse));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        matmul(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [1.0f64; 4];
        matmul(2, 3, 2, &at, true, &bt, true, &mut c2, true);
        assert_eq!(c2, [59.0, 65.0, 140.0, 155.0]);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        let xs = [-3.0, -1.2, -0.1, 0.0, 0.4, 2.5];
        let mut g = vec![1.0f64; xs.len()];
        gelu_backward_inplace(&mut g, &xs);
        for (i, &x) in xs.iter().enumerate() {
            let h = 1e-6;
            let fd = (gelu(&[x + h])[0] - gelu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = [1.0f64, 2.0];
        let kv = [0.5f64, -1.0, 3.0, 4.0];
        let blk = AttnBlock { q_start: 0, n_q: 1, kv_start: 0, n_kv: 2, mask: vec![false, false], prob_start: 0 };
        let mut probs = [9.0; 2];
        let mut out = [9.0; 2];
        attention(&q, &kv, &kv, 2, 1, &[blk], &mut probs, &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(probs, [0.0, 0.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let out = log_softmax(&[1.0f32, 2.0, 3.0, 0.0, 0.0, 0.0], 3);
        for row in out.chunks(3) {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((out[3] + 3f64.ln()).abs() < 1e-12);
    }
}
