//! Row-wise building blocks on flat `rows × width` buffers.

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalized rows plus per-row inverse std, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    width: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / width;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_w = T::one() / T::of(width as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (row[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gain[c] + bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Accumulates gain/bias gradients and returns the input gradient.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    width: usize,
    gain: &[T],
    cache: &LnCache<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let rows = dy.len() / width;
    let mut dx = vec![T::zero(); dy.len()];
    let inv_w = T::one() / T::of(width as f64);
    let mut dxhat = vec![T::zero(); width];
    for r in 0..rows {
        let dyr = &dy[r * width..(r + 1) * width];
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let (mut mean_d, mut mean_dx) = (T::zero(), T::zero());
        for c in 0..width {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d *= inv_w;
        mean_dx *= inv_w;
        let rs = cache.rstd[r];
        for c in 0..width {
            dx[r * width + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// `sigmoid(2z)`, which equals `(1 + tanh z) / 2`.
#[inline]
fn gelu_gate<T: Scalar>(u: T) -> T {
    let z = T::of(GELU_C) * (u + T::of(GELU_K) * u * u * u);
    T::one() / (T::one() + (-(z + z)).exp())
}

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    u * gelu_gate(u)
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let s = gelu_gate(u);
    let dz = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * u * u);
    s + T::of(2.0) * u * s * (T::one() - s) * dz
}

/// Causal multi-head attention over one sequence. `q`, `k`, `v` are `t × d`; returns the
/// concatenated head outputs (`t × d`) and the attention probabilities (`heads × t × t`,
/// zero above the diagonal).
pub(crate) fn causal_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); t * d];
    let mut probs = vec![T::zero(); heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let qi = &q[i * d + off..i * d + off + dh];
            let prow = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let mut mx = T::neg_infinity();
            for j in 0..=i {
                let s = crate::linalg::kernels::dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                prow[j] = s;
                mx = mx.max(s);
            }
            let mut z = T::zero();
            for p in prow[..=i].iter_mut() {
                *p = (*p - mx).exp();
                z += *p;
            }
            let inv = T::one() / z;
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..=i {
                prow[j] *= inv;
                let pj = prow[j];
                for (o, &vv) in orow.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`causal_attention`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn causal_attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); t * d];
    let mut dk = vec![T::zero(); t * d];
    let mut dv = vec![T::zero(); t * d];
    let mut dp = vec![T::zero(); t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let prow = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &dout[i * d + off..i * d + off + dh];
            let mut dot_pd = T::zero();
            for j in 0..=i {
                dp[j] = crate::linalg::kernels::dot(doi, &v[j * d + off..j * d + off + dh]);
                dot_pd += prow[j] * dp[j];
                let pj = prow[j];
                for (g, &o) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                    *g += pj * o;
                }
            }
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot_pd) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -80..=80 {
            let u = i as f64 * 0.1;
            let t = 0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh());
            assert!((gelu(u) - t).abs() < 1e-15 * (1.0 + u.abs()), "{u}");
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((gelu_grad(u) - fd).abs() < 1e-8, "{u}");
        }
        assert_eq!(gelu(-1e4_f64), 0.0);
        assert_eq!(gelu(1e4_f64), 1e4);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax_row(&[1000.0_f64, 1001.0, 999.0]);
        let total: f64 = lp.iter().map(|x: &f64| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
