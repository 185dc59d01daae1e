//! Planted per-pixel channel-mixing shift.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tsa_tensor::Tensor;

use super::{sample_episode, Dataset, Episode, Protocol, Split};
use crate::error::{Error, Result};

/// Largest condition number accepted for a mixing matrix.
pub const MAX_CONDITION: f64 = 100.0;

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(n: usize, a: &[f64]) -> Vec<f64> {
    let mut a = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Ratio of largest to smallest singular value of a square matrix;
/// infinite when singular or not square.
pub fn condition_number(m: &Tensor) -> f64 {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return f64::INFINITY;
    }
    let n = s[0];
    let d = m.data();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = (0..n).map(|k| d[k * n + i] * d[k * n + j]).sum();
        }
    }
    let eig = symmetric_eigenvalues(n, &gram);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let scale = hi.max(1e-300);
    if !(lo > 1e-14 * scale) {
        return f64::INFINITY;
    }
    (hi / lo).sqrt()
}

/// Applies `x -> M x` at every pixel of an `[N, C, H, W]` batch.
pub fn apply_channel_mix(images: &Tensor, m: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || m.shape() != [s[1], s[1]] {
        return Err(Error::config(format!(
            "mixing matrix {:?} does not fit images {:?}",
            m.shape(),
            s
        )));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let src = images.data();
    let md = m.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        let base = b * c * plane;
        for co in 0..c {
            let dst = &mut out[base + co * plane..base + (co + 1) * plane];
            for ci in 0..c {
                let w = md[co * c + ci];
                if w == 0.0 {
                    continue;
                }
                let sp = &src[base + ci * plane..base + (ci + 1) * plane];
                for (o, &v) in dst.iter_mut().zip(sp) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

/// A random orthogonal color rotation (possibly with reflection) times a
/// diagonal scaling in `[0.5, 2]`; condition number at most 4.
pub fn random_mixing_matrix(channels: usize, rng: &mut impl Rng) -> Tensor {
    loop {
        let g: Vec<f64> = (0..channels * channels).map(|_| StandardNormal.sample(rng)).collect();
        // Gram-Schmidt over rows
        let mut q = g.clone();
        let mut ok = true;
        for i in 0..channels {
            for j in 0..i {
                let dot: f64 = (0..channels).map(|k| q[i * channels + k] * q[j * channels + k]).sum();
                for k in 0..channels {
                    q[i * channels + k] -= dot * q[j * channels + k];
                }
            }
            let norm = (0..channels).map(|k| q[i * channels + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for k in 0..channels {
                q[i * channels + k] /= norm;
            }
        }
        if !ok {
            continue;
        }
        for i in 0..channels {
            let s = rng.gen_range(0.5..2.0);
            for k in 0..channels {
                q[i * channels + k] *= s;
            }
        }
        let m = Tensor::new([channels, channels], q).expect("square");
        if condition_number(&m) < MAX_CONDITION {
            return m;
        }
    }
}

/// A quarter-turn rotation in the plane spanned by the luminance direction
/// `(1, .., 1)/sqrt(C)` and a uniformly random unit chroma direction
/// orthogonal to it, scaled by `scale`. Intensity moves into a color
/// contrast and back with a sign flip, so features tuned to luminance see a
/// large shift while `M` stays orthogonal (condition number 1).
pub fn luminance_swap_matrix(channels: usize, scale: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if channels < 2 {
        return Err(Error::config("luminance swap needs at least 2 channels"));
    }
    if !(scale.is_finite() && scale != 0.0) {
        return Err(Error::config(format!("luminance swap scale must be finite and nonzero, got {scale}")));
    }
    let u = vec![1.0 / (channels as f64).sqrt(); channels];
    let w = loop {
        let g: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
        let dot: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
        let r: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break r.into_iter().map(|v| v / norm).collect::<Vec<_>>();
        }
    };
    let mut m = vec![0.0; channels * channels];
    for i in 0..channels {
        for j in 0..channels {
            let eye = if i == j { 1.0 } else { 0.0 };
            m[i * channels + j] = scale * (eye - u[i] * u[j] - w[i] * w[j] + w[i] * u[j] - u[i] * w[j]);
        }
    }
    Ok(Tensor::new([channels, channels], m)?)
}

/// Samples an episode and plants the shift `M` on its support and query
/// images. The underlying sample is exactly what [`sample_episode`] returns
/// for the same rng state.
pub fn make_channel_shift_episode(
    dataset: &Dataset,
    split: Split,
    m: &Tensor,
    protocol: Protocol,
    rng: &mut impl Rng,
    episode_index: u64,
) -> Result<Episode> {
    let cond = condition_number(m);
    if !(cond < MAX_CONDITION) {
        return Err(Error::config(format!(
            "mixing matrix condition number {cond:.3e} is not below {MAX_CONDITION}"
        )));
    }
    let mut ep = sample_episode(dataset, split, protocol, rng, episode_index)?;
    ep.support = apply_channel_mix(&ep.support, m)?;
    ep.query = apply_channel_mix(&ep.query, m)?;
    Ok(ep)
}
