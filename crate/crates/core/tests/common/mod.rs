//! Test-only oracles: naive loop kernels and finite differences. Nothing in
//! here calls into the optimized kernels it is used to check.
#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Sliding-window cross-correlation, stride 1, no padding.
pub fn naive_conv2d(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += x[((bi * cin + ci) * h + oy + ky) * w + ox + kx]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn naive_maxpool2(x: &[f64], [b, c, h, w]: [usize; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::new();
    for p in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x[p * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// `x [B, Nin] · wᵀ [Nin, Nout] + bias`.
pub fn naive_linear(x: &[f64], b: usize, nin: usize, w: &[f64], nout: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * nout];
    for r in 0..b {
        for o in 0..nout {
            let mut acc = bias[o];
            for i in 0..nin {
                acc += x[r * nin + i] * w[o * nin + i];
            }
            out[r * nout + o] = acc;
        }
    }
    out
}

/// Central difference of `f` along coordinate `idx` of `x`.
pub fn central_difference<T: Copy>(
    mut f: impl FnMut(&[T]) -> f64,
    x: &[T],
    idx: usize,
    h: f64,
    to: impl Fn(f64) -> T,
    from: impl Fn(T) -> f64,
) -> f64 {
    let mut xp = x.to_vec();
    xp[idx] = to(from(x[idx]) + h);
    let fp = f(&xp);
    xp[idx] = to(from(x[idx]) - h);
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol * scale, "index {i}: {x} vs {y}");
    }
}
