//! Fixed signal operators on 3-D grids: separable Gaussian blur (never
//! trainable), trilinear resampling (differentiable, align-corners), and
//! nearest-neighbor resampling for masks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::tape::{Accum, BackFn};
use crate::numcore::tensor::{Tensor, Track};

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => panic!("expected a [D,H,W] or [1,D,H,W] tensor, got {:?}", s),
    }
}

/// Normalized 1-D Gaussian kernel truncated at 3 sigma. `sigma == 0` gives
/// the identity kernel.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).floor() as i64;
    let mut k = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        k.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Blur one axis with zero padding; `stride_outer` iterates lines.
fn blur_axis(data: &mut Vec<f64>, extents: (usize, usize, usize), axis: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let (d, h, w) = extents;
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; data.len()];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let len = [d, h, w][axis] as i64;
    let lines: Vec<(usize, usize)> = match axis {
        0 => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
        1 => (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).collect(),
        _ => (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).collect(),
    };
    for (a, b) in lines {
        for i in 0..len {
            let mut acc = 0.0;
            for (ki, kw) in kernel.iter().enumerate() {
                let j = i + ki as i64 - radius;
                if j < 0 || j >= len {
                    continue; // zero padding
                }
                let src = match axis {
                    0 => idx(j as usize, a, b),
                    1 => idx(a, j as usize, b),
                    _ => idx(a, b, j as usize),
                };
                acc += kw * data[src];
            }
            let dst = match axis {
                0 => idx(i as usize, a, b),
                1 => idx(a, i as usize, b),
                _ => idx(a, b, i as usize),
            };
            out[dst] = acc;
        }
    }
    *data = out;
}

/// Separable 3-D Gaussian blur with per-axis sigma, zero padding, kernel
/// truncated at 3 sigma and normalized to unit sum. This operator is fixed
/// (non-trainable): tracked inputs are rejected.
pub fn gaussian_blur3d(vol: &Tensor, sigma: (f64, f64, f64)) -> Tensor {
    assert!(
        !vol.is_tracked(),
        "gaussian_blur3d is non-trainable; detach the input first"
    );
    let (d, h, w) = dims3(vol);
    let mut data = vol.data().to_vec();
    blur_axis(&mut data, (d, h, w), 0, &gaussian_kernel(sigma.0));
    blur_axis(&mut data, (d, h, w), 1, &gaussian_kernel(sigma.1));
    blur_axis(&mut data, (d, h, w), 2, &gaussian_kernel(sigma.2));
    Tensor::constant(vol.shape().to_vec(), data, vol.precision())
}

/// Per-axis interpolation stops under the align-corners convention:
/// `(i0, i1, fraction)` per target index.
fn axis_stops(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|t| {
            let pos = if dst > 1 {
                t as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                (src - 1) as f64 / 2.0
            };
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling to `target` extents, align-corners. Differentiable:
/// the adjoint scatter-adds the same interpolation weights.
pub fn resample_trilinear(vol: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    let (d, h, w) = dims3(vol);
    let (td, th, tw) = target;
    if td == 0 || th == 0 || tw == 0 {
        return Err(Error::Usage(format!(
            "resample_trilinear: zero-extent target {:?}",
            target
        )));
    }
    assert!(d >= 1 && h >= 1 && w >= 1, "source extents must be >= 1");
    let zs = axis_stops(d, td);
    let ys = axis_stops(h, th);
    let xs = axis_stops(w, tw);
    let mut data = vec![0.0; td * th * tw];
    let src = vol.data();
    let sidx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for (tz, &(z0, z1, fz)) in zs.iter().enumerate() {
        for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let c00 = src[sidx(z0, y0, x0)] * (1.0 - fx) + src[sidx(z0, y0, x1)] * fx;
                let c01 = src[sidx(z0, y1, x0)] * (1.0 - fx) + src[sidx(z0, y1, x1)] * fx;
                let c10 = src[sidx(z1, y0, x0)] * (1.0 - fx) + src[sidx(z1, y0, x1)] * fx;
                let c11 = src[sidx(z1, y1, x0)] * (1.0 - fx) + src[sidx(z1, y1, x1)] * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data[(tz * th + ty) * tw + tx] = c0 * (1.0 - fz) + c1 * fz;
            }
        }
    }
    let prec = vol.precision();
    let data = prec.quantize_vec(data);
    let out_shape = if vol.shape().len() == 4 {
        vec![1, td, th, tw]
    } else {
        vec![td, th, tw]
    };
    let Some(track) = &vol.track else {
        return Ok(Tensor::from_parts(out_shape, data, prec, None));
    };
    let tape = track.tape.clone();
    let vid = track.node;
    let n_in = vol.numel();
    let (zs, ys, xs) = (Arc::new(zs), Arc::new(ys), Arc::new(xs));
    let back: BackFn = Box::new(move |g: &[f64], acc: &mut Accum| {
        acc.add(vid, n_in, |slot| {
            for (tz, &(z0, z1, fz)) in zs.iter().enumerate() {
                for (ty, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (tx, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let go = g[(tz * th + ty) * tw + tx];
                        for (z, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                            if wz == 0.0 {
                                continue;
                            }
                            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                if wy == 0.0 {
                                    continue;
                                }
                                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    if wx == 0.0 {
                                        continue;
                                    }
                                    slot[(z * h + y) * w + x] += go * wz * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        });
    });
    let node = tape.push_node(data.len(), Some(back), false);
    Ok(Tensor::from_parts(
        out_shape,
        data,
        prec,
        Some(Track { tape, node }),
    ))
}

/// Nearest-neighbor resampling (align-corners); used for masks, never
/// trainable.
pub fn resample_nearest3d(vol: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    assert!(!vol.is_tracked(), "resample_nearest3d is non-trainable");
    let (d, h, w) = dims3(vol);
    let (td, th, tw) = target;
    if td == 0 || th == 0 || tw == 0 {
        return Err(Error::Usage(format!(
            "resample_nearest3d: zero-extent target {:?}",
            target
        )));
    }
    let pick = |src: usize, dst: usize, t: usize| -> usize {
        let pos = if dst > 1 {
            t as f64 * (src - 1) as f64 / (dst - 1) as f64
        } else {
            (src - 1) as f64 / 2.0
        };
        (pos.round() as usize).min(src - 1)
    };
    let mut data = vec![0.0; td * th * tw];
    for tz in 0..td {
        let z = pick(d, td, tz);
        for ty in 0..th {
            let y = pick(h, th, ty);
            for tx in 0..tw {
                let x = pick(w, tw, tx);
                data[(tz * th + ty) * tw + tx] = vol.data()[(z * h + y) * w + x];
            }
        }
    }
    let out_shape = if vol.shape().len() == 4 {
        vec![1, td, th, tw]
    } else {
        vec![td, th, tw]
    };
    Ok(Tensor::constant(out_shape, data, vol.precision()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Precision;
    use crate::numcore::{backward, sum_all, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn delta_volume(d: usize, h: usize, w: usize, at: (usize, usize, usize)) -> Tensor {
        let mut data = vec![0.0; d * h * w];
        data[(at.0 * h + at.1) * w + at.2] = 1.0;
        Tensor::constant(vec![d, h, w], data, Precision::F64)
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 5 * 6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = Tensor::constant(vec![4, 5, 6], data.clone(), Precision::F64);
        let b = gaussian_blur3d(&v, (0.0, 0.0, 0.0));
        assert_eq!(b.data(), data.as_slice());
    }

    #[test]
    fn blur_interior_delta_conserves_mass() {
        let v = delta_volume(9, 9, 9, (4, 4, 4));
        let b = gaussian_blur3d(&v, (1.0, 1.0, 1.0));
        let total: f64 = b.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-10, "mass {}", total);
        assert!(b.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn blur_delta_matches_dense_convolution_oracle() {
        let (d, h, w) = (9, 10, 11);
        let at = (4, 5, 5);
        let v = delta_volume(d, h, w, at);
        let b = gaussian_blur3d(&v, (1.0, 1.0, 1.0));
        // dense oracle: explicit separable product of 1-D kernels
        let k = gaussian_kernel(1.0);
        let r = (k.len() / 2) as i64;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (dz, dy, dx) = (
                        z as i64 - at.0 as i64,
                        y as i64 - at.1 as i64,
                        x as i64 - at.2 as i64,
                    );
                    let expected = if dz.abs() <= r && dy.abs() <= r && dx.abs() <= r {
                        k[(dz + r) as usize] * k[(dy + r) as usize] * k[(dx + r) as usize]
                    } else {
                        0.0
                    };
                    let got = b.data()[(z * h + y) * w + x];
                    assert!((got - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Tensor::constant(vec![3, 4, 5], data.clone(), Precision::F64);
        let same = resample_trilinear(&v, (3, 4, 5)).unwrap();
        for (a, b) in same.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Tensor::full(vec![2, 3, 4], 0.7, Precision::F64);
        let up = resample_trilinear(&c, (5, 7, 9)).unwrap();
        for v in up.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_ramp_matches_hand_unrolled_weights() {
        // 2x2x2 ramp along x upsampled to 3x3x3: middle samples sit exactly
        // halfway between corners under align-corners.
        let mut data = vec![0.0; 8];
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    data[(z * 2 + y) * 2 + x] = x as f64;
                }
            }
        }
        let v = Tensor::constant(vec![2, 2, 2], data, Precision::F64);
        let r = resample_trilinear(&v, (3, 3, 3)).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let expected = x as f64 * 0.5;
                    let got = r.data()[(z * 3 + y) * 3 + x];
                    assert!((got - expected).abs() < 1e-12, "at {},{},{}", z, y, x);
                }
            }
        }
    }

    #[test]
    fn resample_zero_extent_rejected() {
        let v = Tensor::full(vec![2, 2, 2], 1.0, Precision::F64);
        assert!(resample_trilinear(&v, (0, 2, 2)).is_err());
        assert!(resample_nearest3d(&v, (2, 0, 2)).is_err());
    }

    #[test]
    fn resample_adjoint_identity() {
        // <R x, y> == <x, R^T y> with R^T applied via backward
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y_data: Vec<f64> = (0..6 * 7 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(vec![3, 4, 5], x_data.clone(), Precision::F64);
        let rx = resample_trilinear(&x, (6, 7, 8)).unwrap();
        let y = Tensor::constant(vec![6, 7, 8], y_data.clone(), Precision::F64);
        let inner = sum_all(&crate::numcore::mul(&rx, &y));
        let lhs = inner.item();
        backward(&inner).unwrap();
        let rty = x.grad().unwrap(); // gradient of <Rx, y> wrt x is R^T y
        let rhs: f64 = x_data.iter().zip(&rty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs {} rhs {}", lhs, rhs);
    }

    #[test]
    fn nearest_preserves_binary_values() {
        let mut data = vec![0.0; 4 * 4 * 4];
        data[(1 * 4 + 2) * 4 + 2] = 1.0;
        data[(2 * 4 + 2) * 4 + 2] = 1.0;
        let v = Tensor::constant(vec![4, 4, 4], data, Precision::F64);
        let r = resample_nearest3d(&v, (7, 9, 9)).unwrap();
        assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(r.data().iter().sum::<f64>() > 0.0);
    }
}
