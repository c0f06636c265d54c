//! Standardized preprocessing: phase selection, geometry normalization
//! (axial reorientation, unilateral split, spacing resample, center
//! crop/pad), and intensity normalization (baseline subtraction, flat-field
//! correction, percentile clip, [0,1] rescale).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{gaussian_blur3d, resample_nearest3d, resample_trilinear, Grid, Precision, Tensor};
use crate::phantom::{mask_centroid, Laterality, Mask, Orientation, PatientRecord, Volume};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Standard crop extents (D, H, W).
    pub crop: (usize, usize, usize),
    /// Target spacing in mm per voxel along (D, H, W).
    pub target_spacing: [f64; 3],
    /// Percentile clip range, as fractions.
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Flat-field smoothing sigma = extent / divisor, per axis.
    pub flat_field_divisor: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            crop: (16, 32, 32),
            target_spacing: [1.5, 1.0, 1.0],
            clip_lo: 0.01,
            clip_hi: 0.99,
            flat_field_divisor: 6.0,
        }
    }
}

fn channel_slice(v: &Grid, c: usize) -> &[f64] {
    let s = v.shape();
    let grid = s[1] * s[2] * s[3];
    &v.data()[c * grid..(c + 1) * grid]
}

/// Pick (early, peak, washout) = (first, argmax of mean breast-region
/// intensity, last). On collision the peak wins its slot and the displaced
/// slot takes the nearest unused phase, ties toward later.
pub fn select_phases(v: &Volume) -> Result<Volume> {
    let c = v.channels();
    if c < 3 {
        return Err(Error::Data(format!(
            "need at least 3 post-contrast phases, got {}",
            c
        )));
    }
    let (d, h, w) = v.extents();
    let grid = d * h * w;
    // breast region: bright-enough baseline voxels when a baseline exists
    let region: Vec<bool> = match &v.baseline {
        Some(b) => {
            let max = b.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > 0.0 {
                b.data().iter().map(|&x| x > 0.1 * max).collect()
            } else {
                vec![true; grid]
            }
        }
        None => vec![true; grid],
    };
    let n_region = region.iter().filter(|&&r| r).count().max(1) as f64;
    let mean_curve: Vec<f64> = (0..c)
        .map(|ci| {
            let ch = channel_slice(&v.data, ci);
            ch.iter()
                .zip(&region)
                .filter(|(_, &r)| r)
                .map(|(x, _)| x)
                .sum::<f64>()
                / n_region
        })
        .collect();
    let peak = mean_curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap();
    let (mut early, mut washout) = (0usize, c - 1);
    let nearest_unused = |slot: usize, used: &[usize]| -> usize {
        (0..c)
            .filter(|p| !used.contains(p))
            .min_by_key(|&p| {
                let dist = (p as i64 - slot as i64).unsigned_abs();
                (dist, std::cmp::Reverse(p)) // ties toward later
            })
            .expect("at least 3 phases leave an unused candidate")
    };
    if peak == early && peak == washout {
        unreachable!("c >= 3");
    } else if peak == early {
        early = nearest_unused(0, &[peak, washout]);
    } else if peak == washout {
        washout = nearest_unused(c - 1, &[early, peak]);
    }
    let mut data = Vec::with_capacity(3 * grid);
    for &ci in &[early, peak, washout] {
        data.extend_from_slice(channel_slice(&v.data, ci));
    }
    Ok(Volume {
        data: Grid::new(vec![3, d, h, w], data, v.data.precision()),
        baseline: v.baseline.clone(),
        spacing: v.spacing,
        orientation: v.orientation,
        laterality: v.laterality,
    })
}

fn permute_sagittal_to_axial(t: &Grid) -> Grid {
    let s = t.shape();
    let (c, sd, sh, sw) = (s[0], s[1], s[2], s[3]);
    // sagittal storage holds (W, H, D); swap axes 1 and 3
    let mut out = vec![0.0; t.numel()];
    let grid = sd * sh * sw;
    for ci in 0..c {
        for z in 0..sd {
            for y in 0..sh {
                for x in 0..sw {
                    out[ci * grid + (x * sh + y) * sd + z] =
                        t.data()[ci * grid + (z * sh + y) * sw + x];
                }
            }
        }
    }
    Grid::new(vec![c, sw, sh, sd], out, t.precision())
}

fn slice_width(t: &Grid, x0: usize, x1: usize) -> Grid {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let nw = x1 - x0;
    let mut out = Vec::with_capacity(c * d * h * nw);
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let base = ci * d * h * w + (z * h + y) * w;
                out.extend_from_slice(&t.data()[base + x0..base + x1]);
            }
        }
    }
    Grid::new(vec![c, d, h, nw], out, t.precision())
}

fn resample_channels(t: &Grid, target: (usize, usize, usize), nearest: bool) -> Result<Grid> {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(c * target.0 * target.1 * target.2);
    for ci in 0..c {
        let ch = Tensor::constant(
            vec![d, h, w],
            channel_slice(t, ci).to_vec(),
            t.precision(),
        );
        let r = if nearest {
            resample_nearest3d(&ch, target)?
        } else {
            resample_trilinear(&ch, target)?
        };
        out.extend_from_slice(r.data());
    }
    Ok(Grid::new(
        vec![c, target.0, target.1, target.2],
        out,
        t.precision(),
    ))
}

fn center_crop_pad(t: &Grid, crop: (usize, usize, usize)) -> Grid {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (cd, ch, cw) = crop;
    let mut out = vec![0.0; c * cd * ch * cw];
    // source/destination start per axis
    let span = |src: usize, dst: usize| -> (usize, usize, usize) {
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    };
    let (sz, dz, nz) = span(d, cd);
    let (sy, dy, ny) = span(h, ch);
    let (sx, dx, nx) = span(w, cw);
    for ci in 0..c {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out[ci * cd * ch * cw + ((dz + z) * ch + dy + y) * cw + dx + x] =
                        t.data()[ci * d * h * w + ((sz + z) * h + sy + y) * w + sx + x];
                }
            }
        }
    }
    Grid::new(vec![c, cd, ch, cw], out, t.precision())
}

fn binarize(t: &Grid) -> Grid {
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Grid::new(t.shape().to_vec(), data, t.precision())
}

/// Reorient to axial, split bilateral volumes at the width midline (keeping
/// the half holding the mask centroid), resample to target spacing, and
/// center-crop/zero-pad to the standard shape. The mask undergoes the same
/// transform with nearest-neighbor resampling and re-binarization.
pub fn standardize_geometry(
    v: &Volume,
    m: &Mask,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Mask)> {
    if m.voxel_count() == 0 {
        return Err(Error::Data("empty tumor mask".into()));
    }
    assert_eq!(
        v.extents(),
        m.extents(),
        "mask must be aligned with the volume"
    );
    let mut data = v.data.clone();
    let mut baseline = v.baseline.clone();
    let mut mask = m.data.clone();
    let mut spacing = v.spacing;

    if v.orientation == Orientation::Sagittal {
        data = permute_sagittal_to_axial(&data);
        baseline = baseline.map(|b| permute_sagittal_to_axial(&b));
        mask = permute_sagittal_to_axial(&mask);
        spacing = [spacing[2], spacing[1], spacing[0]];
    }

    if v.laterality == Laterality::Bilateral {
        let s = data.shape();
        let (d, h, w) = (s[1], s[2], s[3]);
        let centroid = mask_centroid(mask.data(), (d, h, w))
            .ok_or_else(|| Error::Data("empty tumor mask".into()))?;
        let mid = (w as f64 - 1.0) / 2.0;
        let keep_left = if centroid.2 < mid {
            true
        } else if centroid.2 > mid {
            false
        } else {
            // centroid exactly on the midline: keep the half with more mass
            let half = w / 2;
            let mut left_mass = 0.0;
            let mut right_mass = 0.0;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let v = mask.data()[(z * h + y) * w + x];
                        if x < half {
                            left_mass += v;
                        } else {
                            right_mass += v;
                        }
                    }
                }
            }
            left_mass >= right_mass
        };
        let (x0, x1) = if keep_left { (0, w / 2) } else { (w / 2, w) };
        data = slice_width(&data, x0, x1);
        baseline = baseline.map(|b| slice_width(&b, x0, x1));
        mask = slice_width(&mask, x0, x1);
    }

    // resample to target spacing
    let s = data.shape();
    let (d, h, w) = (s[1], s[2], s[3]);
    let target: (usize, usize, usize) = (
        ((d as f64 * spacing[0] / cfg.target_spacing[0]).round() as usize).max(1),
        ((h as f64 * spacing[1] / cfg.target_spacing[1]).round() as usize).max(1),
        ((w as f64 * spacing[2] / cfg.target_spacing[2]).round() as usize).max(1),
    );
    data = resample_channels(&data, target, false)?;
    baseline = match baseline {
        Some(b) => Some(resample_channels(&b, target, false)?),
        None => None,
    };
    mask = binarize(&resample_channels(&mask, target, true)?);

    data = center_crop_pad(&data, cfg.crop);
    baseline = baseline.map(|b| center_crop_pad(&b, cfg.crop));
    mask = center_crop_pad(&mask, cfg.crop);

    let out_mask = Mask {
        data: mask,
        provenance: m.provenance,
    };
    if out_mask.voxel_count() == 0 {
        return Err(Error::Data(
            "mask vanished during geometry standardization".into(),
        ));
    }
    Ok((
        Volume {
            data,
            baseline,
            spacing: cfg.target_spacing,
            orientation: Orientation::Axial,
            laterality: Laterality::Unilateral,
        },
        out_mask,
    ))
}

/// Divide a single-phase grid by a heavily smoothed copy of itself (plus a
/// scale-aware epsilon). Stand-in for iterative bias-field correction. The
/// smoothed copy is a normalized convolution (blur(v) / blur(ones)) so the
/// zero-padded kernel does not depress the estimate near boundaries.
pub(crate) fn flat_field(phase: &Tensor, divisor: f64) -> Tensor {
    let s = phase.shape();
    let (d, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let sig = (
        d as f64 / divisor,
        h as f64 / divisor,
        w as f64 / divisor,
    );
    let blurred = gaussian_blur3d(&phase.detach(), sig);
    let support = gaussian_blur3d(&Tensor::full(vec![d, h, w], 1.0, Precision::F64), sig);
    let smooth: Vec<f64> = blurred
        .data()
        .iter()
        .zip(support.data())
        .map(|(b, s)| b / s.max(1e-12))
        .collect();
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let eps = (0.05 * mean).max(1e-12);
    let data: Vec<f64> = phase
        .data()
        .iter()
        .zip(&smooth)
        .map(|(v, s)| v / (s + eps))
        .collect();
    Tensor::constant(phase.shape().to_vec(), data, phase.precision())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per phase: subtract the pre-contrast baseline (clamping negatives),
/// apply flat-field correction; then clip the whole volume to its
/// [p_lo, p_hi] percentiles and map linearly onto [0,1].
pub fn normalize_intensity(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let s = v.data.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let grid = d * h * w;
    let mut phases: Vec<f64> = Vec::with_capacity(c * grid);
    for ci in 0..c {
        let src = channel_slice(&v.data, ci);
        let mut e: Vec<f64> = match &v.baseline {
            Some(b) => src
                .iter()
                .zip(b.data())
                .map(|(x, b)| (x - b).max(0.0))
                .collect(),
            None => src.to_vec(),
        };
        let et = Tensor::constant(vec![d, h, w], std::mem::take(&mut e), Precision::F64);
        let ff = flat_field(&et, cfg.flat_field_divisor);
        phases.extend_from_slice(ff.data());
    }
    let mut sorted = phases.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p_lo = percentile(&sorted, cfg.clip_lo);
    let p_hi = percentile(&sorted, cfg.clip_hi);
    let range = p_hi - p_lo;
    let data: Vec<f64> = if range < 1e-12 {
        warn!("degenerate intensity range (p_lo == p_hi); emitting zeros");
        vec![0.0; phases.len()]
    } else {
        phases
            .iter()
            .map(|&x| ((x.clamp(p_lo, p_hi)) - p_lo) / range)
            .collect()
    };
    Ok(Volume {
        data: Grid::new(vec![c, d, h, w], data, v.data.precision()),
        baseline: None,
        spacing: v.spacing,
        orientation: v.orientation,
        laterality: v.laterality,
    })
}

/// Full pipeline: phase selection, geometry standardization, intensity
/// normalization.
pub fn preprocess_record(
    rec: &PatientRecord,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Mask)> {
    let selected = select_phases(&rec.volume)?;
    let (vol, mask) = standardize_geometry(&selected, &rec.mask, cfg)?;
    let vol = normalize_intensity(&vol, cfg)?;
    Ok((vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Provenance;

    fn flat_volume(curve: &[f64], d: usize, h: usize, w: usize) -> Volume {
        let grid = d * h * w;
        let mut data = Vec::new();
        for &v in curve {
            data.extend(std::iter::repeat(v).take(grid));
        }
        Volume {
            data: Grid::new(vec![curve.len(), d, h, w], data, Precision::F64),
            baseline: None,
            spacing: [1.5, 1.0, 1.0],
            orientation: Orientation::Axial,
            laterality: Laterality::Unilateral,
        }
    }

    fn center_mask(d: usize, h: usize, w: usize) -> Mask {
        let mut m = vec![0.0; d * h * w];
        m[((d / 2) * h + h / 2) * w + w / 2] = 1.0;
        Mask {
            data: Grid::new(vec![1, d, h, w], m, Precision::F64),
            provenance: Provenance::Synthetic,
        }
    }

    #[test]
    fn phase_selection_middle_peak_is_identity() {
        let v = flat_volume(&[1.0, 3.0, 2.0], 4, 4, 4);
        let out = select_phases(&v).unwrap();
        assert_eq!(out.channels(), 3);
        assert_eq!(out.data.data(), v.data.data());
    }

    #[test]
    fn phase_selection_argmax_oracle() {
        let v = flat_volume(&[1.0, 3.0, 2.0, 1.0], 4, 4, 4);
        let out = select_phases(&v).unwrap();
        // phases (0, 1, 3)
        assert_eq!(out.data.data()[0], 1.0);
        assert_eq!(out.data.data()[64], 3.0);
        assert_eq!(out.data.data()[128], 1.0);
    }

    #[test]
    fn phase_selection_monotone_collision() {
        let v = flat_volume(&[1.0, 2.0, 3.0, 4.0], 4, 4, 4);
        let out = select_phases(&v).unwrap();
        // peak = last keeps its slot; washout falls back to phase C-2
        assert_eq!(out.data.data()[0], 1.0); // early = 0
        assert_eq!(out.data.data()[64], 4.0); // peak = 3
        assert_eq!(out.data.data()[128], 3.0); // washout = 2
    }

    #[test]
    fn phase_selection_rejects_two_phases() {
        let v = flat_volume(&[1.0, 2.0], 4, 4, 4);
        assert!(select_phases(&v).is_err());
    }

    #[test]
    fn geometry_identity_on_conforming_input() {
        let cfg = PreprocessConfig::default();
        let (d, h, w) = cfg.crop;
        let v = flat_volume(&[0.3, 0.5, 0.4], d, h, w);
        let m = center_mask(d, h, w);
        let (vo, mo) = standardize_geometry(&v, &m, &cfg).unwrap();
        assert_eq!(vo.data.data(), v.data.data());
        assert_eq!(mo.data.data(), m.data.data());
    }

    #[test]
    fn bilateral_split_keeps_mask_half() {
        let cfg = PreprocessConfig::default();
        let (d, h, w) = cfg.crop;
        // bilateral volume with double width; mask fully in the left half
        let mut v = flat_volume(&[0.3, 0.5, 0.4], d, h, 2 * w);
        v.laterality = Laterality::Bilateral;
        let mut m = vec![0.0; d * h * 2 * w];
        m[((d / 2) * h + h / 2) * 2 * w + w / 4] = 1.0;
        m[((d / 2) * h + h / 2) * 2 * w + w / 4 + 1] = 1.0;
        let mask = Mask {
            data: Grid::new(vec![1, d, h, 2 * w], m, Precision::F64),
            provenance: Provenance::Synthetic,
        };
        let (vo, mo) = standardize_geometry(&v, &mask, &cfg).unwrap();
        assert_eq!(vo.extents(), (d, h, w));
        assert_eq!(mo.voxel_count(), 2); // mass conserved
    }

    #[test]
    fn geometry_rejects_empty_mask() {
        let cfg = PreprocessConfig::default();
        let (d, h, w) = cfg.crop;
        let v = flat_volume(&[0.3, 0.5, 0.4], d, h, w);
        let m = Mask {
            data: Grid::zeros(vec![1, d, h, w], Precision::F64),
            provenance: Provenance::Synthetic,
        };
        assert!(standardize_geometry(&v, &m, &cfg).is_err());
    }

    #[test]
    fn sagittal_roundtrip_restores_axial() {
        let cfg = PreprocessConfig {
            crop: (4, 5, 6),
            ..PreprocessConfig::default()
        };
        // axial content with a distinctive voxel
        let (d, h, w) = (4, 5, 6);
        let mut axial = vec![0.0; 3 * d * h * w];
        axial[(1 * h + 2) * w + 3] = 7.0;
        // store it sagittal: (W, H, D) with [x][y][z]
        let mut sag = vec![0.0; 3 * d * h * w];
        for c in 0..3 {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        sag[c * d * h * w + (x * h + y) * d + z] =
                            axial[c * d * h * w + (z * h + y) * w + x];
                    }
                }
            }
        }
        let v = Volume {
            data: Grid::new(vec![3, w, h, d], sag.clone(), Precision::F64),
            baseline: None,
            spacing: [1.0, 1.0, 1.5],
            orientation: Orientation::Sagittal,
            laterality: Laterality::Unilateral,
        };
        let mut mdata = vec![0.0; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    mdata[(x * h + y) * d + z] = if z == 1 && y == 2 && x == 3 { 1.0 } else { 0.0 };
                }
            }
        }
        let m = Mask {
            data: Grid::new(vec![1, w, h, d], mdata, Precision::F64),
            provenance: Provenance::Synthetic,
        };
        let (vo, mo) = standardize_geometry(&v, &m, &cfg).unwrap();
        assert_eq!(vo.extents(), (4, 5, 6));
        assert_eq!(vo.data.data()[(1 * h + 2) * w + 3], 7.0);
        assert_eq!(mo.data.data()[(1 * h + 2) * w + 3], 1.0);
    }

    #[test]
    fn normalize_affine_rescale_and_degenerate() {
        let cfg = PreprocessConfig {
            flat_field_divisor: 1e9, // effectively disables smoothing scale
            ..PreprocessConfig::default()
        };
        // without a baseline, normalize is flat-field + percentile map
        let (d, h, w) = (4, 4, 4);
        let grid = d * h * w;
        let mut data = vec![0.0; 3 * grid];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % grid) as f64 / grid as f64 + 0.5;
        }
        let v = Volume {
            data: Grid::new(vec![3, d, h, w], data, Precision::F64),
            baseline: None,
            spacing: [1.5, 1.0, 1.0],
            orientation: Orientation::Axial,
            laterality: Laterality::Unilateral,
        };
        let out = normalize_intensity(&v, &cfg).unwrap();
        let lo = out.data.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = out
            .data
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);

        let flat = flat_volume(&[0.5, 0.5, 0.5], 4, 4, 4);
        let out = normalize_intensity(&flat, &cfg).unwrap();
        assert!(out.data.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn flat_field_reduces_bias_cov() {
        // homogeneous slab with planted multiplicative bias
        let (d, h, w) = (12, 24, 24);
        let mut data = vec![0.0; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let bias = 1.0
                        + 0.35
                            * (std::f64::consts::PI * x as f64 / w as f64).cos()
                            * (std::f64::consts::PI * y as f64 / h as f64).sin();
                    data[(z * h + y) * w + x] = 0.6 * bias;
                }
            }
        }
        let t = Tensor::constant(vec![d, h, w], data.clone(), Precision::F64);
        let corrected = flat_field(&t, 6.0);
        // interior region away from blur boundary effects
        let cov = |vals: &dyn Fn(usize, usize, usize) -> f64| -> f64 {
            let mut v = Vec::new();
            for z in 2..d - 2 {
                for y in 4..h - 4 {
                    for x in 4..w - 4 {
                        v.push(vals(z, y, x));
                    }
                }
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64;
            var.sqrt() / mean
        };
        let before = cov(&|z, y, x| data[(z * h + y) * w + x]);
        let after = cov(&|z, y, x| corrected.data()[(z * h + y) * w + x]);
        assert!(
            after * 2.0 <= before,
            "CoV before {:.4} after {:.4}",
            before,
            after
        );
    }
}
