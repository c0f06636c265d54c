//! Cohort generation. Every patient is a pure function of
//! `(spec, seed, index)`: an ellipsoidal breast with parenchyma texture, one
//! enhancing tumor blob with rise/peak/washout kinetics and planted
//! intensity heterogeneity, an expert-style mask (thresholded blob), and
//! raw clinical fields. Labels are assigned per cohort by thresholding
//! `0.7 * z(within-mask heterogeneity) + 0.3 * z(clinical term)` at the
//! exact requested prevalence, so the predictive signal provably lives
//! inside the mask and partially in the clinical vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{gaussian_blur3d, Grid, Precision, Tensor};
use crate::phantom::clinical::{clinical_term, ClinicalRaw};
use crate::phantom::{CohortTag, Laterality, Mask, Orientation, PatientRecord, Provenance, Volume};

/// Cohort-level acquisition shift.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub intensity_gain: f64,
    pub noise_std: f64,
    pub bias_amplitude: f64,
    pub spacing_jitter: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            intensity_gain: 1.0,
            noise_std: 0.02,
            bias_amplitude: 0.1,
            spacing_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortSpec {
    pub tag: CohortTag,
    pub n_patients: usize,
    /// Fraction of responders, in (0,1); realized count is `round(n * p)`.
    pub prevalence: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

/// SplitMix64 step; derives independent per-patient streams.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of post-contrast phases generated natively (3 are selected later).
pub const NATIVE_PHASES: usize = 4;

/// Generation field of view in mm along (D, H, W), unilateral.
const FOV_MM: [f64; 3] = [27.0, 38.0, 38.0];
/// Reference spacing in mm per voxel along (D, H, W).
const BASE_SPACING: [f64; 3] = [1.5, 1.0, 1.0];

const SAGITTAL_FRACTION: f64 = 0.30;
const BILATERAL_FRACTION: f64 = 0.35;

/// Weights of the label score: imaging heterogeneity vs clinical term.
const IMAGING_WEIGHT: f64 = 0.7;
const CLINICAL_WEIGHT: f64 = 0.3;

/// Thread-transferable generation result; tensors are assembled on the
/// calling thread because tracked tensors are tape-bound and `!Send`.
struct RawPatient {
    post: Vec<f64>,
    base: Vec<f64>,
    mask: Vec<f64>,
    dims: (usize, usize, usize),
    spacing: [f64; 3],
    sagittal: bool,
    bilateral: bool,
    clinical: ClinicalRaw,
    heterogeneity: f64,
}

/// Smooth zero-mean unit-std random field (white noise, blurred).
fn smooth_field(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), sigma: f64) -> Vec<f64> {
    let (d, h, w) = dims;
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let raw: Vec<f64> = (0..d * h * w).map(|_| normal.sample(rng)).collect();
    let t = Tensor::constant(vec![d, h, w], raw, Precision::F64);
    let blurred = gaussian_blur3d(&t, (sigma, sigma, sigma));
    let vals = blurred.data();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    vals.iter().map(|v| (v - mean) / std).collect()
}

fn generate_patient(spec: &CohortSpec, index: usize) -> RawPatient {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64 + 1));

    // 1. spacing and native grid (unilateral)
    let jitter = spec.shift.spacing_jitter;
    let spacing: [f64; 3] = std::array::from_fn(|a| {
        BASE_SPACING[a] * (1.0 + jitter * rng.gen_range(-1.0..1.0))
    });
    let dims: [usize; 3] =
        std::array::from_fn(|a| ((FOV_MM[a] / spacing[a]).round() as usize).max(4));
    let (d, h, w) = (dims[0], dims[1], dims[2]);
    let vox = d * h * w;
    let mm = |z: usize, y: usize, x: usize| {
        [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]
    };

    // 2. breast ellipsoid
    let fov_center = [FOV_MM[0] / 2.0, FOV_MM[1] / 2.0, FOV_MM[2] / 2.0];
    let breast_center: [f64; 3] =
        std::array::from_fn(|a| fov_center[a] + rng.gen_range(-1.0..1.0));
    let breast_scale = rng.gen_range(0.85..1.05);
    let breast_axes = [12.0 * breast_scale, 17.0 * breast_scale, 16.0 * breast_scale];

    // 3. tumor blob
    let mut tumor_center: [f64; 3] = std::array::from_fn(|a| {
        breast_center[a] + rng.gen_range(-0.35..0.35) * breast_axes[a]
    });
    let reach = [4.5, 6.0, 6.0];
    for a in 0..3 {
        tumor_center[a] = tumor_center[a]
            .max(fov_center[a] - reach[a])
            .min(fov_center[a] + reach[a]);
    }
    let tumor_radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(2.6..4.6));
    let heterogeneity_amp = rng.gen_range(0.06..0.50);
    let tumor_amp = rng.gen_range(0.7..1.0);

    // 4. kinetics: tumor rise/peak/washout and parenchyma enhancement
    let kin_base = [0.55, 1.0, 0.82, 0.62];
    let kin: [f64; NATIVE_PHASES] =
        std::array::from_fn(|c| kin_base[c] * (1.0 + 0.05 * rng.gen_range(-1.0..1.0)));
    let monotone_pe = rng.gen_bool(0.12);
    let pe_base = if monotone_pe {
        [0.05, 0.08, 0.105, 0.12]
    } else {
        [0.07, 0.13, 0.10, 0.06]
    };
    let pe_scale = 1.0 + 0.2 * rng.gen_range(-1.0..1.0);
    let pe: [f64; NATIVE_PHASES] = std::array::from_fn(|c| pe_base[c] * pe_scale);

    // 5. clinical fields
    let pick = |rng: &mut ChaCha8Rng, probs: &[f64]| -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    };
    let clinical = ClinicalRaw {
        age: (52.0 + 10.0 * Normal::<f64>::new(0.0, 1.0).unwrap().sample(&mut rng))
            .clamp(25.0, 80.0),
        multifocal: pick(&mut rng, &[0.7, 0.3]),
        hormone_receptor: pick(&mut rng, &[0.35, 0.65]),
        her2: pick(&mut rng, &[0.65, 0.35]),
        subtype: pick(&mut rng, &[0.30, 0.30, 0.25, 0.15]),
        ethnicity: pick(&mut rng, &[0.45, 0.20, 0.15, 0.10, 0.06, 0.04]),
    };

    // 6. acquisition layout
    let sagittal = rng.gen_bool(SAGITTAL_FRACTION);
    let bilateral = rng.gen_bool(BILATERAL_FRACTION);
    let affected_left = rng.gen_bool(0.5);

    // 7. random fields
    let parenchyma = smooth_field(&mut rng, (d, h, w), 2.0);
    let tumor_tex = smooth_field(&mut rng, (d, h, w), 1.2);

    // clean unilateral content
    let mut tissue = vec![0.0; vox];
    let mut blob = vec![0.0; vox];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = mm(z, y, x);
                let rho2: f64 = (0..3)
                    .map(|a| ((p[a] - breast_center[a]) / breast_axes[a]).powi(2))
                    .sum();
                if rho2 <= 1.0 {
                    tissue[i] = 0.55 * (1.0 - 0.3 * rho2) * (1.0 + 0.12 * parenchyma[i]);
                }
                let rt2: f64 = (0..3)
                    .map(|a| ((p[a] - tumor_center[a]) / tumor_radii[a]).powi(2))
                    .sum();
                if rt2 < 1.0 {
                    blob[i] = (1.0 - rt2).powf(1.5);
                }
            }
        }
    }
    // expert-style mask: thresholded blob (rho_t <= 0.75)
    let mask_cut = (1.0f64 - 0.75 * 0.75).powf(1.5);
    let mask_uni: Vec<f64> = blob.iter().map(|&b| if b >= mask_cut { 1.0 } else { 0.0 }).collect();

    let phase = |c: usize, i: usize| -> f64 {
        tissue[i] * (1.0 + pe[c])
            + tumor_amp * kin[c] * blob[i] * (1.0 + heterogeneity_amp * tumor_tex[i]).max(0.05)
    };
    let baseline_at = |i: usize| tissue[i] + 0.12 * tumor_amp * blob[i];

    // 8. within-mask heterogeneity statistic on the clean peak-phase
    //    enhancement (argmax of tumor kinetics)
    let peak_c = (0..NATIVE_PHASES)
        .max_by(|&a, &b| kin[a].partial_cmp(&kin[b]).unwrap())
        .unwrap();
    let mut vals = Vec::new();
    for i in 0..vox {
        if mask_uni[i] != 0.0 {
            vals.push(phase(peak_c, i) - baseline_at(i));
        }
    }
    let m_mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    let m_var =
        vals.iter().map(|v| (v - m_mean) * (v - m_mean)).sum::<f64>() / vals.len().max(1) as f64;
    let heterogeneity = m_var.sqrt() / m_mean.max(1e-9);

    // 9. assemble grid (bilateral mirrors the tissue-only half)
    let full_w = if bilateral { 2 * w } else { w };
    let n_chan = NATIVE_PHASES + 1; // phases + baseline at channel end
    let mut volume = vec![0.0; n_chan * d * h * full_w];
    let mut mask = vec![0.0; d * h * full_w];
    let place = |x_uni: usize, mirrored: bool| -> usize {
        if !bilateral {
            return x_uni;
        }
        match (affected_left, mirrored) {
            (true, false) => x_uni,                 // affected half on the left
            (true, true) => 2 * w - 1 - x_uni,      // mirror to the right
            (false, false) => w + x_uni,            // affected half on the right
            (false, true) => w - 1 - x_uni,         // mirror to the left
        }
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let xa = place(x, false);
                let fa = (z * h + y) * full_w + xa;
                for c in 0..NATIVE_PHASES {
                    volume[c * d * h * full_w + fa] = phase(c, i);
                }
                volume[NATIVE_PHASES * d * h * full_w + fa] = baseline_at(i);
                mask[fa] = mask_uni[i];
                if bilateral {
                    let xm = place(x, true);
                    let fm = (z * h + y) * full_w + xm;
                    for c in 0..NATIVE_PHASES {
                        volume[c * d * h * full_w + fm] = tissue[i] * (1.0 + pe[c]);
                    }
                    volume[NATIVE_PHASES * d * h * full_w + fm] = tissue[i];
                }
            }
        }
    }

    // 10. cohort shift: gain * (bias * clean + noise)
    let phis: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::PI));
    let noise = Normal::<f64>::new(0.0, spec.shift.noise_std.max(0.0)).unwrap();
    let grid = d * h * full_w;
    for c in 0..n_chan {
        for z in 0..d {
            for y in 0..h {
                for x in 0..full_w {
                    let i = c * grid + (z * h + y) * full_w + x;
                    let s = (std::f64::consts::PI * z as f64 / d.max(2) as f64 + phis[0]).cos()
                        * (std::f64::consts::PI * y as f64 / h.max(2) as f64 + phis[1]).cos()
                        * (std::f64::consts::PI * x as f64 / full_w.max(2) as f64 + phis[2]).cos();
                    let bias = 1.0 + spec.shift.bias_amplitude * s;
                    let n = if spec.shift.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    volume[i] = spec.shift.intensity_gain * (bias * volume[i] + n);
                }
            }
        }
    }

    // 11. storage orientation: sagittal volumes swap the D and W axes
    let (store_dims, store_spacing, volume, mask) = if sagittal {
        let mut v = vec![0.0; volume.len()];
        let mut m = vec![0.0; mask.len()];
        for c in 0..n_chan {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..full_w {
                        let src = c * grid + (z * h + y) * full_w + x;
                        let dst = c * grid + (x * h + y) * d + z;
                        v[dst] = volume[src];
                        if c == 0 {
                            m[(x * h + y) * d + z] = mask[(z * h + y) * full_w + x];
                        }
                    }
                }
            }
        }
        ((full_w, h, d), [spacing[2], spacing[1], spacing[0]], v, m)
    } else {
        ((d, h, full_w), spacing, volume, mask)
    };

    let (sd, sh, sw) = store_dims;
    let chan = sd * sh * sw;
    let post = volume[..NATIVE_PHASES * chan].to_vec();
    let base = volume[NATIVE_PHASES * chan..].to_vec();
    RawPatient {
        post,
        base,
        mask,
        dims: store_dims,
        spacing: store_spacing,
        sagittal,
        bilateral,
        clinical,
        heterogeneity,
    }
}

fn assemble(spec: &CohortSpec, index: usize, raw: RawPatient) -> PatientRecord {
    let (sd, sh, sw) = raw.dims;
    PatientRecord {
        id: format!("{}{:04}", spec.tag, index),
        cohort: spec.tag,
        volume: Volume {
            data: Grid::new(vec![NATIVE_PHASES, sd, sh, sw], raw.post, Precision::F64),
            baseline: Some(Grid::new(vec![1, sd, sh, sw], raw.base, Precision::F64)),
            spacing: raw.spacing,
            orientation: if raw.sagittal {
                Orientation::Sagittal
            } else {
                Orientation::Axial
            },
            laterality: if raw.bilateral {
                Laterality::Bilateral
            } else {
                Laterality::Unilateral
            },
        },
        mask: Mask {
            data: Grid::new(vec![1, sd, sh, sw], raw.mask, Precision::F64),
            provenance: Provenance::Synthetic,
        },
        clinical: raw.clinical,
        label: 0,
    }
}

fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Generate one cohort. Deterministic given the spec; the realized positive
/// count is exactly `round(n * prevalence)`.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<PatientRecord>> {
    if !(spec.prevalence > 0.0 && spec.prevalence < 1.0) {
        return Err(Error::Usage(format!(
            "prevalence must be in (0,1), got {}",
            spec.prevalence
        )));
    }
    if spec.n_patients == 0 {
        return Err(Error::Usage("cohort must have at least one patient".into()));
    }
    let k = (spec.n_patients as f64 * spec.prevalence).round() as usize;
    if k == 0 || k >= spec.n_patients {
        return Err(Error::Data(format!(
            "prevalence {} unreachable with n={} (would realize {} positives)",
            spec.prevalence, spec.n_patients, k
        )));
    }
    let raw: Vec<RawPatient> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(spec, i))
        .collect();

    // calibrated threshold: top-k of 0.7*z(h) + 0.3*z(clinical)
    let hs: Vec<f64> = raw.iter().map(|p| p.heterogeneity).collect();
    let cs: Vec<f64> = raw.iter().map(|p| clinical_term(&p.clinical)).collect();
    let (zh, zc) = (zscore(&hs), zscore(&cs));
    let scores: Vec<f64> = zh
        .iter()
        .zip(&zc)
        .map(|(a, b)| IMAGING_WEIGHT * a + CLINICAL_WEIGHT * b)
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut positive = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        positive[i] = true;
    }
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rec = assemble(spec, i, r);
            rec.label = positive[i] as u8;
            rec
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CohortSpec {
        CohortSpec {
            tag: CohortTag::A,
            n_patients: 20,
            prevalence: 0.294,
            shift: ShiftSpec::default(),
            seed: 11,
        }
    }

    #[test]
    fn prevalence_realized_exactly() {
        let spec = CohortSpec {
            n_patients: 148,
            ..small_spec()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let positives = cohort.iter().filter(|p| p.label == 1).count();
        assert_eq!(positives, 44); // round(148 * 0.294)
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let spec = small_spec();
        let a = generate_cohort(&spec).unwrap();
        let b = generate_cohort(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.label, pb.label);
            assert_eq!(pa.clinical, pb.clinical);
            let (da, db) = (pa.volume.data.data(), pb.volume.data.data());
            assert_eq!(da.len(), db.len());
            for (x, y) in da.iter().zip(db) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn intensity_gain_scales_voxels_exactly() {
        let mut s1 = small_spec();
        s1.shift.spacing_jitter = 0.0;
        let mut s2 = s1.clone();
        s2.shift.intensity_gain = 2.0;
        let (a, b) = (generate_cohort(&s1).unwrap(), generate_cohort(&s2).unwrap());
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.volume.data.data().iter().zip(pb.volume.data.data()) {
                assert_eq!(*y, 2.0 * *x);
            }
        }
    }

    #[test]
    fn masks_non_empty_binary_single_component() {
        let cohort = generate_cohort(&small_spec()).unwrap();
        for p in &cohort {
            assert!(p.mask.is_binary());
            assert!(p.mask.voxel_count() > 0, "empty mask for {}", p.id);
            let (d, h, w) = p.mask.extents();
            assert_eq!(
                crate::phantom::connected_components(p.mask.data.data(), (d, h, w)),
                1
            );
        }
    }

    #[test]
    fn unreachable_prevalence_rejected() {
        let mut spec = small_spec();
        spec.n_patients = 1;
        assert!(generate_cohort(&spec).is_err());
        spec.n_patients = 3;
        spec.prevalence = 0.01;
        assert!(generate_cohort(&spec).is_err());
    }
}
