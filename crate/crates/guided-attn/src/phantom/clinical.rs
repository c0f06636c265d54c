//! Clinical field schema, one-hot + z-score encoding, and the fixed linear
//! term the label rule mixes with the imaging statistic.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw per-patient clinical fields. Categories index into the schema's
/// cardinalities in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRaw {
    pub age: f64,
    pub multifocal: usize,
    pub hormone_receptor: usize,
    pub her2: usize,
    pub subtype: usize,
    pub ethnicity: usize,
}

impl ClinicalRaw {
    pub fn categories(&self) -> [usize; 5] {
        [
            self.multifocal,
            self.hormone_receptor,
            self.her2,
            self.subtype,
            self.ethnicity,
        ]
    }
}

/// Ordered categorical cardinalities plus one numeric (age-like) field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalSchema {
    pub cardinalities: Vec<usize>,
    pub field_names: Vec<String>,
}

impl Default for ClinicalSchema {
    fn default() -> Self {
        ClinicalSchema {
            cardinalities: vec![2, 2, 2, 4, 6],
            field_names: vec![
                "multifocal".into(),
                "hormone_receptor".into(),
                "her2".into(),
                "subtype".into(),
                "ethnicity".into(),
            ],
        }
    }
}

impl ClinicalSchema {
    /// Encoded length: sum of one-hot blocks plus the numeric field.
    pub fn encoded_len(&self) -> usize {
        self.cardinalities.iter().sum::<usize>() + 1
    }
}

/// Training-split statistics for the numeric field.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub age_mean: f64,
    pub age_std: f64,
}

impl TrainStats {
    pub fn from_records<'a>(ages: impl Iterator<Item = &'a ClinicalRaw>) -> TrainStats {
        let ages: Vec<f64> = ages.map(|r| r.age).collect();
        let n = ages.len().max(1) as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        TrainStats {
            age_mean: mean,
            age_std: var.sqrt(),
        }
    }
}

/// Encoded clinical vector of length `schema.encoded_len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinicalVector {
    pub values: Vec<f64>,
}

/// One-hot encode categorical fields and z-score the numeric field with
/// training-split statistics. Unknown categories yield an all-zero block
/// with a warning; zero variance yields 0 for the numeric field.
pub fn encode_clinical(
    raw: &ClinicalRaw,
    schema: &ClinicalSchema,
    stats: &TrainStats,
) -> Result<ClinicalVector> {
    if raw.age.is_nan() {
        return Err(Error::Data("clinical age is NaN".into()));
    }
    let mut values = Vec::with_capacity(schema.encoded_len());
    for (fi, (&card, cat)) in schema
        .cardinalities
        .iter()
        .zip(raw.categories())
        .enumerate()
    {
        let mut block = vec![0.0; card];
        if cat < card {
            block[cat] = 1.0;
        } else {
            warn!(
                "unknown category {} for field {} (cardinality {}); emitting zero block",
                cat, schema.field_names[fi], card
            );
        }
        values.extend_from_slice(&block);
    }
    if stats.age_std > 0.0 {
        values.push((raw.age - stats.age_mean) / stats.age_std);
    } else {
        warn!("zero age variance in training statistics; numeric field set to 0");
        values.push(0.0);
    }
    Ok(ClinicalVector { values })
}

/// Fixed linear clinical contribution to the ground-truth label score.
/// Receptor status and subtype carry signal; ethnicity is a decoy.
pub fn clinical_term(raw: &ClinicalRaw) -> f64 {
    let mut t = 0.0;
    if raw.her2 == 1 {
        t += 0.9;
    }
    if raw.hormone_receptor == 1 {
        t -= 0.35;
    }
    match raw.subtype {
        0 => t -= 0.3,
        2 => t += 0.55,
        3 => t += 0.25,
        _ => {}
    }
    if raw.multifocal == 1 {
        t -= 0.25;
    }
    t += 0.3 * (raw.age - 52.0) / 10.0;
    t
}
