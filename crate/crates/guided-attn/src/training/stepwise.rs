//! Sequential three-stage training: each stage starts from the previous
//! stage's best-validation parameters (newly introduced modules freshly
//! initialized) and all parameters stay trainable throughout.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::numcore::{Grid, Precision, Tape};
use crate::phantom::{
    encode_clinical, preprocess_record, ClinicalSchema, CohortTag, PatientRecord,
    PreprocessConfig, TrainStats,
};
use crate::training::loss::{composite_loss, make_target, mass_in_mask, LossReport};
use crate::training::stage::{run_stage, EpochRecord, StageConfig, TrackedBatch, TrainTask};

/// A patient ready for the model: preprocessed volume, encoded clinical
/// vector, standardized mask, all at the training precision.
pub struct PreparedPatient {
    pub id: String,
    pub cohort: CohortTag,
    pub label: u8,
    pub volume: Grid,
    pub clinical: Grid,
    pub mask: Grid,
}

/// Preprocess and encode a set of records. `stats` must come from the
/// training split only.
pub fn prepare_patients(
    records: &[PatientRecord],
    pre_cfg: &PreprocessConfig,
    schema: &ClinicalSchema,
    stats: &TrainStats,
    precision: Precision,
) -> Result<Vec<PreparedPatient>> {
    struct RawPrepared {
        vol: Vec<f64>,
        vol_shape: Vec<usize>,
        mask: Vec<f64>,
        mask_shape: Vec<usize>,
        clinical: Vec<f64>,
    }
    let raw: Vec<Result<RawPrepared>> = records
        .par_iter()
        .map(|rec| {
            let (vol, mask) = preprocess_record(rec, pre_cfg)?;
            let clinical = encode_clinical(&rec.clinical, schema, stats)?;
            Ok(RawPrepared {
                vol_shape: vol.data.shape().to_vec(),
                vol: vol.data.data().to_vec(),
                mask_shape: mask.data.shape().to_vec(),
                mask: mask.data.data().to_vec(),
                clinical: clinical.values,
            })
        })
        .collect();
    records
        .iter()
        .zip(raw)
        .map(|(rec, r)| {
            let r = r?;
            let k = r.clinical.len();
            Ok(PreparedPatient {
                id: rec.id.clone(),
                cohort: rec.cohort,
                label: rec.label,
                volume: Grid::new(r.vol_shape, r.vol, precision),
                clinical: Grid::new(vec![k], r.clinical, precision),
                mask: Grid::new(r.mask_shape, r.mask, precision),
            })
        })
        .collect()
}

/// Imaging training task for one stage.
pub struct ImagingTask<'a> {
    pub model: &'a Model,
    pub data: &'a [PreparedPatient],
    /// Blurred unit-sum targets aligned with `data`; required when
    /// `lambda > 0`.
    pub targets: Option<Vec<Grid>>,
    pub stage: u8,
    pub lambda: f64,
    pub precision: Precision,
}

impl<'a> ImagingTask<'a> {
    pub fn new(
        model: &'a Model,
        data: &'a [PreparedPatient],
        cfg: &StageConfig,
        precision: Precision,
    ) -> Result<ImagingTask<'a>> {
        let targets = if cfg.lambda_loc > 0.0 {
            Some(
                data.iter()
                    .map(|p| Ok(Grid::from_tensor(&make_target(&p.mask.tensor(), cfg.blur_sigma)?)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(ImagingTask {
            model,
            data,
            targets,
            stage: cfg.stage,
            lambda: cfg.lambda_loc,
            precision,
        })
    }

    fn batch(
        &self,
        store: &ParamStore,
        items: &[usize],
        tracked: bool,
    ) -> Result<(Option<TrackedBatch>, LossReport)> {
        let tape = Tape::new();
        let bound = if tracked {
            store.bind(&tape, self.precision)
        } else {
            store.bind_const(self.precision)
        };
        let mut logits = Vec::with_capacity(items.len());
        let mut maps = Vec::with_capacity(items.len());
        let mut labels = Vec::with_capacity(items.len());
        let mut targets = Vec::with_capacity(items.len());
        for &i in items {
            let pat = &self.data[i];
            let clinical_t = pat.clinical.tensor();
            let clinical = (self.stage >= 3).then_some(&clinical_t);
            let out = self
                .model
                .forward(&bound, &pat.volume.tensor(), clinical, self.stage)?;
            labels.push(pat.label);
            logits.push(out.logits);
            if self.lambda > 0.0 {
                let art = out.attention.ok_or_else(|| {
                    Error::Usage("stage >= 2 forward produced no attention map".into())
                })?;
                maps.push(art.map);
                targets.push(
                    self.targets
                        .as_ref()
                        .expect("targets exist when lambda > 0")[i]
                        .tensor(),
                );
            }
        }
        let out = composite_loss(
            &logits,
            &labels,
            (self.lambda > 0.0).then_some(&maps),
            (self.lambda > 0.0).then_some(&targets),
            self.lambda,
        )?;
        let report = out.report;
        let tb = tracked.then_some(TrackedBatch {
            loss: out.loss,
            bound,
            report,
        });
        Ok((tb, report))
    }
}

impl<'a> TrainTask for ImagingTask<'a> {
    fn tracked_batch(&self, store: &ParamStore, items: &[usize]) -> Result<TrackedBatch> {
        Ok(self.batch(store, items, true)?.0.expect("tracked batch"))
    }

    fn eval_batch(&self, store: &ParamStore, items: &[usize]) -> Result<LossReport> {
        Ok(self.batch(store, items, false)?.1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StageSummary {
    pub stage: u8,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    /// Mean training-set attention mass inside the mask at stage entry and
    /// at the best epoch (stages with localization guidance only).
    pub train_mass_entry: Option<f64>,
    pub train_mass_best: Option<f64>,
}

pub struct StepwiseState {
    /// Parameters after the last stage (its best-validation checkpoint).
    pub store: ParamStore,
    /// Best-validation parameters per completed stage, in order.
    pub stage_best: Vec<ParamStore>,
    /// Parameters each stage started from (after promotion).
    pub stage_initial: Vec<ParamStore>,
    pub summaries: Vec<StageSummary>,
    pub history: Vec<EpochRecord>,
}

/// Mean attention mass inside the true mask over `idx`, evaluated with the
/// early-attention branch (promoting the store if it predates stage 2).
pub fn mean_train_mass(
    model: &Model,
    store: &ParamStore,
    data: &[PreparedPatient],
    idx: &[usize],
    precision: Precision,
    seed: u64,
) -> Result<f64> {
    let promoted;
    let store = if store.stage() < 2 {
        promoted = store.promote(&model.cfg, 2, seed);
        &promoted
    } else {
        store
    };
    let bound = store.bind_const(precision);
    let mut total = 0.0;
    for &i in idx {
        let out = model.forward(&bound, &data[i].volume.tensor(), None, 2)?;
        let art = out.attention.expect("stage-2 forward has attention");
        total += mass_in_mask(art.map.data(), data[i].mask.data());
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Run the configured stages sequentially. Stage k (k > 1) starts from
/// stage k-1's best-validation parameters; newly introduced modules are
/// freshly initialized from the seed.
pub fn run_stepwise(
    model: &Model,
    data: &[PreparedPatient],
    train_idx: &[usize],
    val_idx: &[usize],
    cfgs: &[StageConfig],
    seed: u64,
    precision: Precision,
) -> Result<StepwiseState> {
    if cfgs.is_empty() {
        return Err(Error::Usage("no stage configs supplied".into()));
    }
    for (i, c) in cfgs.iter().enumerate() {
        c.validate()?;
        if c.stage as usize != i + 1 {
            return Err(Error::Usage(format!(
                "stage configs must be ordered 1..=n, found stage {} at position {}",
                c.stage, i
            )));
        }
    }
    let mut store = ParamStore::init(&model.cfg, 1, seed);
    if precision == Precision::F32 {
        store.quantize_f32();
    }
    let mut state = StepwiseState {
        store: store.clone(),
        stage_best: Vec::new(),
        stage_initial: Vec::new(),
        summaries: Vec::new(),
        history: Vec::new(),
    };
    for cfg in cfgs {
        if cfg.stage > store.stage() {
            store = store.promote(&model.cfg, cfg.stage, seed);
            if precision == Precision::F32 {
                store.quantize_f32();
            }
        }
        state.stage_initial.push(store.clone());
        let task = ImagingTask::new(model, data, cfg, precision)?;
        let mass_entry = if cfg.lambda_loc > 0.0 {
            Some(mean_train_mass(model, &store, data, train_idx, precision, seed)?)
        } else {
            None
        };
        let run = run_stage(&task, store, train_idx, val_idx, cfg, seed, precision)?;
        store = run.best_store.clone();
        let mass_best = if cfg.lambda_loc > 0.0 {
            Some(mean_train_mass(model, &store, data, train_idx, precision, seed)?)
        } else {
            None
        };
        state.history.extend(run.history);
        state.summaries.push(StageSummary {
            stage: cfg.stage,
            best_epoch: run.best_epoch,
            best_val: run.best_val,
            epochs_run: run.epochs_run,
            train_mass_entry: mass_entry,
            train_mass_best: mass_best,
        });
        state.stage_best.push(store.clone());
    }
    state.store = store;
    Ok(state)
}
