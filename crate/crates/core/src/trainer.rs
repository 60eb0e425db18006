//! Desk-scale training loop: Adam, plateau-triggered learning-rate decay,
//! a patch-size/quality curriculum, and warm starts across quality factors.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sample_patches, PatchBatch};
use crate::net::{
    forward, loss, BatchItem, Model, ModelCheckpoint, NetworkConfig, ParamTensor, Provenance,
};
use crate::tensor::{Scalar, Tape};

/// One curriculum stage: patch geometry, degradation strength, step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub patch_size: usize,
    pub qf: u8,
    pub steps: u64,
}

/// Training hyperparameters. The paper-faithful settings (batch 80,
/// patches up to 224) are expressible here; the defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub batch_size: usize,
    pub curriculum: Vec<CurriculumStage>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub val_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 0.001,
            lr_decay_factor: 3.0,
            plateau_patience: 3,
            batch_size: 8,
            curriculum: vec![CurriculumStage {
                patch_size: 56,
                qf: 20,
                steps: 500,
            }],
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            val_fraction: 0.0,
            val_interval: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_decay_factor <= 1.0 {
            return Err(Error::Config(format!(
                "lr_decay_factor {} must exceed 1",
                self.lr_decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.curriculum.is_empty() {
            return Err(Error::Config("curriculum must have at least one stage".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} must lie in [0, 1)",
                self.val_fraction
            )));
        }
        for (i, stage) in self.curriculum.iter().enumerate() {
            if stage.patch_size == 0 || stage.patch_size % 8 != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: patch_size {} must be a positive multiple of 8",
                    stage.patch_size
                )));
            }
            if !(1..=100).contains(&stage.qf) {
                return Err(Error::Config(format!("stage {i}: qf {} outside 1..=100", stage.qf)));
            }
            if i > 0 {
                let prev = &self.curriculum[i - 1];
                if prev.qf == stage.qf && stage.patch_size < prev.patch_size {
                    return Err(Error::Config(format!(
                        "stage {i}: patch size decreases within the qf={} stages",
                        stage.qf
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Adam first/second moments per parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &BTreeMap<String, ParamTensor<S>>) -> Self {
        let zeros = |p: &ParamTensor<S>| vec![S::ZERO; p.values.len()];
        AdamState {
            m: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            v: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Gradient, parameter, and state key sets
/// must coincide; the first mismatch is reported by name.
pub fn adam_step<S: Scalar>(
    params: &mut BTreeMap<String, ParamTensor<S>>,
    grads: &BTreeMap<String, Vec<S>>,
    state: &mut AdamState<S>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for key in params.keys() {
        if !grads.contains_key(key) {
            return Err(Error::InvalidArgument(format!("no gradient for parameter {key}")));
        }
    }
    for key in grads.keys() {
        if !params.contains_key(key) {
            return Err(Error::InvalidArgument(format!("gradient for unknown parameter {key}")));
        }
        if !state.m.contains_key(key) {
            return Err(Error::InvalidArgument(format!("no optimizer state for parameter {key}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for (key, p) in params.iter_mut() {
        let g = &grads[key];
        if g.len() != p.values.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient length {} for parameter {key} of length {}",
                g.len(),
                p.values.len()
            )));
        }
        let m = state.m.get_mut(key).unwrap();
        let v = state.v.get_mut(key).unwrap();
        for i in 0..p.values.len() {
            let gi = g[i].to_f64();
            let mi = b1 * m[i].to_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64() + (1.0 - b2) * gi * gi;
            m[i] = S::from_f64(mi);
            v[i] = S::from_f64(vi);
            let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + eps);
            p.values[i] = S::from_f64(p.values[i].to_f64() - update);
        }
    }
    Ok(())
}

/// Plateau bookkeeping: after `patience` consecutive evaluations without a
/// new minimum, the learning rate divides by `factor` and the counter
/// resets.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Resets the improvement tracking (stage boundary), keeping the rate.
    pub fn reset_tracking(&mut self) {
        self.best = None;
        self.since_best = 0;
    }

    /// Feeds one validation loss; returns `(improved, decayed)`.
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        let improved = self.best.map_or(true, |b| val_loss < b);
        if improved {
            self.best = Some(val_loss);
            self.since_best = 0;
            return (true, false);
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            self.lr /= self.factor;
            self.since_best = 0;
            return (false, true);
        }
        (false, false)
    }
}

/// Mean multi-scale loss over a fixed batch, without gradient recording.
pub fn validate(model: &Model<f32>, val_batch: &PatchBatch, net_config: &NetworkConfig) -> Result<f64> {
    if val_batch.patches.is_empty() {
        return Err(Error::InvalidArgument("validation batch is empty".into()));
    }
    let items: Vec<BatchItem> = val_batch.patches.iter().map(BatchItem::from).collect();
    let cleans: Vec<&crate::imaging::ImagePlane> = val_batch.patches.iter().map(|p| &p.clean).collect();
    let mut tape: Tape<f32> = Tape::inference();
    let out = forward(model, &mut tape, &items)?;
    let l = loss(&mut tape, &out, &cleans, net_config)?;
    Ok(tape.value(l)[0].to_f64())
}

/// Everything a finished run reports back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub best_validation_loss: Option<f64>,
    pub total_steps: u64,
}

/// First NetworkConfig field that differs, by name.
fn config_field_diff(a: &NetworkConfig, b: &NetworkConfig) -> Option<&'static str> {
    if a.pixel_depth != b.pixel_depth {
        return Some("pixel_depth");
    }
    if a.dct_depth != b.dct_depth {
        return Some("dct_depth");
    }
    if a.base_channels != b.base_channels {
        return Some("base_channels");
    }
    if a.bottleneck_dilations != b.bottleneck_dilations {
        return Some("bottleneck_dilations");
    }
    if a.r_init != b.r_init {
        return Some("r_init");
    }
    if a.prelu_init != b.prelu_init {
        return Some("prelu_init");
    }
    if a.lambda != b.lambda {
        return Some("lambda");
    }
    if a.theta != b.theta {
        return Some("theta");
    }
    if a.scales != b.scales {
        return Some("scales");
    }
    None
}

fn mix_seed(seed: u64, stage: u64, step: u64) -> u64 {
    // splitmix64 over a stage/step tagged stream
    let mut z = seed
        .wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the curriculum. Fully deterministic for a fixed
/// `(corpus, configs, seed)`; the returned checkpoint is the
/// best-validation snapshot of the final stage (final parameters when
/// validation is disabled).
pub fn train(
    corpus: &[PathBuf],
    net_config: &NetworkConfig,
    config: &TrainConfig,
    init: Option<ModelCheckpoint>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    net_config.validate()?;
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }

    let mut model: Model<f32> = match init {
        Some(ckpt) => {
            if let Some(field) = config_field_diff(&ckpt.config, net_config) {
                return Err(Error::Checkpoint(format!(
                    "init checkpoint architecture differs from the requested network config \
                     (field {field})"
                )));
            }
            ckpt.into_model()?
        }
        None => Model::build(net_config, config.seed)?,
    };

    // fixed holdout split
    let mut shuffled: Vec<PathBuf> = corpus.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, u64::MAX, 0));
    shuffled.shuffle(&mut rng);
    let val_n = ((shuffled.len() as f64) * config.val_fraction).round() as usize;
    let val_n = val_n.min(shuffled.len() - 1);
    let (val_paths, train_paths) = shuffled.split_at(val_n);
    let validation_enabled = val_n > 0 && config.val_interval > 0;

    let mut scheduler = PlateauScheduler::new(
        config.lr_init,
        config.lr_decay_factor,
        config.plateau_patience,
    );
    let mut initial_train_loss = None;
    let mut final_train_loss = f64::NAN;
    let mut best_val: Option<f64> = None;
    let mut best_params: Option<BTreeMap<String, ParamTensor<f32>>> = None;
    let mut total_steps = 0u64;

    for (stage_idx, stage) in config.curriculum.iter().enumerate() {
        scheduler.reset_tracking();
        // best-snapshot tracking restarts with the stage; earlier stages
        // solve a different objective scale
        best_val = None;
        best_params = None;
        let mut adam = AdamState::new(model.parameters());
        let val_batch = if validation_enabled {
            Some(sample_patches(
                val_paths,
                stage.patch_size,
                config.batch_size,
                stage.qf,
                mix_seed(config.seed, stage_idx as u64, u64::MAX - 1),
            )?)
        } else {
            None
        };

        for step in 0..stage.steps {
            let batch = sample_patches(
                train_paths,
                stage.patch_size,
                config.batch_size,
                stage.qf,
                mix_seed(config.seed, stage_idx as u64, step),
            )?;
            let items: Vec<BatchItem> = batch.patches.iter().map(BatchItem::from).collect();
            let cleans: Vec<&crate::imaging::ImagePlane> =
                batch.patches.iter().map(|p| &p.clean).collect();

            let mut tape: Tape<f32> = Tape::new();
            let out = forward(&model, &mut tape, &items)?;
            let l = loss(&mut tape, &out, &cleans, net_config)?;
            let train_loss = tape.value(l)[0].to_f64();
            initial_train_loss.get_or_insert(train_loss);
            final_train_loss = train_loss;

            let grads = tape.backward(l)?;
            let grad_map: BTreeMap<String, Vec<f32>> = model
                .parameters()
                .iter()
                .map(|(name, p)| {
                    let g = grads
                        .get(out.params[name])
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.values.len()]);
                    (name.clone(), g)
                })
                .collect();
            adam_step(
                model.parameters_mut(),
                &grad_map,
                &mut adam,
                scheduler.lr(),
                config,
            )?;
            total_steps += 1;

            let do_eval = validation_enabled && (step + 1) % config.val_interval == 0;
            if do_eval {
                let val_loss = validate(&model, val_batch.as_ref().unwrap(), net_config)?;
                let (_, decayed) = scheduler.observe(val_loss);
                if best_val.map_or(true, |b| val_loss < b) {
                    best_val = Some(val_loss);
                    best_params = Some(model.parameters().clone());
                }
                writeln!(
                    log,
                    "step={} stage={} lr={:.9} train_loss={:.6} val_loss={:.6}{}",
                    total_steps,
                    stage_idx,
                    scheduler.lr(),
                    train_loss,
                    val_loss,
                    if decayed { " lr_decayed=true" } else { "" }
                )
                .map_err(|e| Error::io("<log>", e))?;
            } else if (step + 1) % config.val_interval.max(1) == 0 || step + 1 == stage.steps {
                writeln!(
                    log,
                    "step={} stage={} lr={:.9} train_loss={:.6} val_loss=-",
                    total_steps,
                    stage_idx,
                    scheduler.lr(),
                    train_loss
                )
                .map_err(|e| Error::io("<log>", e))?;
            }
        }
    }

    // package the result: best validation snapshot of the final stage, or
    // the final parameters when validation is off
    if let Some(params) = best_params {
        *model.parameters_mut() = params;
    }
    model.provenance = Provenance {
        trained_qf: config.curriculum.last().map(|s| s.qf),
        step: total_steps,
        validation_loss: best_val,
    };
    Ok(TrainOutcome {
        checkpoint: model.to_checkpoint(),
        initial_train_loss: initial_train_loss.unwrap_or(f64::NAN),
        final_train_loss,
        best_validation_loss: best_val,
        total_steps,
    })
}
