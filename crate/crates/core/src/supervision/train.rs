use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{GradientBuffer, OpacityField};
use crate::geometry::Camera;
use crate::map::Map2;
use crate::renderer::{ray_seed, RenderSettings};
use crate::shadow::{render_shadow_map, shadow_forward, ComparisonConfig, MaskVariant};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::shadow_loss;
use super::weight::{distance_transform_weight, DistanceTransformConfig, WeightedMask};

/// σ_dt in effect from `start_epoch` until the next stage begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaStage {
    pub start_epoch: usize,
    pub sigma: f64,
}

/// Below this σ_dt training is known to unlearn the scene.
pub const SIGMA_FLOOR: f64 = 45.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub sigma_schedule: Vec<SigmaStage>,
    /// Camera rays per gradient chunk. Chunks are the unit of parallel work
    /// and are merged in a fixed order.
    pub batch_rays: usize,
    /// Views sharing one shadow map and one optimizer step.
    pub views_per_step: usize,
    pub seed: u64,
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub samples: usize,
    pub jitter: bool,
    /// Render the training shadow map at this square size instead of the
    /// light's native resolution.
    pub shadow_map_size: Option<usize>,
    pub shuffle: bool,
    pub variant: MaskVariant,
    pub weighting: DistanceTransformConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            epochs: 300,
            sigma_schedule: vec![
                SigmaStage {
                    start_epoch: 0,
                    sigma: 150.0,
                },
                SigmaStage {
                    start_epoch: 10,
                    sigma: 100.0,
                },
                SigmaStage {
                    start_epoch: 20,
                    sigma: 50.0,
                },
                SigmaStage {
                    start_epoch: 100,
                    sigma: 45.0,
                },
            ],
            batch_rays: 1024,
            views_per_step: 1,
            seed: 0,
            lr_decay_epoch: Some(20),
            lr_decay_factor: 0.1,
            samples: 64,
            jitter: true,
            shadow_map_size: None,
            shuffle: true,
            variant: MaskVariant::Smooth,
            weighting: DistanceTransformConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        if self.sigma_schedule.is_empty() || self.sigma_schedule[0].start_epoch != 0 {
            return Err(invalid("sigma schedule must start at epoch 0"));
        }
        for w in self.sigma_schedule.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err(invalid("sigma schedule epochs must be strictly increasing"));
            }
            if w[1].sigma >= w[0].sigma {
                return Err(invalid("sigma schedule values must be strictly decreasing"));
            }
        }
        if self.sigma_schedule.iter().any(|s| !(s.sigma > 0.0)) {
            return Err(invalid("sigma values must be positive"));
        }
        if self.batch_rays == 0 || self.views_per_step == 0 || self.samples == 0 {
            return Err(invalid(
                "batch_rays, views_per_step and samples must be positive",
            ));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(invalid("lr decay factor must be positive"));
        }
        if self.shadow_map_size == Some(0) {
            return Err(invalid("shadow map size must be positive"));
        }
        self.weighting.validate()
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch >= e => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }

    pub fn sigma_at(&self, epoch: usize) -> f64 {
        self.sigma_schedule
            .iter()
            .rev()
            .find(|s| s.start_epoch <= epoch)
            .map_or(self.sigma_schedule[0].sigma, |s| s.sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    pub id: String,
    pub camera: Camera,
    /// Binary ground-truth mask (1 = shadow).
    pub mask: Map2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub views: Vec<TrainingView>,
    pub light: Camera,
}

impl TrainingSet {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(invalid("training needs at least one view"));
        }
        self.light.validate()?;
        for v in &self.views {
            v.camera.validate()?;
            if v.mask.width != v.camera.width || v.mask.height != v.camera.height {
                return Err(crate::error::mismatch(
                    format!("{}x{}", v.camera.width, v.camera.height),
                    format!("{}x{} mask for view {}", v.mask.width, v.mask.height, v.id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub view: String,
    pub loss: f64,
    pub sigma_dt: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<LossRecord>,
    /// Mean per-view loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sigma_dt: f64,
    pub lr: f64,
    /// Per-view losses of this epoch.
    pub records: Vec<LossRecord>,
}

/// Seed of the render noise for one optimizer step.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    ray_seed(ray_seed(seed, epoch as u64), step as u64)
}

fn weigh_targets(
    data: &TrainingSet,
    sigma: f64,
    cfg: &DistanceTransformConfig,
) -> Result<Vec<WeightedMask>> {
    data.views
        .iter()
        .map(|v| distance_transform_weight(&v.mask, sigma, cfg, &v.id))
        .collect()
}

/// Where an interrupted run stands: the next epoch to run and the
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub next_epoch: usize,
    pub adam: AdamState,
}

impl TrainProgress {
    pub fn start<F: OpacityField + ?Sized>(field: &F) -> Self {
        Self {
            next_epoch: 0,
            adam: AdamState::new(field.num_params()),
        }
    }
}

/// Optimize `field` so that its predicted shadow masks match the training
/// masks. `observer` runs after every epoch and may write checkpoints or
/// validation renders; an error from it aborts training.
pub fn fit<F: OpacityField + ?Sized>(
    data: &TrainingSet,
    field: &mut F,
    cfg: &TrainConfig,
    cmp: &ComparisonConfig,
    observer: &mut dyn FnMut(&EpochSummary, &F) -> Result<()>,
) -> Result<TrainHistory> {
    let mut progress = TrainProgress::start(field);
    fit_from(data, field, cfg, cmp, &mut progress, &mut |s, f, _| {
        observer(s, f)
    })
}

/// [`fit`] continuing from `progress`, which is advanced after every epoch.
/// Every epoch's randomness derives from the seed and the epoch index, so a
/// resumed run reproduces the uninterrupted one exactly.
pub fn fit_from<F: OpacityField + ?Sized>(
    data: &TrainingSet,
    field: &mut F,
    cfg: &TrainConfig,
    cmp: &ComparisonConfig,
    progress: &mut TrainProgress,
    observer: &mut dyn FnMut(&EpochSummary, &F, &TrainProgress) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    cmp.validate()?;
    data.validate()?;
    if cfg.sigma_schedule.iter().any(|s| s.sigma < SIGMA_FLOOR) {
        warn!("sigma schedule goes below {SIGMA_FLOOR}; training may diverge");
    }
    let light = match cfg.shadow_map_size {
        Some(s) => data.light.resized(s, s)?,
        None => data.light.clone(),
    };
    if progress.adam.m.len() != field.num_params() || progress.adam.v.len() != field.num_params() {
        return Err(crate::error::mismatch(
            field.num_params(),
            progress.adam.m.len(),
        ));
    }
    let mut history = TrainHistory::default();
    let mut sigma = f64::NAN;
    let mut targets = Vec::new();
    let mut order: Vec<usize> = (0..data.views.len()).collect();

    for epoch in progress.next_epoch..cfg.epochs {
        let s = cfg.sigma_at(epoch);
        if s != sigma {
            sigma = s;
            targets = weigh_targets(data, sigma, &cfg.weighting)?;
            debug!("epoch {epoch}: targets re-weighted at sigma_dt = {sigma}");
        }
        let adam = cfg.adam(epoch);
        if cfg.shuffle {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(ray_seed(
                cfg.seed,
                epoch as u64,
            )));
        }
        let mut epoch_sum = 0.0;
        let first_record = history.records.len();
        for (step, group) in order.chunks(cfg.views_per_step).enumerate() {
            let settings = RenderSettings {
                samples: cfg.samples,
                jitter: cfg.jitter,
                seed: step_seed(cfg.seed, epoch, step),
            };
            let shadow_map = render_shadow_map(field, &light, &settings)?;
            let mut grads = GradientBuffer::for_field(field);
            let mut dz_light = vec![0.0; shadow_map.rays.len()];
            let scale = 1.0 / group.len() as f64;
            for &vi in group {
                let view = &data.views[vi];
                let fwd = shadow_forward(field, &view.camera, &shadow_map, cmp, &settings, None)?;
                let pred = fwd.prediction.mask(cfg.variant);
                let (loss, d_mask) =
                    shadow_loss(pred, &targets[vi].weights).map_err(|e| match e {
                        Error::Numerical(m) => {
                            Error::Numerical(format!("epoch {epoch}, view {}: {m}", view.id))
                        }
                        other => other,
                    })?;
                let d_mask = d_mask.map(|g| g * scale);
                let (dz_cam, dz_l) = fwd.depth_grads(&d_mask, cfg.variant, cmp)?;
                fwd.camera
                    .backward(field, &dz_cam, cfg.batch_rays, &mut grads)?;
                for (a, b) in dz_light.iter_mut().zip(&dz_l) {
                    *a += b;
                }
                epoch_sum += loss;
                history.records.push(LossRecord {
                    epoch,
                    view: view.id.clone(),
                    loss,
                    sigma_dt: sigma,
                    lr: adam.lr,
                });
            }
            shadow_map.backward(field, &dz_light, cfg.batch_rays, &mut grads)?;
            if grads.data.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            adam_step(field.params_mut(), &grads.data, &mut progress.adam, &adam)?;
        }
        let mean_loss = epoch_sum / data.views.len() as f64;
        history.epoch_loss.push(mean_loss);
        info!(
            "epoch {epoch}: loss {mean_loss:.6} sigma_dt {sigma} lr {}",
            adam.lr
        );
        progress.next_epoch = epoch + 1;
        observer(
            &EpochSummary {
                epoch,
                mean_loss,
                sigma_dt: sigma,
                lr: adam.lr,
                records: history.records[first_record..].to_vec(),
            },
            field,
            progress,
        )?;
    }
    Ok(history)
}

/// Mean loss of `field` over `views` without updating it: against targets
/// weighted at `sigma`, or against the raw masks (plain mask MSE) when
/// `sigma` is `None`. Rendering uses the training sample count without
/// jitter, so the value is deterministic.
pub fn evaluate_loss<F: OpacityField + ?Sized>(
    views: &[TrainingView],
    light: &Camera,
    field: &F,
    cfg: &TrainConfig,
    cmp: &ComparisonConfig,
    sigma: Option<f64>,
) -> Result<f64> {
    if views.is_empty() {
        return Err(invalid("no views to evaluate"));
    }
    let light = match cfg.shadow_map_size {
        Some(s) => light.resized(s, s)?,
        None => light.clone(),
    };
    let settings = RenderSettings {
        samples: cfg.samples,
        jitter: false,
        seed: cfg.seed,
    };
    let shadow_map = render_shadow_map(field, &light, &settings)?;
    let mut sum = 0.0;
    for view in views {
        let fwd = shadow_forward(field, &view.camera, &shadow_map, cmp, &settings, None)?;
        let pred = fwd.prediction.mask(cfg.variant);
        let loss = match sigma {
            Some(s) => {
                shadow_loss(
                    pred,
                    &distance_transform_weight(&view.mask, s, &cfg.weighting, &view.id)?.weights,
                )?
                .0
            }
            None => shadow_loss(pred, &view.mask)?.0,
        };
        sum += loss;
    }
    Ok(sum / views.len() as f64)
}
