//! Staged training: SGD with momentum and weight decay, pre-training of
//! the shape head, pre-training of the transformer head from the mean
//! shape, and joint training of the cascade.
//!
//! Every stage runs two phases. The first trains only the new head on
//! frozen features; the second also unfreezes the convolution stack (and,
//! in the joint stage, the shape head).
//!
//! All randomness is drawn from streams derived from
//! `(seed, stage, phase, epoch, sample)`, and per-sample gradients are
//! summed in sample order, so a run is reproducible regardless of thread
//! count and can be resumed from any epoch boundary.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{validate_mirror, Sample};
use crate::error::{DdnError, Result};
use crate::image::Image;
use crate::linalg::{derive_seed, seeded_rng, Rng};
use crate::network::{
    backward_heads_into, backward_into, forward, ForwardMode, NetworkConfig, NetworkParams, OutputGrads, ParamGroup,
};
use crate::shape::{sbn_loss, sbn_loss_grad, LandmarkSet, ShapeBasis, DEFAULT_COEFF_LAMBDA};
use crate::tps::{
    synthesize_control_targets_with, tps_loss_grad, tps_regularized_loss, ControlGrid, TpsFitter, TpsLossWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Sbn,
    Ptn,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sbn => "sbn",
            Stage::Ptn => "ptn",
            Stage::Joint => "joint",
        }
    }

    /// Position in the training order sbn, ptn, joint.
    pub fn order(self) -> usize {
        match self {
            Stage::Sbn => 0,
            Stage::Ptn => 1,
            Stage::Joint => 2,
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Stage::Sbn => 1,
            Stage::Ptn => 2,
            Stage::Joint => 3,
        }
    }

    /// Trainable groups in phase 0 (frozen features) and phase 1.
    pub fn phase_groups(self, phase: usize) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match (self, phase) {
            (Stage::Sbn, 0) => &[SbnHead],
            (Stage::Sbn, _) => &[Conv, SbnHead],
            (Stage::Ptn, 0) => &[PtnHead],
            (Stage::Ptn, _) => &[Conv, PtnHead],
            (Stage::Joint, 0) => &[PtnHead],
            (Stage::Joint, _) => &[Conv, SbnHead, PtnHead],
        }
    }

    pub fn forward_mode(self) -> ForwardMode {
        match self {
            Stage::Sbn => ForwardMode::Sbn,
            Stage::Ptn => ForwardMode::PtnFromMean,
            Stage::Joint => ForwardMode::Cascade,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbn" => Ok(Stage::Sbn),
            "ptn" => Ok(Stage::Ptn),
            "joint" => Ok(Stage::Joint),
            other => Err(DdnError::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Random crop, rotation and flip applied identically to pixels and
/// landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Uniform translation range in pixels, each axis.
    pub translation: f64,
    /// Uniform rotation range in degrees, about the image centre.
    pub rotation: f64,
    pub flip_probability: f64,
    /// Landmark permutation applied by a horizontal flip. A run
    /// configuration fills an empty list from its dataset section.
    pub mirror: Vec<usize>,
    /// Redraws allowed when a landmark leaves the frame before the sample
    /// is skipped.
    pub max_retries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            translation: 0.0,
            rotation: 0.0,
            flip_probability: 0.5,
            mirror: Vec::new(),
            max_retries: 10,
        }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.translation == 0.0 && self.rotation == 0.0 && self.flip_probability == 0.0
    }

    pub fn validate(&self, landmarks: usize) -> Result<()> {
        if !(self.translation >= 0.0 && self.rotation >= 0.0) || !self.translation.is_finite() || !self.rotation.is_finite() {
            return Err(DdnError::Config("augmentation ranges must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(DdnError::Config("flip probability must lie in [0, 1]".into()));
        }
        if self.flip_probability > 0.0 {
            validate_mirror(&self.mirror, landmarks)?;
        }
        Ok(())
    }
}

/// Applies one random geometric transform to an image and its landmarks.
///
/// Returns `None` when every draw pushed a landmark out of the frame; the
/// caller should skip the sample.
pub fn augment_sample(config: &AugmentConfig, image: &Image, landmarks: &LandmarkSet, rng: &mut Rng) -> Result<Option<(Image, LandmarkSet)>> {
    config.validate(landmarks.len())?;
    if config.is_identity() {
        return Ok(Some((image.clone(), landmarks.clone())));
    }
    let (w, h) = ((image.width() - 1) as f64, (image.height() - 1) as f64);
    let c = [w / 2.0, h / 2.0];
    for _ in 0..=config.max_retries {
        let theta = if config.rotation > 0.0 { rng.gen_range(-config.rotation..=config.rotation).to_radians() } else { 0.0 };
        let mut t = [0.0; 2];
        if config.translation > 0.0 {
            for v in &mut t {
                *v = rng.gen_range(-config.translation..=config.translation);
            }
        }
        let flip = config.flip_probability > 0.0 && rng.gen_bool(config.flip_probability);
        let (sin, cos) = theta.sin_cos();
        let fwd = |p: [f64; 2]| {
            let (x, y) = (p[0] - c[0], p[1] - c[1]);
            let q = [cos * x - sin * y + c[0] + t[0], sin * x + cos * y + c[1] + t[1]];
            if flip {
                [w - q[0], q[1]]
            } else {
                q
            }
        };
        let moved = landmarks.map(fwd);
        let out = if flip {
            LandmarkSet::new((0..moved.len()).map(|i| moved.point(config.mirror[i])).collect())?
        } else {
            moved
        };
        let inside = out.points().iter().all(|p| p[0] >= 0.0 && p[0] <= w && p[1] >= 0.0 && p[1] <= h);
        if !inside {
            continue;
        }
        let warped = image.resample(image.width(), image.height(), |u, v| {
            let u = if flip { w - u } else { u };
            let (x, y) = (u - c[0] - t[0], v - c[1] - t[1]);
            (cos * x + sin * y + c[0], -sin * x + cos * y + c[1])
        });
        return Ok(Some((warped, out)));
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Learning rate while only a head is trained.
    pub lr_head: f64,
    /// Learning rate once the convolution stack is unfrozen.
    pub lr_full: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Largest L2 norm of a batch gradient over the trainable groups;
    /// longer gradients are rescaled. Zero disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Epochs with the convolution stack frozen.
    pub epochs_frozen: usize,
    /// Epochs after unfreezing.
    pub epochs_unfrozen: usize,
    /// End a phase early once the training loss improves by less than 0.1%
    /// over three epochs.
    pub plateau: bool,
    /// Weight of the coefficient penalty in the shape-head loss.
    pub lambda: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr_head: 3e-4,
            lr_full: 1e-5,
            momentum: 0.9,
            weight_decay: 0.004,
            clip_norm: 300.0,
            batch_size: 16,
            epochs_frozen: 10,
            epochs_unfrozen: 10,
            plateau: false,
            lambda: DEFAULT_COEFF_LAMBDA,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DdnError::Config(m.into()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if ![self.lr_head, self.lr_full, self.weight_decay, self.lambda, self.clip_norm].iter().all(|v| *v >= 0.0 && v.is_finite()) {
            return bad("learning rates, weight decay, clip norm and lambda must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.epochs_frozen == 0 || self.epochs_unfrozen == 0 {
            return bad("each phase needs at least one epoch");
        }
        Ok(())
    }

    pub fn schedule(&self, stage: Stage, seed: u64) -> TrainSchedule {
        TrainSchedule {
            stage,
            epochs: [self.epochs_frozen, self.epochs_unfrozen],
            learning_rate: [self.lr_head, self.lr_full],
            batch_size: self.batch_size,
            groups: [stage.phase_groups(0).to_vec(), stage.phase_groups(1).to_vec()],
            plateau: self.plateau,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub stage: Stage,
    pub epochs: [usize; 2],
    pub learning_rate: [f64; 2],
    pub batch_size: usize,
    /// Trainable groups per phase; everything else is frozen.
    pub groups: [Vec<ParamGroup>; 2],
    pub plateau: bool,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.contains(&0) {
            return Err(DdnError::Config("each phase needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(DdnError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: NetworkParams,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(DdnError::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        })
    }
}

/// One momentum step on the tensors of the `active` groups:
/// `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
pub fn sgd_step(state: &mut OptimizerState, params: &mut NetworkParams, grads: &NetworkParams, active: &[ParamGroup]) -> Result<()> {
    let g = grads.tensors();
    let shapes_match = {
        let p = params.tensors();
        let v = state.velocity.tensors();
        p.len() == g.len()
            && p.len() == v.len()
            && p.iter().zip(&g).zip(&v).all(|((a, b), c)| a.data.len() == b.data.len() && a.data.len() == c.data.len())
    };
    if !shapes_match {
        return Err(DdnError::shape("gradients do not match the parameter layout"));
    }
    if let Some(t) = g.iter().find(|t| active.contains(&t.group) && t.data.iter().any(|v| !v.is_finite())) {
        return Err(DdnError::Divergence {
            group: t.group.as_str().to_string(),
            epoch: 0,
        });
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, gt), v) in params.tensors_mut().into_iter().zip(&g).zip(state.velocity.tensors_mut()) {
        if !active.contains(&p.group) {
            continue;
        }
        for ((theta, grad), vel) in p.data.iter_mut().zip(gt.data).zip(v.data.iter_mut()) {
            *vel = mu * *vel - lr * (grad + wd * *theta);
            *theta += *vel;
        }
    }
    Ok(())
}

/// Per-sample losses of the three stages.
#[derive(Debug, Clone)]
pub struct Objective {
    pub basis: ShapeBasis,
    pub grid: ControlGrid,
    pub lambda: f64,
    pub weights: TpsLossWeights,
    /// Fits mean-to-truth transforms for the control-point targets.
    fitter: TpsFitter,
}

impl Objective {
    pub fn new(basis: &ShapeBasis, grid: &ControlGrid, lambda: f64, weights: TpsLossWeights) -> Result<Self> {
        weights.validate()?;
        let fitter = TpsFitter::anchored(&basis.mean_shape(), weights.gamma)?;
        Ok(Objective {
            basis: basis.clone(),
            grid: grid.clone(),
            lambda,
            weights,
            fitter,
        })
    }

    /// Control-point targets: the grid warped by the mean-to-truth fit.
    pub fn control_targets(&self, truth: &LandmarkSet) -> Result<LandmarkSet> {
        self.fitter.warp(truth, &self.grid.as_landmarks())
    }

    /// Control-point targets for a transform that starts from `source`
    /// rather than the mean. Treated as constants by the gradient.
    pub fn control_targets_from(&self, source: &LandmarkSet, truth: &LandmarkSet) -> Result<LandmarkSet> {
        synthesize_control_targets_with(source, truth, &self.grid, self.weights.gamma)
    }

    /// Loss of one sample and, when `grads` is given, its gradient added
    /// into `grads` (convolution gradients only if `conv` is set).
    pub fn evaluate(&self, params: &NetworkParams, stage: Stage, image: &Image, truth: &LandmarkSet, grads: Option<(&mut NetworkParams, bool)>) -> Result<f64> {
        self.evaluate_with(params, stage, image, truth, None, grads)
    }

    /// Control-point targets the objective would use for this sample at
    /// the current parameters (`None` for the shape stage).
    pub fn targets_for(&self, params: &NetworkParams, stage: Stage, image: &Image, truth: &LandmarkSet) -> Result<Option<LandmarkSet>> {
        Ok(match stage {
            Stage::Sbn => None,
            Stage::Ptn => Some(self.control_targets(truth)?),
            Stage::Joint => {
                let fw = forward(params, image, &self.basis, &self.grid, ForwardMode::Sbn)?;
                Some(self.control_targets_from(&fw.coarse, truth)?)
            }
        })
    }

    /// As [`Objective::evaluate`], with the control-point targets held at
    /// `targets` when given.
    pub fn evaluate_with(
        &self,
        params: &NetworkParams,
        stage: Stage,
        image: &Image,
        truth: &LandmarkSet,
        targets: Option<&LandmarkSet>,
        grads: Option<(&mut NetworkParams, bool)>,
    ) -> Result<f64> {
        let fw = forward(params, image, &self.basis, &self.grid, stage.forward_mode())?;
        let (loss, upstream) = match stage {
            Stage::Sbn => {
                let x = &fw.trace.sbn().expect("shape head ran").coeffs;
                let loss = sbn_loss(&self.basis, x, truth, self.lambda)?;
                let up = match grads {
                    Some(_) => OutputGrads {
                        coeffs: Some(sbn_loss_grad(&self.basis, x, truth, self.lambda)?),
                        ..Default::default()
                    },
                    None => OutputGrads::default(),
                };
                (loss, up)
            }
            Stage::Ptn | Stage::Joint => {
                let ptn = fw.trace.ptn().expect("transformer head ran");
                let targets = match (targets, stage) {
                    (Some(t), _) => t.clone(),
                    (None, Stage::Joint) => self.control_targets_from(&ptn.source, truth)?,
                    (None, _) => self.control_targets(truth)?,
                };
                let t = &ptn.transform;
                let loss = tps_regularized_loss(t, &ptn.source, truth, t, &targets, &self.weights)?;
                let up = match grads {
                    Some(_) => {
                        let g = tps_loss_grad(t, &ptn.source, truth, t, &targets, &self.weights)?;
                        let coarse = (stage == Stage::Joint)
                            .then(|| (0..g.src.cols()).flat_map(|i| [g.src[(0, i)], g.src[(1, i)]]).collect());
                        OutputGrads {
                            transform: Some(g.shared()),
                            coarse,
                            ..Default::default()
                        }
                    }
                    None => OutputGrads::default(),
                };
                (loss, up)
            }
        };
        if let Some((buf, conv)) = grads {
            if conv {
                backward_into(params, fw.trace, &upstream, buf)?;
            } else {
                backward_heads_into(params, fw.trace, &upstream, buf)?;
            }
        }
        Ok(loss)
    }
}

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// Epoch index within the stage.
    pub epoch: usize,
    pub phase: usize,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,phase,train_loss,heldout_loss\n");
    for r in curve {
        let held = r.heldout_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.phase, r.train_loss, held));
    }
    s
}

/// Everything needed to continue a stage from an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub velocity: NetworkParams,
    /// Phase of the next epoch.
    pub phase: usize,
    /// Epoch index within `phase` of the next epoch.
    pub phase_epoch: usize,
    pub curve: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: NetworkParams) -> Self {
        let velocity = params.zeros_like();
        TrainState {
            params,
            velocity,
            phase: 0,
            phase_epoch: 0,
            curve: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase >= 2
    }
}

/// Rescales the `active` part of `grads` to L2 norm at most `max_norm`
/// (no-op when `max_norm` is zero) and returns the norm before clipping.
pub fn clip_gradient(grads: &mut NetworkParams, active: &[ParamGroup], max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .filter(|t| active.contains(&t.group))
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for t in grads.tensors_mut() {
            if active.contains(&t.group) {
                t.data.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// Runs the epochs of one stage.
pub struct Trainer<'a> {
    pub schedule: TrainSchedule,
    pub objective: &'a Objective,
    pub augment: &'a AugmentConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

fn with_epoch(e: DdnError, epoch: usize) -> DdnError {
    match e {
        DdnError::Divergence { group, .. } => DdnError::Divergence { group, epoch },
        other => other,
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainerConfig, stage: Stage, seed: u64, objective: &'a Objective) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            schedule: config.schedule(stage, seed),
            objective,
            augment: &config.augment,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
        })
    }

    fn stage(&self) -> Stage {
        self.schedule.stage
    }

    /// Mean loss over `samples` without augmentation.
    pub fn mean_loss(&self, params: &NetworkParams, samples: &[Sample]) -> Result<f64> {
        let losses: Vec<f64> = samples
            .par_iter()
            .map(|s| self.objective.evaluate(params, self.stage(), &s.image, &s.truth, None))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
    }

    /// Trains one epoch and appends its record.
    pub fn run_epoch(&self, state: &mut TrainState, train: &[Sample], heldout: &[Sample]) -> Result<()> {
        if state.is_done() {
            return Ok(());
        }
        if train.is_empty() {
            return Err(DdnError::Config("training set is empty".into()));
        }
        self.schedule.validate()?;
        let stage = self.stage();
        let phase = state.phase;
        let epoch = state.curve.len();
        let groups = &self.schedule.groups[phase];
        let conv = groups.contains(&ParamGroup::Conv);
        let epoch_seed = derive_seed(self.schedule.seed, &[stage.stream_id(), phase as u64, state.phase_epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeded_rng(epoch_seed));

        let mut opt = OptimizerState {
            learning_rate: self.schedule.learning_rate[phase],
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            velocity: std::mem::replace(&mut state.velocity, state.params.zeros_like()),
        };
        let mut losses = vec![f64::NAN; train.len()];
        let mut used = vec![false; train.len()];
        let diverged = || DdnError::Divergence {
            group: groups.iter().map(|g| g.as_str()).collect::<Vec<_>>().join("+"),
            epoch,
        };
        for batch in order.chunks(self.schedule.batch_size) {
            let params = &state.params;
            let results: Vec<Option<(usize, f64, NetworkParams)>> = batch
                .par_iter()
                .map(|&i| -> Result<_> {
                    let mut rng = seeded_rng(derive_seed(epoch_seed, &[i as u64]));
                    let s = &train[i];
                    let Some((image, truth)) = augment_sample(self.augment, &s.image, &s.truth, &mut rng)? else {
                        return Ok(None);
                    };
                    let mut g = params.zeros_like();
                    let loss = self.objective.evaluate(params, stage, &image, &truth, Some((&mut g, conv)))?;
                    Ok(Some((i, loss, g)))
                })
                .collect::<Result<_>>()
                // updated weights that drive the transform non-finite
                .map_err(|e| if matches!(e, DdnError::Domain(_)) { diverged() } else { e })?;
            let mut total: Option<NetworkParams> = None;
            let mut count = 0usize;
            for (i, loss, g) in results.into_iter().flatten() {
                if !loss.is_finite() {
                    return Err(diverged());
                }
                losses[i] = loss;
                used[i] = true;
                count += 1;
                match &mut total {
                    Some(t) => t.accumulate(&g),
                    None => total = Some(g),
                }
            }
            let Some(mut total) = total else { continue };
            total.scale_all(1.0 / count as f64);
            clip_gradient(&mut total, groups, self.clip_norm);
            sgd_step(&mut opt, &mut state.params, &total, groups).map_err(|e| with_epoch(e, epoch))?;
        }
        state.velocity = opt.velocity;
        let n_used = used.iter().filter(|u| **u).count();
        let train_loss = if n_used == 0 {
            f64::NAN
        } else {
            losses.iter().zip(&used).filter(|(_, u)| **u).map(|(l, _)| l).sum::<f64>() / n_used as f64
        };
        if n_used > 0 && !train_loss.is_finite() || !state.params.is_finite() {
            return Err(diverged());
        }
        let heldout_loss = if heldout.is_empty() { None } else { Some(self.mean_loss(&state.params, heldout)?) };
        state.curve.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            heldout_loss,
        });
        state.phase_epoch += 1;
        if state.phase_epoch >= self.schedule.epochs[phase] || self.plateaued(state) {
            state.phase += 1;
            state.phase_epoch = 0;
        }
        Ok(())
    }

    fn plateaued(&self, state: &TrainState) -> bool {
        if !self.schedule.plateau || state.phase_epoch < 4 {
            return false;
        }
        let phase_losses: Vec<f64> = state.curve.iter().filter(|r| r.phase == state.phase).map(|r| r.train_loss).collect();
        let k = phase_losses.len();
        let (before, now) = (phase_losses[k - 4], phase_losses[k - 1]);
        before > 0.0 && (before - now) / before < 1e-3
    }

    /// Runs until the stage is done, or at most `max_epochs` epochs.
    pub fn run(&self, mut state: TrainState, train: &[Sample], heldout: &[Sample], max_epochs: Option<usize>) -> Result<TrainState> {
        let mut n = 0;
        while !state.is_done() && max_epochs.map_or(true, |m| n < m) {
            self.run_epoch(&mut state, train, heldout)?;
            n += 1;
        }
        Ok(state)
    }
}

/// Settings shared by the stage entry points.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub objective: Objective,
    pub seed: u64,
}

impl TrainContext {
    pub fn new(network: NetworkConfig, trainer: TrainerConfig, basis: &ShapeBasis, grid: &ControlGrid, weights: TpsLossWeights, seed: u64) -> Result<Self> {
        trainer.validate()?;
        trainer.augment.validate(basis.landmark_count())?;
        let objective = Objective::new(basis, grid, trainer.lambda, weights)?;
        Ok(TrainContext {
            network,
            trainer,
            objective,
            seed,
        })
    }

    /// Freshly initialized parameters for this context.
    pub fn init_params(&self, train_count: usize) -> Result<NetworkParams> {
        let mut rng = seeded_rng(derive_seed(self.seed, &[0]));
        NetworkParams::init(&self.network, &self.objective.basis, &self.objective.grid, train_count, &mut rng)
    }

    pub fn trainer(&self, stage: Stage) -> Result<Trainer<'_>> {
        Trainer::new(&self.trainer, stage, self.seed, &self.objective)
    }
}

/// Copies the tensors of `groups` from `src` into `dst`.
pub fn copy_groups(dst: &mut NetworkParams, src: &NetworkParams, groups: &[ParamGroup]) -> Result<()> {
    let s = src.tensors();
    let mut d = dst.tensors_mut();
    for g in groups {
        let from: Vec<_> = s.iter().filter(|t| t.group == *g).collect();
        let to: Vec<_> = d.iter_mut().filter(|t| t.group == *g).collect();
        if from.len() != to.len() || from.iter().zip(&to).any(|(a, b)| a.data.len() != b.data.len()) {
            return Err(DdnError::Contract(format!("{} tensors of the two networks differ in shape", g.as_str())));
        }
        for (a, b) in from.into_iter().zip(to) {
            b.data.copy_from_slice(a.data);
        }
    }
    Ok(())
}

/// Trains the shape head on frozen features, then together with the
/// convolution stack.
pub fn pretrain_sbn(ctx: &TrainContext, train: &[Sample], heldout: &[Sample]) -> Result<(NetworkParams, Vec<EpochRecord>)> {
    let state = TrainState::new(ctx.init_params(train.len())?);
    let out = ctx.trainer(Stage::Sbn)?.run(state, train, heldout, None)?;
    Ok((out.params, out.curve))
}

/// Initial parameters of the transformer pre-training: the convolution
/// stack of the pre-trained shape network and a fresh transformer head.
pub fn ptn_init(ctx: &TrainContext, sbn: &NetworkParams, train_count: usize) -> Result<NetworkParams> {
    let mut p = ctx.init_params(train_count)?;
    copy_groups(&mut p, sbn, &[ParamGroup::Conv, ParamGroup::SbnHead])?;
    p.set_coeff_scale(sbn.coeff_scale().to_vec())?;
    Ok(p)
}

/// Trains the transformer head to warp the mean shape onto the truth.
pub fn pretrain_ptn(ctx: &TrainContext, train: &[Sample], heldout: &[Sample], sbn: &NetworkParams) -> Result<(NetworkParams, Vec<EpochRecord>)> {
    let state = TrainState::new(ptn_init(ctx, sbn, train.len())?);
    let out = ctx.trainer(Stage::Ptn)?.run(state, train, heldout, None)?;
    Ok((out.params, out.curve))
}

/// Combines the pre-trained networks: convolution stack and shape head
/// from `sbn`, transformer head from `ptn`.
pub fn merge_pretrained(sbn: &NetworkParams, ptn: &NetworkParams) -> Result<NetworkParams> {
    let mut p = ptn.clone();
    copy_groups(&mut p, sbn, &[ParamGroup::Conv, ParamGroup::SbnHead])?;
    p.set_coeff_scale(sbn.coeff_scale().to_vec())?;
    Ok(p)
}

/// Trains the cascade against the regularized transform loss at its output.
pub fn train_joint(ctx: &TrainContext, train: &[Sample], heldout: &[Sample], init: NetworkParams) -> Result<(NetworkParams, Vec<EpochRecord>)> {
    let out = ctx.trainer(Stage::Joint)?.run(TrainState::new(init), train, heldout, None)?;
    Ok((out.params, out.curve))
}
