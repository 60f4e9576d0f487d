//! End-to-end helpers: prediction with a chosen head, evaluation, and the
//! full staged run behind the ablation (shape head alone, transformer
//! alone, affine cascade, thin-plate-spline cascade).

use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::error::{DdnError, Result};
use crate::eval::{comparison_table, mean_normalized_error, pck, PckReport};
use crate::image::Image;
use crate::network::{forward, ForwardMode, NetworkParams, TransformKind};
use crate::shape::{build_shape_basis, LandmarkSet, ShapeBasis};
use crate::tps::ControlGrid;
use crate::trainer::{merge_pretrained, pretrain_ptn, pretrain_sbn, train_joint, EpochRecord, TrainContext};

/// Which output of the network is read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Shape-head output.
    Sbn,
    /// Transformer applied to the mean shape.
    Ptn,
    /// Transformer applied to the shape-head output.
    Full,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Sbn => "sbn",
            Head::Ptn => "ptn",
            Head::Full => "full",
        }
    }

    fn mode(self) -> ForwardMode {
        match self {
            Head::Sbn => ForwardMode::Sbn,
            Head::Ptn => ForwardMode::PtnFromMean,
            Head::Full => ForwardMode::Cascade,
        }
    }
}

impl std::str::FromStr for Head {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sbn" => Ok(Head::Sbn),
            "ptn" => Ok(Head::Ptn),
            "full" => Ok(Head::Full),
            other => Err(DdnError::Config(format!("unknown head {other:?}"))),
        }
    }
}

pub fn predict(params: &NetworkParams, basis: &ShapeBasis, grid: &ControlGrid, image: &Image, head: Head) -> Result<LandmarkSet> {
    Ok(forward(params, image, basis, grid, head.mode())?.refined)
}

pub fn predict_all(params: &NetworkParams, basis: &ShapeBasis, grid: &ControlGrid, samples: &[Sample], head: Head) -> Result<Vec<LandmarkSet>> {
    samples
        .par_iter()
        .map(|s| predict(params, basis, grid, &s.image, head))
        .collect()
}

/// PCK report and mean normalized error (percent) of `predictions`.
pub fn score(predictions: &[LandmarkSet], samples: &[Sample], alphas: &[f64]) -> Result<(PckReport, f64)> {
    let truths: Vec<LandmarkSet> = samples.iter().map(|s| s.truth.clone()).collect();
    let norms: Vec<f64> = samples.iter().map(|s| s.normalizer).collect();
    Ok((pck(predictions, &truths, &norms, alphas)?, mean_normalized_error(predictions, &truths, &norms)?))
}

pub fn evaluate(params: &NetworkParams, basis: &ShapeBasis, grid: &ControlGrid, samples: &[Sample], head: Head, alphas: &[f64]) -> Result<(PckReport, f64)> {
    score(&predict_all(params, basis, grid, samples, head)?, samples, alphas)
}

pub fn shape_basis(cfg: &RunConfig, train: &[Sample]) -> Result<ShapeBasis> {
    let shapes: Vec<LandmarkSet> = train.iter().map(|s| s.truth.clone()).collect();
    build_shape_basis(&shapes, cfg.shape.energy_fraction)
}

pub fn control_grid(cfg: &RunConfig) -> Result<ControlGrid> {
    cfg.tps.grid(cfg.network.conv.input_size)
}

/// Context for one transform variant.
pub fn train_context(cfg: &RunConfig, basis: &ShapeBasis, transform: TransformKind) -> Result<TrainContext> {
    let mut network = cfg.network.clone();
    network.transform = transform;
    TrainContext::new(network, cfg.trainer.clone(), basis, &control_grid(cfg)?, cfg.tps.weights(), cfg.seed)
}

/// Outcome of one trained model in the ablation.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub method: String,
    pub report: PckReport,
    pub mean_error: f64,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Loss curves by stage name.
    pub curves: Vec<(String, Vec<EpochRecord>)>,
    pub seconds: f64,
}

impl Ablation {
    pub fn row(&self, method: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(&str, &PckReport)> = self.rows.iter().map(|r| (r.method.as_str(), &r.report)).collect();
        comparison_table(&rows).expect("ablation reports share their alphas")
    }
}

/// Trains every stage of both transform variants and evaluates the four
/// methods on `test`. `log` receives one line per finished stage.
pub fn run_ablation(cfg: &RunConfig, train: &[Sample], test: &[Sample], mut log: impl FnMut(&str)) -> Result<Ablation> {
    let start = Instant::now();
    let basis = shape_basis(cfg, train)?;
    let grid = control_grid(cfg)?;
    let alphas = &cfg.eval.alphas;
    let tps = train_context(cfg, &basis, TransformKind::Tps)?;
    let affine = train_context(cfg, &basis, TransformKind::Affine)?;
    let mut curves = Vec::new();
    let mut stage_done = |name: &str, curve: Vec<EpochRecord>, curves: &mut Vec<(String, Vec<EpochRecord>)>| {
        let last = curve.last().map_or(f64::NAN, |r| r.train_loss);
        log(&format!("{name}: {} epochs, final train loss {last:.4}, {:.1}s", curve.len(), start.elapsed().as_secs_f64()));
        curves.push((name.to_string(), curve));
    };

    let (sbn, c) = pretrain_sbn(&tps, train, &[])?;
    stage_done("sbn", c, &mut curves);
    let (ptn, c) = pretrain_ptn(&tps, train, &[], &sbn)?;
    stage_done("ptn", c, &mut curves);
    let (joint, c) = train_joint(&tps, train, &[], merge_pretrained(&sbn, &ptn)?)?;
    stage_done("joint", c, &mut curves);
    let (ptn_a, c) = pretrain_ptn(&affine, train, &[], &sbn)?;
    stage_done("ptn-affine", c, &mut curves);
    let (joint_a, c) = train_joint(&affine, train, &[], merge_pretrained(&sbn, &ptn_a)?)?;
    stage_done("joint-affine", c, &mut curves);

    let mut rows = Vec::new();
    for (method, params, head) in [
        ("SBN", &sbn, Head::Sbn),
        ("PTN", &ptn, Head::Ptn),
        ("a-DDN", &joint_a, Head::Full),
        ("DDN", &joint, Head::Full),
    ] {
        let (report, mean_error) = evaluate(params, &basis, &grid, test, head, alphas)?;
        rows.push(AblationRow {
            method: method.to_string(),
            report,
            mean_error,
        });
    }
    Ok(Ablation {
        rows,
        curves,
        seconds: start.elapsed().as_secs_f64(),
    })
}
