//! The five commands behind the `ddn` binary, as library functions.
//!
//! Directory layout used by the commands:
//!
//! ```text
//! DATA/manifest.toml           dataset hash, counts
//! DATA/train.csv, test.csv     delimited annotation tables
//! DATA/images/*.pgm            rendered inputs
//! OUT/<name>.ckpt              checkpoint, rewritten after every epoch
//! OUT/<name>_loss.csv          loss curve
//! OUT/pck_<name>_<head>.csv    evaluation report, plus a .txt table
//! ```
//!
//! `<name>` is the stage, with an `-affine` suffix for the affine variant of
//! the transformer stages.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{hex, RunConfig};
use crate::dataset::{format_delimited_table, generate_synthetic, load_annotations, read_points_text, write_points_text, AnnotationFormat, Sample, SyntheticSpec};
use crate::error::{DdnError, Result};
use crate::eval::PckReport;
use crate::gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
use crate::image::Image;
use crate::network::{NetworkParams, TransformKind};
use crate::pipeline::{control_grid, predict_all, score, shape_basis, train_context, Head};
use crate::shape::{LandmarkSet, ShapeBasis};
use crate::tps::{tps_apply, tps_fit_closed_form, ControlGrid};
use crate::trainer::{curve_csv, merge_pretrained, ptn_init, Stage, TrainState};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DdnError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DdnError::io(path, e))
}

/// SHA-256 of the resolved dataset section.
pub fn dataset_hash(spec: &SyntheticSpec) -> String {
    let text = toml::to_string(spec).expect("dataset spec serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_hash: String,
    pub train_count: usize,
    pub test_count: usize,
    pub landmarks: usize,
    pub image_size: usize,
}

/// Renders the synthetic benchmark of `cfg` into `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let (train, test) = generate_synthetic(&cfg.dataset)?;
    let images = out.join("images");
    create_dir(&images)?;
    for (split, samples) in [("train", &train), ("test", &test)] {
        let records: Vec<(String, LandmarkSet)> = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let rel = format!("images/{split}_{i:05}.pgm");
                s.image.write_pnm(&out.join(&rel))?;
                Ok((rel, s.truth.clone()))
            })
            .collect::<Result<_>>()?;
        write(&out.join(format!("{split}.csv")), format_delimited_table(&records))?;
    }
    let manifest = Manifest {
        dataset_hash: dataset_hash(&cfg.dataset),
        train_count: train.len(),
        test_count: test.len(),
        landmarks: cfg.dataset.landmark_count(),
        image_size: cfg.dataset.image_size,
    };
    write(&out.join("manifest.toml"), toml::to_string(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn load_split(cfg: &RunConfig, dir: &Path, split: &str) -> Result<Vec<Sample>> {
    load_annotations(&dir.join(format!("{split}.csv")), AnnotationFormat::DelimitedTable)?
        .into_par_iter()
        .map(|a| {
            let image = Image::read_pnm(&a.image)?;
            let normalizer = cfg.dataset.normalizer.measure(&a.landmarks)?;
            Ok(Sample {
                image,
                truth: a.landmarks,
                normalizer,
            })
        })
        .collect()
}

/// Reads a dataset written by [`cmd_gen_data`]. The manifest must match the
/// dataset section of `cfg`.
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| DdnError::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| DdnError::Format(format!("{}: {e}", path.display())))?;
    if manifest.dataset_hash != dataset_hash(&cfg.dataset) {
        return Err(DdnError::Contract(format!(
            "dataset in {} was generated from a different dataset configuration",
            dir.display()
        )));
    }
    let train = load_split(cfg, dir, "train")?;
    let test = load_split(cfg, dir, "test")?;
    if train.len() != manifest.train_count || test.len() != manifest.test_count {
        return Err(DdnError::Format(format!("record counts in {} disagree with the manifest", dir.display())));
    }
    Ok(Dataset { manifest, train, test })
}

/// File stem of a stage's artifacts.
pub fn artifact_name(stage: Stage, transform: TransformKind) -> String {
    match (stage, transform) {
        (Stage::Sbn, _) | (_, TransformKind::Tps) => stage.as_str().to_string(),
        (_, TransformKind::Affine) => format!("{}-affine", stage.as_str()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub stage: Stage,
    pub transform: TransformKind,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation.
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub finished: bool,
    pub state: TrainState,
}

fn load_stage(out: &Path, stage: Stage, transform: TransformKind) -> Result<(PathBuf, Checkpoint)> {
    let path = out.join(format!("{}.ckpt", artifact_name(stage, transform)));
    if !path.exists() {
        return Err(DdnError::Dependency {
            stage: artifact_name(stage, transform),
            path,
        });
    }
    let ck = Checkpoint::load(&path)?;
    if ck.meta("finished")? != "true" {
        return Err(DdnError::Dependency {
            stage: artifact_name(stage, transform),
            path,
        });
    }
    Ok((path, ck))
}

/// Network configuration and sizes stored with a checkpoint.
pub struct Restored {
    pub config: RunConfig,
    pub basis: ShapeBasis,
    pub grid: ControlGrid,
    pub transform: TransformKind,
    pub state: TrainState,
}

pub fn restore(ck: &Checkpoint) -> Result<Restored> {
    let mut config = RunConfig::from_toml(ck.meta("config")?)?;
    let transform: TransformKind = ck.meta_parse("transform")?;
    config.network.transform = transform;
    let basis = ck.get_basis()?;
    let grid = control_grid(&config)?;
    let state = ck.get_state(&config.network, &basis, grid.len())?;
    Ok(Restored {
        config,
        basis,
        grid,
        transform,
        state,
    })
}

fn stage_checkpoint(cfg: &RunConfig, stage: Stage, transform: TransformKind, basis: &ShapeBasis, state: &TrainState, finished: bool) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.set_meta("config", cfg.to_toml());
    ck.set_meta("config_hash", cfg.hash());
    ck.set_meta("dataset_hash", dataset_hash(&cfg.dataset));
    ck.set_meta("stage", stage.as_str());
    ck.set_meta("transform", transform.as_str());
    ck.set_meta("epoch", state.curve.len());
    ck.set_meta("seed", cfg.seed);
    ck.set_meta("finished", finished);
    ck.put_basis(basis)?;
    ck.put_state(state)?;
    Ok(ck)
}

/// Trains one stage. Prerequisite stages are read from the output
/// directory; a resumed run must use the configuration it started with.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions, mut log: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stage = opts.stage;
    let transform = if stage == Stage::Sbn { TransformKind::Tps } else { opts.transform };
    let data = load_dataset(cfg, &opts.data)?;
    create_dir(&opts.out)?;

    let (basis, state) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.meta("config_hash")? != cfg.hash() {
                return Err(DdnError::Contract(format!("{} was written under a different configuration", path.display())));
            }
            if ck.meta("stage")? != stage.as_str() || ck.meta("transform")? != transform.as_str() {
                return Err(DdnError::Contract(format!(
                    "{} holds stage {} ({}), not {} ({})",
                    path.display(),
                    ck.meta("stage")?,
                    ck.meta("transform")?,
                    stage.as_str(),
                    transform.as_str()
                )));
            }
            let r = restore(&ck)?;
            (r.basis, r.state)
        }
        None => match stage {
            Stage::Sbn => {
                let basis = shape_basis(cfg, &data.train)?;
                let ctx = train_context(cfg, &basis, transform)?;
                let params = ctx.init_params(data.train.len())?;
                (basis, TrainState::new(params))
            }
            Stage::Ptn => {
                let (_, sbn) = load_stage(&opts.out, Stage::Sbn, TransformKind::Tps)?;
                let sbn = restore(&sbn)?;
                let ctx = train_context(cfg, &sbn.basis, transform)?;
                let params = ptn_init(&ctx, &sbn.state.params, data.train.len())?;
                (sbn.basis, TrainState::new(params))
            }
            Stage::Joint => {
                let (_, sbn) = load_stage(&opts.out, Stage::Sbn, TransformKind::Tps)?;
                let (_, ptn) = load_stage(&opts.out, Stage::Ptn, transform)?;
                let (sbn, ptn) = (restore(&sbn)?, restore(&ptn)?);
                if sbn.basis != ptn.basis {
                    return Err(DdnError::Contract("pre-trained checkpoints use different shape bases".into()));
                }
                let params = merge_pretrained(&sbn.state.params, &ptn.state.params)?;
                (sbn.basis, TrainState::new(params))
            }
        },
    };
    if basis.landmark_count() != data.manifest.landmarks {
        return Err(DdnError::Contract(format!(
            "shape basis has {} landmarks, dataset has {}",
            basis.landmark_count(),
            data.manifest.landmarks
        )));
    }

    let ctx = train_context(cfg, &basis, transform)?;
    let trainer = ctx.trainer(stage)?;
    let name = artifact_name(stage, transform);
    let ck_path = opts.out.join(format!("{name}.ckpt"));
    let curve_path = opts.out.join(format!("{name}_loss.csv"));
    let mut state = state;
    let mut ran = 0;
    while !state.is_done() && opts.max_epochs.map_or(true, |m| ran < m) {
        trainer.run_epoch(&mut state, &data.train, &data.test)?;
        ran += 1;
        let r = state.curve.last().expect("an epoch was recorded");
        log(&format!(
            "{name} epoch {} phase {} train {:.6} heldout {}",
            r.epoch,
            r.phase,
            r.train_loss,
            r.heldout_loss.map_or("-".into(), |v| format!("{v:.6}"))
        ));
        stage_checkpoint(cfg, stage, transform, &basis, &state, state.is_done())?.save(&ck_path)?;
        write(&curve_path, curve_csv(&state.curve))?;
    }
    // a resumed, already finished run still leaves its artifacts behind
    stage_checkpoint(cfg, stage, transform, &basis, &state, state.is_done())?.save(&ck_path)?;
    write(&curve_path, curve_csv(&state.curve))?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        curve: curve_path,
        finished: state.is_done(),
        state,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub head: Head,
    pub out: PathBuf,
    /// Test hook: score the truths themselves instead of predictions.
    pub force_truth: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: PckReport,
    pub mean_error: f64,
    pub csv: PathBuf,
    pub table: PathBuf,
}

/// Scores a checkpoint on the test split with alphas from `cfg`.
pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalOutcome> {
    cfg.validate()?;
    let ck = Checkpoint::load(&opts.checkpoint)?;
    let stage: Stage = ck.meta_parse("stage")?;
    let needed = match opts.head {
        Head::Sbn => Stage::Sbn,
        Head::Ptn => Stage::Ptn,
        Head::Full => Stage::Joint,
    };
    if stage.order() < needed.order() {
        return Err(DdnError::Contract(format!(
            "a {} checkpoint cannot be read out with the {} head",
            stage.as_str(),
            opts.head.as_str()
        )));
    }
    let r = restore(&ck)?;
    let data = load_dataset(cfg, &opts.data)?;
    if r.basis.landmark_count() != data.manifest.landmarks {
        return Err(DdnError::Contract(format!(
            "checkpoint predicts {} landmarks, dataset has {}",
            r.basis.landmark_count(),
            data.manifest.landmarks
        )));
    }
    let predictions = if opts.force_truth {
        data.test.iter().map(|s| s.truth.clone()).collect()
    } else {
        predict_all(&r.state.params, &r.basis, &r.grid, &data.test, opts.head)?
    };
    let (report, mean_error) = score(&predictions, &data.test, &cfg.eval.alphas)?;
    create_dir(&opts.out)?;
    let name = format!("pck_{}_{}", artifact_name(stage, r.transform), opts.head.as_str());
    let csv = opts.out.join(format!("{name}.csv"));
    let table = opts.out.join(format!("{name}.txt"));
    write(&csv, report.to_csv())?;
    let label = format!("{}/{}", artifact_name(stage, r.transform), opts.head.as_str());
    let text = format!(
        "{}\n{}\nmean normalized error {mean_error:.4}%\n",
        crate::eval::comparison_table(&[(label.as_str(), &report)])?,
        report.landmark_table()
    );
    write(&table, text)?;
    Ok(EvalOutcome {
        report,
        mean_error,
        csv,
        table,
    })
}

/// Fits the spline taking `src` onto `dst`, with the source points as
/// control points, and writes the warped `query` points to `out`.
pub fn cmd_warp(src: &Path, dst: &Path, query: &Path, gamma: f64, out: &Path) -> Result<LandmarkSet> {
    let src = read_points_text(src)?;
    let dst = read_points_text(dst)?;
    let query = read_points_text(query)?;
    let warped = warp_points(&src, &dst, &query, gamma)?;
    write_points_text(out, &warped)?;
    Ok(warped)
}

pub fn warp_points(src: &LandmarkSet, dst: &LandmarkSet, query: &LandmarkSet, gamma: f64) -> Result<LandmarkSet> {
    let controls = ControlGrid::new(1, src.len(), src.points().to_vec())?;
    let fit = tps_fit_closed_form(src, dst, &controls, gamma)?;
    tps_apply(&fit, query)
}

/// Runs the gradient suite; a block over the threshold is an error naming
/// the block.
pub fn cmd_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    run_gradcheck(cfg)?.into_result()
}

/// Network parameters of a checkpoint, for callers that only predict.
pub fn load_network(path: &Path) -> Result<(NetworkParams, ShapeBasis, ControlGrid)> {
    let r = restore(&Checkpoint::load(path)?)?;
    Ok((r.state.params, r.basis, r.grid))
}
