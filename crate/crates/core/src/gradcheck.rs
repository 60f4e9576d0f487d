//! Finite-difference audit of every analytic gradient: the shape-head loss,
//! each block of the regularized spline loss, and the three parameter
//! groups of the network under all training objectives.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::error::{DdnError, Result};
use crate::image::Image;
use crate::linalg::{derive_seed, finite_diff_grad, relative_error, seeded_rng, Matrix, Rng};
use crate::network::{ConvStackConfig, ConvStage, NetworkConfig, NetworkParams, ParamGroup, TransformKind};
use crate::shape::{build_shape_basis, sbn_loss, sbn_loss_grad, BasisCoeffs, LandmarkSet};
use crate::tps::{tps_loss_grad, tps_regularized_loss, ControlGrid, TpsLossWeights, TpsParams};
use crate::trainer::{Objective, Stage};

pub const BLOCKS: [&str; 9] = [
    "sbn_loss",
    "tps_D",
    "tps_U",
    "tps_Dc",
    "tps_Uc",
    "tps_src",
    "network_conv",
    "network_sbn_head",
    "network_ptn_head",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub eps: f64,
    pub threshold: f64,
    /// Test hook: perturbs the analytic gradient of the named block.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 7,
            instances: 50,
            eps: 1e-5,
            threshold: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub block: String,
    pub worst: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockResult>,
    pub threshold: f64,
}

impl GradCheckReport {
    /// First block whose worst error exceeds the threshold.
    pub fn failure(&self) -> Option<&BlockResult> {
        self.blocks.iter().find(|b| !(b.worst <= self.threshold))
    }

    pub fn passed(&self) -> bool {
        self.failure().is_none()
    }

    /// `Err(GradientCheck)` naming the first failing block.
    pub fn into_result(self) -> Result<Self> {
        match self.failure() {
            Some(b) => Err(DdnError::GradientCheck {
                block: b.block.clone(),
                error: b.worst,
            }),
            None => Ok(self),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("block              worst_rel_error  instances  status\n");
        for b in &self.blocks {
            let status = if b.worst <= self.threshold { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{:<18} {:>15.3e}  {:>9}  {status}", b.block, b.worst, b.instances);
        }
        s
    }
}

struct Tally<'a> {
    cfg: &'a GradCheckConfig,
    worst: Vec<f64>,
}

impl Tally<'_> {
    fn record(&mut self, block: &str, mut analytic: Vec<f64>, numeric: &[f64]) {
        if self.cfg.corrupt.as_deref() == Some(block) {
            if let Some(v) = analytic.first_mut() {
                *v += 1e-2 * (1.0 + v.abs());
            }
        }
        let i = BLOCKS.iter().position(|b| *b == block).expect("known block");
        let e = relative_error(&analytic, numeric);
        // NaN must stick
        if !(e <= self.worst[i]) {
            self.worst[i] = e;
        }
    }
}

fn random_shape(rng: &mut Rng, n: usize, size: f64) -> LandmarkSet {
    let lo = 0.15 * size;
    let hi = 0.85 * size;
    LandmarkSet::new((0..n).map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).collect()).expect("non-empty")
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn check_sbn(tally: &mut Tally, rng: &mut Rng) -> Result<()> {
    let shapes: Vec<LandmarkSet> = (0..10).map(|_| random_shape(rng, 5, 16.0)).collect();
    let basis = build_shape_basis(&shapes, 0.99)?;
    let truth = random_shape(rng, 5, 16.0);
    let x: Vec<f64> = (0..basis.rank()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let lambda = rng.gen_range(0.0..0.5);
    let analytic = sbn_loss_grad(&basis, &BasisCoeffs(x.clone()), &truth, lambda)?;
    let numeric = finite_diff_grad(
        |v| sbn_loss(&basis, &BasisCoeffs(v.to_vec()), &truth, lambda).unwrap_or(f64::NAN),
        &x,
        tally.cfg.eps,
    )?;
    tally.record("sbn_loss", analytic, &numeric);
    Ok(())
}

fn check_tps(tally: &mut Tally, rng: &mut Rng) -> Result<()> {
    let size = 16.0;
    let grid = ControlGrid::covering_frame(3, 3, size, size)?;
    let m = grid.len();
    let near_identity = |rng: &mut Rng| {
        let mut d = random_matrix(rng, 2, 3, 0.2);
        d.data_mut()[0] += 1.0;
        d.data_mut()[4] += 1.0;
        d
    };
    let params = TpsParams::new(near_identity(rng), random_matrix(rng, 2, m, 0.05), grid.clone())?;
    let control = TpsParams::new(near_identity(rng), random_matrix(rng, 2, m, 0.05), grid.clone())?;
    let src = random_shape(rng, 6, size);
    let dst = random_shape(rng, 6, size);
    let targets = grid.as_landmarks().map(|p| [p[0] + rng.gen_range(-1.0..1.0), p[1] + rng.gen_range(-1.0..1.0)]);
    let weights = TpsLossWeights {
        gamma: rng.gen_range(0.0..2.0),
        varphi: rng.gen_range(0.0..1.0),
        psi: rng.gen_range(0.0..1.0),
    };
    let g = tps_loss_grad(&params, &src, &dst, &control, &targets, &weights)?;
    let eps = tally.cfg.eps;
    let loss = |p: &TpsParams, c: &TpsParams, s: &LandmarkSet| tps_regularized_loss(p, s, &dst, c, &targets, &weights).unwrap_or(f64::NAN);

    let with = |base: &TpsParams, affine: bool, v: &[f64]| {
        let mut p = base.clone();
        let target = if affine { &mut p.affine } else { &mut p.coeffs };
        target.data_mut().copy_from_slice(v);
        p
    };
    let num = finite_diff_grad(|v| loss(&with(&params, true, v), &control, &src), params.affine.data(), eps)?;
    tally.record("tps_D", g.affine.data().to_vec(), &num);
    let num = finite_diff_grad(|v| loss(&with(&params, false, v), &control, &src), params.coeffs.data(), eps)?;
    tally.record("tps_U", g.coeffs.data().to_vec(), &num);
    let num = finite_diff_grad(|v| loss(&params, &with(&control, true, v), &src), control.affine.data(), eps)?;
    tally.record("tps_Dc", g.control_affine.data().to_vec(), &num);
    let num = finite_diff_grad(|v| loss(&params, &with(&control, false, v), &src), control.coeffs.data(), eps)?;
    tally.record("tps_Uc", g.control_coeffs.data().to_vec(), &num);

    // src gradient is 2 x n; the stacked layout is (u1, v1, u2, v2, ...)
    let num = finite_diff_grad(
        |v| match LandmarkSet::from_stacked(v) {
            Ok(s) => loss(&params, &control, &s),
            Err(_) => f64::NAN,
        },
        &src.stacked(),
        eps,
    )?;
    let n = src.len();
    let analytic: Vec<f64> = (0..n).flat_map(|j| [g.src.row(0)[j], g.src.row(1)[j]]).collect();
    tally.record("tps_src", analytic, &num);
    Ok(())
}

fn check_network(tally: &mut Tally, rng: &mut Rng, instance: usize) -> Result<()> {
    let size = 8usize;
    let transform = if instance % 2 == 0 { TransformKind::Tps } else { TransformKind::Affine };
    let stage = [Stage::Sbn, Stage::Ptn, Stage::Joint][instance % 3];
    let cfg = NetworkConfig {
        conv: ConvStackConfig {
            input_size: size,
            input_channels: 1,
            stages: vec![ConvStage { channels: 2, kernel: 3, stride: 2 }],
        },
        hidden: 4,
        transform,
    };
    let shapes: Vec<LandmarkSet> = (0..8).map(|_| random_shape(rng, 4, size as f64)).collect();
    let basis = build_shape_basis(&shapes, 0.99)?;
    let grid = ControlGrid::covering_frame(3, 3, size as f64, size as f64)?;
    let objective = Objective::new(&basis, &grid, 0.1, TpsLossWeights::default())?;
    let mut params = NetworkParams::init(&cfg, &basis, &grid, shapes.len(), rng)?;
    // move off the identity warp so every transform entry matters
    for name in ["ptn.out.weight", "ptn.out.bias"] {
        if let Some(t) = params.tensor_mut(name) {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let image = Image::from_vec(size, size, 1, (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let truth = random_shape(rng, 4, size as f64);
    let targets = objective.targets_for(&params, stage, &image, &truth)?;
    let mut grads = params.zeros_like();
    objective.evaluate_with(&params, stage, &image, &truth, targets.as_ref(), Some((&mut grads, true)))?;
    for (block, group) in [
        ("network_conv", ParamGroup::Conv),
        ("network_sbn_head", ParamGroup::SbnHead),
        ("network_ptn_head", ParamGroup::PtnHead),
    ] {
        let x0 = params.flatten(&[group]);
        let numeric = finite_diff_grad(
            |v| {
                let mut q = params.clone();
                match q.unflatten(&[group], v) {
                    Ok(()) => objective.evaluate_with(&q, stage, &image, &truth, targets.as_ref(), None).unwrap_or(f64::NAN),
                    Err(_) => f64::NAN,
                }
            },
            &x0,
            tally.cfg.eps,
        )?;
        tally.record(block, grads.flatten(&[group]), &numeric);
    }
    Ok(())
}

/// Runs every block on `instances` seeded random problems and reports the
/// worst relative error per block. Exceeding the threshold is reported,
/// not raised; see [`GradCheckReport::into_result`].
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 {
        return Err(DdnError::Config("gradcheck needs at least one instance".into()));
    }
    if let Some(b) = &cfg.corrupt {
        if !BLOCKS.contains(&b.as_str()) {
            return Err(DdnError::Config(format!("unknown gradient block {b:?}")));
        }
    }
    let mut tally = Tally {
        cfg,
        worst: vec![0.0; BLOCKS.len()],
    };
    for i in 0..cfg.instances {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[i as u64]));
        check_sbn(&mut tally, &mut rng)?;
        check_tps(&mut tally, &mut rng)?;
        check_network(&mut tally, &mut rng, i)?;
    }
    Ok(GradCheckReport {
        blocks: BLOCKS
            .iter()
            .zip(&tally.worst)
            .map(|(b, w)| BlockResult {
                block: b.to_string(),
                worst: *w,
                instances: cfg.instances,
            })
            .collect(),
        threshold: cfg.threshold,
    })
}
