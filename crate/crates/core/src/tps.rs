//! Thin-plate-spline point transforms.
//!
//! A transform is an affine block `D` (2x3) plus coefficients `U` (2xm)
//! attached to a grid of `m` control points:
//!
//! ```text
//! g(z) = D [z; 1] + sum_j u_j phi(|z - c_j|),   phi(d) = d^2 ln d
//! ```
//!
//! The network-facing objective evaluates the bending term at the warped
//! landmarks, `|Y - D Ys~ - U Phi|_F^2 + gamma tr(U Phi Phi^T U^T)`, with
//! `Phi` the `m x n` kernel between controls and landmarks. Closed-form
//! fitting instead uses the classical control-point kernel, which gives a
//! well-posed symmetric system.

use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::linalg::{eig_sym, solve_linear, Matrix};
use crate::shape::LandmarkSet;

pub const DEFAULT_GRID_SIZE: usize = 10;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_VARPHI: f64 = 0.4;
pub const DEFAULT_PSI: f64 = 0.4;

/// Diagonal shift tried once before a fit is declared singular.
const FIT_DIAGONAL_SHIFT: f64 = 1e-9;

/// `d^2 ln d` with the continuous limit `0` at `d = 0`.
pub fn rbf(d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(DdnError::Domain(format!("rbf distance must be non-negative, got {d}")));
    }
    Ok(rbf_unchecked(d))
}

#[inline]
fn rbf_unchecked(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        d * d * d.ln()
    }
}

/// `phi'(d) / d = 2 ln d + 1`; multiplying by the offset vector gives the
/// spatial gradient, which vanishes at `d = 0`.
#[inline]
fn rbf_grad_factor(d: f64) -> f64 {
    if d == 0.0 {
        0.0
    } else {
        2.0 * d.ln() + 1.0
    }
}

/// Regular grid of control points.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    rows: usize,
    cols: usize,
    points: Vec<[f64; 2]>,
    /// `phi(|c_i - c_j|)`, m x m.
    kernel: Matrix,
    /// See [`ControlGrid::displacement_map`]; `None` for degenerate grids.
    displacement: Option<Matrix>,
}

impl ControlGrid {
    /// Points are listed row by row.
    pub fn new(rows: usize, cols: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if rows == 0 || cols == 0 || points.len() != rows * cols {
            return Err(DdnError::shape(format!(
                "{} control points do not form a {rows}x{cols} grid",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DdnError::Domain("control points must be finite".into()));
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                if points[i] == points[j] {
                    return Err(DdnError::Domain(format!("control points {i} and {j} coincide")));
                }
            }
        }
        let m = points.len();
        let kernel = Matrix::from_fn(m, m, |i, j| {
            rbf_unchecked((points[i][0] - points[j][0]).hypot(points[i][1] - points[j][1]))
        });
        let displacement = displacement_map(&points, &kernel);
        Ok(ControlGrid {
            rows,
            cols,
            points,
            kernel,
            displacement,
        })
    }

    /// Evenly spaced grid with corners `lo` and `hi`.
    pub fn regular(rows: usize, cols: usize, lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        let lerp = |a: f64, b: f64, i: usize, n: usize| {
            if n == 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                points.push([lerp(lo[0], hi[0], c, cols), lerp(lo[1], hi[1], r, rows)]);
            }
        }
        ControlGrid::new(rows, cols, points)
    }

    /// Grid spanning a `width x height` frame (pixel centres `0..=width-1`)
    /// extended by half a cell on every side.
    pub fn covering_frame(rows: usize, cols: usize, width: f64, height: f64) -> Result<Self> {
        let axis = |extent: f64, n: usize| {
            let span = extent - 1.0;
            if n < 3 {
                (0.0, span)
            } else {
                let cell = span / (n - 2) as f64;
                (-0.5 * cell, span + 0.5 * cell)
            }
        };
        let (u0, u1) = axis(width, cols);
        let (v0, v1) = axis(height, rows);
        ControlGrid::regular(rows, cols, [u0, v0], [u1, v1])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn as_landmarks(&self) -> LandmarkSet {
        LandmarkSet::new(self.points.clone()).expect("grid points are finite and nonempty")
    }

    /// Control-to-control kernel `Phi_c`.
    pub fn self_kernel(&self) -> &Matrix {
        &self.kernel
    }

    /// `m x m` map `M` taking raw displacements `R` (2 x m) at the control
    /// points to coefficients `U = R M` that satisfy the side conditions
    /// `U C~^T = 0`. The kernel part of the warp at the control points is
    /// then `U Phi_c = R P`, with `P` the orthogonal projector onto the
    /// displacements the kernel can produce under the side conditions.
    pub fn displacement_map(&self) -> Result<&Matrix> {
        self.displacement.as_ref().ok_or(DdnError::Singular { rank: 2, dim: 3 })
    }

    fn homogeneous(&self) -> Matrix {
        let m = self.len();
        Matrix::from_fn(3, m, |r, c| if r == 2 { 1.0 } else { self.points[c][r] })
    }
}

/// `K Z (Z^T K^2 Z)^-1 Z^T` with `Z` an orthonormal basis of the null space
/// of `C~`. Coordinates are centred and scaled first for conditioning; the
/// null space does not depend on that.
fn displacement_map(points: &[[f64; 2]], kernel: &Matrix) -> Option<Matrix> {
    let m = points.len();
    if m < 3 {
        return None;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let scale = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(f64::MIN_POSITIVE);
    let c = Matrix::from_fn(3, m, |r, j| if r == 2 { 1.0 } else { (points[j][r] - center[r]) / scale });
    let proj = Matrix::identity(m).sub(&c.transpose().matmul(&solve_linear(&c.matmul_t(&c), &c).ok()?));
    let (values, vectors) = eig_sym(&proj).ok()?;
    let keep = values.iter().filter(|&&v| v > 0.5).count();
    if keep != m - 3 {
        return None;
    }
    let z = Matrix::from_fn(m, keep, |i, k| vectors[(i, k)]);
    let kz = kernel.matmul(&z);
    let map = kz.matmul(&solve_linear(&kz.transpose().matmul(&kz), &z.transpose()).ok()?);
    map.is_finite().then_some(map)
}

/// Affine block plus control-point coefficients of one transform.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    /// `D`, 2 x 3.
    pub affine: Matrix,
    /// `U`, 2 x m.
    pub coeffs: Matrix,
    pub grid: ControlGrid,
}

impl TpsParams {
    pub fn new(affine: Matrix, coeffs: Matrix, grid: ControlGrid) -> Result<Self> {
        if affine.rows() != 2 || affine.cols() != 3 {
            return Err(DdnError::shape(format!(
                "affine block must be 2x3, got {}x{}",
                affine.rows(),
                affine.cols()
            )));
        }
        if coeffs.rows() != 2 || coeffs.cols() != grid.len() {
            return Err(DdnError::shape(format!(
                "coefficient block must be 2x{}, got {}x{}",
                grid.len(),
                coeffs.rows(),
                coeffs.cols()
            )));
        }
        if !affine.is_finite() || !coeffs.is_finite() {
            return Err(DdnError::Domain("transform parameters must be finite".into()));
        }
        Ok(TpsParams { affine, coeffs, grid })
    }

    pub fn identity(grid: ControlGrid) -> Self {
        let affine = Matrix::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let coeffs = Matrix::zeros(2, grid.len());
        TpsParams { affine, coeffs, grid }
    }

    pub fn affine_only(affine: Matrix, grid: ControlGrid) -> Result<Self> {
        let m = grid.len();
        TpsParams::new(affine, Matrix::zeros(2, m), grid)
    }

    /// `tr(U Phi Phi^T U^T)` evaluated at `points`.
    pub fn bending_at(&self, points: &LandmarkSet) -> f64 {
        let phi = tps_kernel(points, &self.grid);
        self.coeffs.matmul(&phi).frobenius_sq()
    }
}

/// Weights of the control-point regularized objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpsLossWeights {
    /// Bending weight on the landmark term.
    pub gamma: f64,
    /// Data weight on the synthesized control targets.
    pub varphi: f64,
    /// Bending weight on the control term.
    pub psi: f64,
}

impl Default for TpsLossWeights {
    fn default() -> Self {
        TpsLossWeights {
            gamma: DEFAULT_GAMMA,
            varphi: DEFAULT_VARPHI,
            psi: DEFAULT_PSI,
        }
    }
}

impl TpsLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("varphi", self.varphi), ("psi", self.psi)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DdnError::Domain(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// `m x n` matrix with entry `(j, i) = phi(|p_i - c_j|)`.
pub fn tps_kernel(points: &LandmarkSet, grid: &ControlGrid) -> Matrix {
    kernel_between(points.points(), grid.points())
}

fn kernel_between(points: &[[f64; 2]], controls: &[[f64; 2]]) -> Matrix {
    Matrix::from_fn(controls.len(), points.len(), |j, i| {
        let c = controls[j];
        let p = points[i];
        rbf_unchecked((p[0] - c[0]).hypot(p[1] - c[1]))
    })
}

/// Warps every point: `z -> D [z; 1] + U phi(z)`.
pub fn tps_apply(params: &TpsParams, points: &LandmarkSet) -> Result<LandmarkSet> {
    let phi = tps_kernel(points, &params.grid);
    let warped = params
        .affine
        .matmul(&points.homogeneous())
        .add(&params.coeffs.matmul(&phi));
    LandmarkSet::from_matrix(&warped)
}

fn check_pair(src: &LandmarkSet, dst: &LandmarkSet) -> Result<()> {
    if src.len() != dst.len() {
        return Err(DdnError::shape(format!(
            "source has {} points, target has {}",
            src.len(),
            dst.len()
        )));
    }
    Ok(())
}

/// `|Y - D Ys~ - U Phi|_F^2 + gamma tr(U Phi Phi^T U^T)`.
pub fn tps_loss(params: &TpsParams, src: &LandmarkSet, dst: &LandmarkSet, gamma: f64) -> Result<f64> {
    check_pair(src, dst)?;
    let (data, bend) = loss_terms(params, src, dst);
    Ok(data + gamma * bend)
}

/// (data term, bending term) of the landmark objective.
fn loss_terms(params: &TpsParams, src: &LandmarkSet, dst: &LandmarkSet) -> (f64, f64) {
    let phi = tps_kernel(src, &params.grid);
    let bent = params.coeffs.matmul(&phi);
    let resid = dst
        .to_matrix()
        .sub(&params.affine.matmul(&src.homogeneous()))
        .sub(&bent);
    (resid.frobenius_sq(), bent.frobenius_sq())
}

fn control_terms(control: &TpsParams, targets: &LandmarkSet) -> (f64, f64) {
    let grid = &control.grid;
    let bent = control.coeffs.matmul(grid.self_kernel());
    let resid = targets
        .to_matrix()
        .sub(&control.affine.matmul(&grid.homogeneous()))
        .sub(&bent);
    (resid.frobenius_sq(), bent.frobenius_sq())
}

fn check_control(params: &TpsParams, control: &TpsParams, targets: &LandmarkSet) -> Result<()> {
    if control.grid != params.grid {
        return Err(DdnError::shape("control transform is bound to a different grid"));
    }
    if targets.len() != control.grid.len() {
        return Err(DdnError::shape(format!(
            "{} control targets for {} control points",
            targets.len(),
            control.grid.len()
        )));
    }
    Ok(())
}

/// Landmark objective plus the weighted data and bending terms on the
/// synthesized control-point targets.
pub fn tps_regularized_loss(
    params: &TpsParams,
    src: &LandmarkSet,
    dst: &LandmarkSet,
    control_params: &TpsParams,
    control_targets: &LandmarkSet,
    weights: &TpsLossWeights,
) -> Result<f64> {
    weights.validate()?;
    check_pair(src, dst)?;
    check_control(params, control_params, control_targets)?;
    let e = tps_loss(params, src, dst, weights.gamma)?;
    let (cdata, cbend) = control_terms(control_params, control_targets);
    Ok(e + weights.varphi * cdata + weights.psi * cbend)
}

/// Partial derivatives of [`tps_regularized_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct TpsGrads {
    pub affine: Matrix,
    pub coeffs: Matrix,
    pub control_affine: Matrix,
    pub control_coeffs: Matrix,
    /// Gradient with respect to the source points, 2 x n.
    pub src: Matrix,
}

impl TpsGrads {
    /// Gradients for the common case where the control transform is the
    /// same transform as the landmark one.
    pub fn shared(&self) -> (Matrix, Matrix) {
        (
            self.affine.add(&self.control_affine),
            self.coeffs.add(&self.control_coeffs),
        )
    }
}

pub fn tps_loss_grad(
    params: &TpsParams,
    src: &LandmarkSet,
    dst: &LandmarkSet,
    control_params: &TpsParams,
    control_targets: &LandmarkSet,
    weights: &TpsLossWeights,
) -> Result<TpsGrads> {
    weights.validate()?;
    check_pair(src, dst)?;
    check_control(params, control_params, control_targets)?;
    let grid = &params.grid;

    let phi = tps_kernel(src, grid);
    let src_h = src.homogeneous();
    let bent = params.coeffs.matmul(&phi);
    let resid = dst.to_matrix().sub(&params.affine.matmul(&src_h)).sub(&bent);
    // dE/d(U Phi)
    let g_bent = resid.scale(-2.0).add(&bent.scale(2.0 * weights.gamma));
    let affine = resid.matmul_t(&src_h).scale(-2.0);
    let coeffs = g_bent.matmul_t(&phi);

    let d_hom = params.affine.transpose().matmul(&resid).scale(-2.0);
    let d_phi = params.coeffs.transpose().matmul(&g_bent);
    let src_grad = point_gradient(src, grid, &d_hom, &d_phi);

    let k = grid.self_kernel();
    let c_h = grid.homogeneous();
    let c_bent = control_params.coeffs.matmul(k);
    let c_resid = control_targets
        .to_matrix()
        .sub(&control_params.affine.matmul(&c_h))
        .sub(&c_bent);
    let control_affine = c_resid.matmul_t(&c_h).scale(-2.0 * weights.varphi);
    let c_g_bent = c_resid
        .scale(-2.0 * weights.varphi)
        .add(&c_bent.scale(2.0 * weights.psi));
    let control_coeffs = c_g_bent.matmul_t(k);

    Ok(TpsGrads {
        affine,
        coeffs,
        control_affine,
        control_coeffs,
        src: src_grad,
    })
}

/// Vector-Jacobian product of [`tps_apply`]: given the gradient of a scalar
/// with respect to the warped points (2 x n), returns the gradients with
/// respect to `D`, `U` and the input points.
pub fn tps_apply_vjp(params: &TpsParams, points: &LandmarkSet, upstream: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    if upstream.rows() != 2 || upstream.cols() != points.len() {
        return Err(DdnError::shape(format!(
            "upstream gradient is {}x{}, expected 2x{}",
            upstream.rows(),
            upstream.cols(),
            points.len()
        )));
    }
    let phi = tps_kernel(points, &params.grid);
    let hom = points.homogeneous();
    let g_affine = upstream.matmul_t(&hom);
    let g_coeffs = upstream.matmul_t(&phi);
    let d_hom = params.affine.transpose().matmul(upstream);
    let d_phi = params.coeffs.transpose().matmul(upstream);
    let g_points = point_gradient(points, &params.grid, &d_hom, &d_phi);
    Ok((g_affine, g_coeffs, g_points))
}

/// Chains gradients on the homogeneous coordinates (3 x n) and on the
/// kernel matrix (m x n) back to the points.
fn point_gradient(points: &LandmarkSet, grid: &ControlGrid, d_hom: &Matrix, d_phi: &Matrix) -> Matrix {
    let n = points.len();
    let mut out = Matrix::zeros(2, n);
    for i in 0..n {
        let p = points.point(i);
        let mut g = [d_hom[(0, i)], d_hom[(1, i)]];
        for (j, c) in grid.points().iter().enumerate() {
            let w = d_phi[(j, i)];
            if w == 0.0 {
                continue;
            }
            let off = [p[0] - c[0], p[1] - c[1]];
            let f = rbf_grad_factor(off[0].hypot(off[1])) * w;
            g[0] += f * off[0];
            g[1] += f * off[1];
        }
        out[(0, i)] = g[0];
        out[(1, i)] = g[1];
    }
    out
}

/// Normalized coordinate frame used by the closed-form solver.
struct FitFrame {
    center: [f64; 2],
    scale: f64,
}

impl FitFrame {
    fn for_grid(grid: &ControlGrid) -> Self {
        let m = grid.len() as f64;
        let mut center = [0.0; 2];
        for p in grid.points() {
            center[0] += p[0] / m;
            center[1] += p[1] / m;
        }
        let scale = grid
            .points()
            .iter()
            .map(|p| (p[0] - center[0]).abs().max((p[1] - center[1]).abs()))
            .fold(0.0, f64::max);
        FitFrame {
            center,
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    fn to_unit(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale]
    }
}

/// Precomputed solver for fitting transforms from one fixed source shape.
///
/// The fitted parameters are linear in the target points, so one
/// factorization serves every target.
#[derive(Debug, Clone)]
pub struct TpsFitter {
    grid: ControlGrid,
    n: usize,
    frame_center: [f64; 2],
    frame_scale: f64,
    /// Rows: the m coefficients and 3 affine entries (normalized frame) for
    /// one coordinate; columns: unit target point `i`.
    response: Matrix,
}

impl TpsFitter {
    pub fn new(src: &LandmarkSet, grid: &ControlGrid, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(DdnError::Domain(format!("gamma must be non-negative, got {gamma}")));
        }
        let n = src.len();
        if n < 3 {
            return Err(DdnError::Singular { rank: n, dim: 3 });
        }
        let frame = FitFrame::for_grid(grid);
        let src_u: Vec<[f64; 2]> = src.points().iter().map(|&p| frame.to_unit(p)).collect();
        let ctl_u: Vec<[f64; 2]> = grid.points().iter().map(|&p| frame.to_unit(p)).collect();
        check_not_collinear(&src_u)?;

        let m = grid.len();
        let gamma_u = gamma / (frame.scale * frame.scale);
        let k = kernel_between(&ctl_u, &ctl_u);
        let phi = kernel_between(&src_u, &ctl_u);
        // unknown layout: u (m) | mu (3) | d (3) | lambda (n)
        let (iu, imu, id, il) = (0, m, m + 3, m + 6);
        let size = m + n + 6;
        let mut a = Matrix::zeros(size, size);
        for r in 0..m {
            for c in 0..m {
                a[(iu + r, iu + c)] = k[(r, c)];
            }
            let c = ctl_u[r];
            for (t, v) in [c[0], c[1], 1.0].into_iter().enumerate() {
                a[(iu + r, imu + t)] = v;
                a[(imu + t, iu + r)] = v;
            }
            for i in 0..n {
                a[(iu + r, il + i)] = -phi[(r, i)];
                a[(il + i, iu + r)] = -phi[(r, i)];
            }
        }
        for i in 0..n {
            let p = src_u[i];
            for (t, v) in [p[0], p[1], 1.0].into_iter().enumerate() {
                a[(id + t, il + i)] = -v;
                a[(il + i, id + t)] = -v;
            }
            a[(il + i, il + i)] = -gamma_u;
        }
        // unit right-hand sides: -e_i in the lambda rows
        let mut rhs = Matrix::zeros(size, n);
        for i in 0..n {
            rhs[(il + i, i)] = -1.0;
        }
        let sol = match solve_linear(&a, &rhs) {
            Ok(x) => x,
            Err(DdnError::Singular { .. }) => {
                let mut shifted = a.clone();
                for i in 0..size {
                    shifted[(i, i)] += FIT_DIAGONAL_SHIFT;
                }
                solve_linear(&shifted, &rhs)?
            }
            Err(e) => return Err(e),
        };
        let mut response = Matrix::zeros(m + 3, n);
        for i in 0..n {
            for r in 0..m {
                response[(r, i)] = sol[(iu + r, i)];
            }
            for t in 0..3 {
                response[(m + t, i)] = sol[(id + t, i)];
            }
        }
        if !response.is_finite() {
            return Err(DdnError::Singular { rank: 0, dim: size });
        }
        Ok(TpsFitter {
            grid: grid.clone(),
            n,
            frame_center: frame.center,
            frame_scale: frame.scale,
            response,
        })
    }

    pub fn fit(&self, dst: &LandmarkSet) -> Result<TpsParams> {
        if dst.len() != self.n {
            return Err(DdnError::shape(format!(
                "fitter expects {} target points, got {}",
                self.n,
                dst.len()
            )));
        }
        let frame = FitFrame {
            center: self.frame_center,
            scale: self.frame_scale,
        };
        let m = self.grid.len();
        let s = frame.scale;
        // per coordinate: normalized targets -> normalized (u, d)
        let mut coeffs = Matrix::zeros(2, m);
        let mut affine = Matrix::zeros(2, 3);
        for axis in 0..2 {
            let y: Vec<f64> = dst.points().iter().map(|&p| frame.to_unit(p)[axis]).collect();
            let sol = self.response.matvec(&y);
            let u = &sol[..m];
            let d = &sol[m..];
            // back to pixels: U = U'/s, D_lin = D'_lin, translation absorbs
            // the centring and the ln(s) term of the kernel rescaling
            let mut t = s * d[2] + frame.center[axis] - d[0] * frame.center[0] - d[1] * frame.center[1];
            let mut weighted = 0.0;
            for (j, c) in self.grid.points().iter().enumerate() {
                coeffs[(axis, j)] = u[j] / s;
                weighted += u[j] * (c[0] * c[0] + c[1] * c[1]);
            }
            t -= s.ln() / s * weighted;
            affine[(axis, 0)] = d[0];
            affine[(axis, 1)] = d[1];
            affine[(axis, 2)] = t;
        }
        TpsParams::new(affine, coeffs, self.grid.clone())
    }

    /// Fitter whose control points are the source points themselves.
    pub fn anchored(src: &LandmarkSet, gamma: f64) -> Result<Self> {
        TpsFitter::new(src, &ControlGrid::new(1, src.len(), src.points().to_vec())?, gamma)
    }

    /// Warps the grid with the transform fitted to `dst`.
    pub fn control_targets(&self, dst: &LandmarkSet) -> Result<LandmarkSet> {
        self.warp(dst, &self.grid.as_landmarks())
    }

    /// Warps `points` with the transform fitted to `dst`.
    pub fn warp(&self, dst: &LandmarkSet, points: &LandmarkSet) -> Result<LandmarkSet> {
        tps_apply(&self.fit(dst)?, points)
    }
}

fn check_not_collinear(points: &[[f64; 2]]) -> Result<()> {
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    for p in points {
        mean[0] += p[0] / n;
        mean[1] += p[1] / n;
    }
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mean[0], p[1] - mean[1]);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let det = sxx * syy - sxy * sxy;
    let tr = sxx + syy;
    if tr == 0.0 || det <= 1e-12 * tr * tr {
        let rank = if tr == 0.0 { 1 } else { 2 };
        return Err(DdnError::Singular { rank, dim: 3 });
    }
    Ok(())
}

/// Closed-form regularized fit of the transform taking `src` onto `dst`.
///
/// Minimizes `|Y - D Ys~ - U Phi|_F^2 + gamma tr(U K U^T)` subject to the
/// side conditions `U C~^T = 0`, where `K` is the control-point kernel. At
/// `gamma = 0` this is the minimum-bending interpolant.
pub fn tps_fit_closed_form(
    src: &LandmarkSet,
    dst: &LandmarkSet,
    grid: &ControlGrid,
    gamma: f64,
) -> Result<TpsParams> {
    check_pair(src, dst)?;
    TpsFitter::new(src, grid, gamma)?.fit(dst)
}

/// Warps the control grid with the transform fitted from `mean_shape` to
/// `truth` (gamma = 1). The fit uses the mean-shape points as its own
/// control points, so its extrapolation to the grid stays close to affine.
pub fn synthesize_control_targets(
    mean_shape: &LandmarkSet,
    truth: &LandmarkSet,
    grid: &ControlGrid,
) -> Result<LandmarkSet> {
    synthesize_control_targets_with(mean_shape, truth, grid, DEFAULT_GAMMA)
}

pub fn synthesize_control_targets_with(
    mean_shape: &LandmarkSet,
    truth: &LandmarkSet,
    grid: &ControlGrid,
    gamma: f64,
) -> Result<LandmarkSet> {
    check_pair(mean_shape, truth)?;
    TpsFitter::anchored(mean_shape, gamma)?.warp(truth, &grid.as_landmarks())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, relative_error, seeded_rng, Rng};
    use rand::Rng as _;
    use std::f64::consts::E;

    fn random_points(n: usize, rng: &mut Rng) -> LandmarkSet {
        LandmarkSet::new((0..n).map(|_| [rng.gen_range(4.0..60.0), rng.gen_range(4.0..60.0)]).collect()).unwrap()
    }

    fn frame_grid(side: usize) -> ControlGrid {
        ControlGrid::covering_frame(side, side, 64.0, 64.0).unwrap()
    }

    fn random_params(grid: &ControlGrid, rng: &mut Rng) -> TpsParams {
        let affine = Matrix::from_fn(2, 3, |r, c| {
            let base = if r == c { 1.0 } else { 0.0 };
            base + rng.gen_range(-0.2..0.2) * if c == 2 { 10.0 } else { 1.0 }
        });
        let coeffs = Matrix::from_fn(2, grid.len(), |_, _| rng.gen_range(-1e-3..1e-3));
        TpsParams::new(affine, coeffs, grid.clone()).unwrap()
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf(1.0).unwrap(), 0.0);
        assert_eq!(rbf(0.0).unwrap(), 0.0);
        assert!((rbf(E).unwrap() - E * E).abs() < 1e-12);
        assert!(rbf(-0.5).is_err());
    }

    #[test]
    fn kernel_examples() {
        let grid = ControlGrid::regular(2, 2, [0.0, 0.0], [10.0, 10.0]).unwrap();
        let pts = LandmarkSet::new(vec![[10.0, 0.0], [3.0, 7.0]]).unwrap();
        let k = tps_kernel(&pts, &grid);
        assert_eq!((k.rows(), k.cols()), (4, 2));
        assert_eq!(k[(1, 0)], 0.0);

        // one point at unit distance from all four controls
        let grid = ControlGrid::new(2, 2, vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let k = tps_kernel(&LandmarkSet::new(vec![[0.0, 0.0]]).unwrap(), &grid);
        assert!(k.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kernel_matches_double_loop() {
        let mut rng = seeded_rng(1);
        let pts = random_points(5, &mut rng);
        let grid = ControlGrid::new(2, 2, (0..4).map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)]).collect()).unwrap();
        let k = tps_kernel(&pts, &grid);
        for j in 0..4 {
            for i in 0..5 {
                let (p, c) = (pts.point(i), grid.points()[j]);
                let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                let expected = d * d * d.ln();
                assert!((k[(j, i)] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
            }
        }
    }

    #[test]
    fn apply_identity_and_translation() {
        let mut rng = seeded_rng(2);
        let grid = frame_grid(4);
        let pts = random_points(9, &mut rng);
        let id = TpsParams::identity(grid.clone());
        assert_eq!(tps_apply(&id, &pts).unwrap(), pts);
        let mut moved = id.clone();
        moved.affine[(0, 2)] = 2.5;
        moved.affine[(1, 2)] = -1.0;
        let out = tps_apply(&moved, &pts).unwrap();
        assert!(out.max_distance(&pts.translate([2.5, -1.0])) < 1e-12);
    }

    #[test]
    fn apply_single_coefficient() {
        // point at the origin; control 0 at distance e, the rest at distance 1
        let grid = ControlGrid::new(2, 2, vec![[E, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let mut params = TpsParams::identity(grid);
        params.affine[(0, 2)] = 0.5;
        params.coeffs[(0, 0)] = 0.3;
        params.coeffs[(1, 0)] = -0.2;
        let out = tps_apply(&params, &LandmarkSet::new(vec![[0.0, 0.0]]).unwrap()).unwrap();
        let e2 = E * E;
        assert!((out.point(0)[0] - (0.5 + 0.3 * e2)).abs() < 1e-12);
        assert!((out.point(0)[1] - (-0.2 * e2)).abs() < 1e-12);
    }

    #[test]
    fn affine_only_preserves_collinearity() {
        let mut rng = seeded_rng(3);
        let grid = frame_grid(3);
        for _ in 0..20 {
            let mut p = random_params(&grid, &mut rng);
            p.coeffs = Matrix::zeros(2, grid.len());
            let a = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
            let b = [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)];
            let t = rng.gen_range(-1.0..2.0);
            let line = LandmarkSet::new(vec![a, b, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]]).unwrap();
            let w = tps_apply(&p, &line).unwrap();
            let (x, y, z) = (w.point(0), w.point(1), w.point(2));
            let cross = (y[0] - x[0]) * (z[1] - x[1]) - (y[1] - x[1]) * (z[0] - x[0]);
            assert!(cross.abs() < 1e-9 * 64.0 * 64.0);
        }
    }

    #[test]
    fn loss_examples() {
        let mut rng = seeded_rng(4);
        let grid = frame_grid(4);
        let src = random_points(8, &mut rng);
        let id = TpsParams::identity(grid.clone());
        assert_eq!(tps_loss(&id, &src, &src, 1.0).unwrap(), 0.0);

        let mut p = random_params(&grid, &mut rng);
        p.coeffs = Matrix::zeros(2, grid.len());
        let dst = random_points(8, &mut rng);
        let affine_resid = dst.to_matrix().sub(&p.affine.matmul(&src.homogeneous())).frobenius_sq();
        assert_eq!(tps_loss(&p, &src, &dst, 5.0).unwrap(), affine_resid);
        assert_eq!(p.bending_at(&src), 0.0);

        assert!(tps_loss(&p, &src, &random_points(7, &mut rng), 1.0).is_err());
    }

    /// Straight transcription of the objectives with explicit loops.
    fn oracle_loss(params: &TpsParams, src: &LandmarkSet, dst: &LandmarkSet, ctl: &TpsParams, targets: &LandmarkSet, w: &TpsLossWeights) -> f64 {
        let warp = |p: &TpsParams, z: [f64; 2]| -> [f64; 2] {
            let mut out = [0.0; 2];
            for a in 0..2 {
                out[a] = p.affine[(a, 0)] * z[0] + p.affine[(a, 1)] * z[1] + p.affine[(a, 2)];
                for (j, c) in p.grid.points().iter().enumerate() {
                    let d = ((z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2)).sqrt();
                    let phi = if d > 0.0 { d * d * d.ln() } else { 0.0 };
                    out[a] += p.coeffs[(a, j)] * phi;
                }
            }
            out
        };
        let bend = |p: &TpsParams, zs: &[[f64; 2]]| -> f64 {
            let mut s = 0.0;
            for z in zs {
                for a in 0..2 {
                    let mut v = 0.0;
                    for (j, c) in p.grid.points().iter().enumerate() {
                        let d = ((z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2)).sqrt();
                        v += p.coeffs[(a, j)] * if d > 0.0 { d * d * d.ln() } else { 0.0 };
                    }
                    s += v * v;
                }
            }
            s
        };
        let mut total = 0.0;
        for i in 0..src.len() {
            let g = warp(params, src.point(i));
            let y = dst.point(i);
            total += (y[0] - g[0]).powi(2) + (y[1] - g[1]).powi(2);
        }
        total += w.gamma * bend(params, src.points());
        let mut ctl_data = 0.0;
        for (j, c) in ctl.grid.points().iter().enumerate() {
            let g = warp(ctl, *c);
            let y = targets.point(j);
            ctl_data += (y[0] - g[0]).powi(2) + (y[1] - g[1]).powi(2);
        }
        total + w.varphi * ctl_data + w.psi * bend(ctl, ctl.grid.points())
    }

    #[test]
    fn regularized_loss_matches_oracle() {
        let mut rng = seeded_rng(5);
        let grid = frame_grid(4);
        let w = TpsLossWeights::default();
        assert_eq!((w.gamma, w.varphi, w.psi), (1.0, 0.4, 0.4));
        for _ in 0..10 {
            let p = random_params(&grid, &mut rng);
            let c = random_params(&grid, &mut rng);
            let src = random_points(6, &mut rng);
            let dst = random_points(6, &mut rng);
            let targets = random_points(grid.len(), &mut rng);
            let got = tps_regularized_loss(&p, &src, &dst, &c, &targets, &w).unwrap();
            let want = oracle_loss(&p, &src, &dst, &c, &targets, &w);
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
            let plain = tps_loss(&p, &src, &dst, 0.7).unwrap();
            let zeroed = TpsLossWeights { gamma: 0.7, varphi: 0.0, psi: 0.0 };
            assert_eq!(tps_regularized_loss(&p, &src, &dst, &c, &targets, &zeroed).unwrap(), plain);
        }
    }

    #[test]
    fn control_terms_vanish_at_identity() {
        let grid = frame_grid(5);
        let id = TpsParams::identity(grid.clone());
        let pts = LandmarkSet::new(vec![[10.0, 12.0], [30.0, 31.0], [50.0, 20.0]]).unwrap();
        let l = tps_regularized_loss(&id, &pts, &pts, &id, &grid.as_landmarks(), &TpsLossWeights::default()).unwrap();
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn fit_identity_and_affine() {
        let mut rng = seeded_rng(6);
        let grid = frame_grid(10);
        let src = random_points(20, &mut rng);
        let fit = tps_fit_closed_form(&src, &src, &grid, 1.0).unwrap();
        assert!(tps_apply(&fit, &src).unwrap().max_distance(&src) < 1e-8);
        assert!(fit.bending_at(&src) <= 1e-10);

        let a = [[1.1, 0.2, -3.0], [-0.15, 0.9, 4.0]];
        let dst = src.map(|p| {
            [a[0][0] * p[0] + a[0][1] * p[1] + a[0][2], a[1][0] * p[0] + a[1][1] * p[1] + a[1][2]]
        });
        for gamma in [0.0, 1.0] {
            let fit = tps_fit_closed_form(&src, &dst, &grid, gamma).unwrap();
            assert!(tps_apply(&fit, &src).unwrap().max_distance(&dst) <= 1e-8);
            assert!(fit.bending_at(&src) <= 1e-8);
        }
    }

    #[test]
    fn fit_interpolates_at_zero_gamma() {
        let mut rng = seeded_rng(7);
        let grid = frame_grid(10);
        for _ in 0..5 {
            let src = random_points(20, &mut rng);
            let dst = random_points(20, &mut rng);
            let fit = tps_fit_closed_form(&src, &dst, &grid, 0.0).unwrap();
            assert!(tps_apply(&fit, &src).unwrap().max_distance(&dst) <= 1e-8 * 64.0);
        }
    }

    #[test]
    fn fit_smooths_with_gamma() {
        let mut rng = seeded_rng(8);
        let grid = frame_grid(6);
        let src = random_points(12, &mut rng);
        let dst = random_points(12, &mut rng);
        let tight = tps_fit_closed_form(&src, &dst, &grid, 0.0).unwrap();
        let loose = tps_fit_closed_form(&src, &dst, &grid, 1e4).unwrap();
        let err = |p: &TpsParams| tps_apply(p, &src).unwrap().max_distance(&dst);
        assert!(err(&tight) < err(&loose));
    }

    #[test]
    fn fit_rejects_collinear() {
        let grid = frame_grid(5);
        let line = LandmarkSet::new((0..6).map(|i| [i as f64 * 5.0, i as f64 * 3.0 + 1.0]).collect()).unwrap();
        let err = tps_fit_closed_form(&line, &line, &grid, 0.0).unwrap_err();
        assert!(matches!(err, DdnError::Singular { .. }), "{err}");
    }

    #[test]
    fn control_targets_examples() {
        let mut rng = seeded_rng(9);
        let grid = frame_grid(10);
        let mean = random_points(12, &mut rng);
        let same = synthesize_control_targets(&mean, &mean, &grid).unwrap();
        assert!(same.max_distance(&grid.as_landmarks()) < 1e-8);
        let moved = synthesize_control_targets(&mean, &mean.translate([3.0, -2.0]), &grid).unwrap();
        assert!(moved.max_distance(&grid.as_landmarks().translate([3.0, -2.0])) < 1e-8);
    }

    #[test]
    fn control_targets_recover_known_warp() {
        // Build a warp anchored at the mean shape that satisfies the
        // optimality conditions of the gamma = 1 fit by construction, generate the truth from it and check
        // that synthesis returns the grid warped by that same transform.
        let mut rng = seeded_rng(10);
        let frame = frame_grid(10);
        let mean = random_points(12, &mut rng);
        let n = mean.len();
        let grid = ControlGrid::new(1, n, mean.points().to_vec()).unwrap();
        let m = grid.len();
        let gamma = DEFAULT_GAMMA;
        let yh = mean.homogeneous();
        let ch = grid.homogeneous();
        let k = grid.self_kernel();
        let phi = tps_kernel(&mean, &grid);

        // multipliers orthogonal to the rows of the homogeneous source
        let raw = Matrix::from_fn(2, n, |_, _| rng.gen_range(-0.05..0.05));
        let gram = yh.matmul_t(&yh);
        let coef = solve_linear(&gram, &yh.matmul_t(&raw)).unwrap();
        let lambda = raw.sub(&coef.transpose().matmul(&yh));

        // [K C~^T; C~ 0] [u; mu] = [Phi lambda^T; 0]
        let mut sys = Matrix::zeros(m + 3, m + 3);
        for r in 0..m {
            for c in 0..m {
                sys[(r, c)] = k[(r, c)];
            }
            for t in 0..3 {
                sys[(r, m + t)] = ch[(t, r)];
                sys[(m + t, r)] = ch[(t, r)];
            }
        }
        let phi_l = phi.matmul(&lambda.transpose());
        let rhs = Matrix::from_fn(m + 3, 2, |r, c| if r < m { phi_l[(r, c)] } else { 0.0 });
        let sol = solve_linear(&sys, &rhs).unwrap();
        let u = Matrix::from_fn(2, m, |a, j| sol[(j, a)]);
        assert!(ch.matmul(&u.transpose()).max_abs() < 1e-9);

        let affine = Matrix::from_vec(2, 3, vec![1.05, 0.1, -2.0, -0.08, 0.97, 3.0]).unwrap();
        let known = TpsParams::new(affine, u, grid.clone()).unwrap();
        let truth_m = known.affine.matmul(&yh).add(&known.coeffs.matmul(&phi)).add(&lambda.scale(gamma));
        let truth = LandmarkSet::from_matrix(&truth_m).unwrap();

        let targets = synthesize_control_targets(&mean, &truth, &frame).unwrap();
        let expected = tps_apply(&known, &frame.as_landmarks()).unwrap();
        assert!(targets.max_distance(&expected) < 1e-6);
    }

    #[test]
    fn fitter_matches_direct_synthesis() {
        let mut rng = seeded_rng(11);
        let grid = frame_grid(10);
        let mean = random_points(12, &mut rng);
        let fitter = TpsFitter::anchored(&mean, 1.0).unwrap();
        for _ in 0..3 {
            let truth = mean.map(|p| [p[0] + rng.gen_range(-3.0..3.0), p[1] + rng.gen_range(-3.0..3.0)]);
            let a = fitter.warp(&truth, &grid.as_landmarks()).unwrap();
            let b = synthesize_control_targets(&mean, &truth, &grid).unwrap();
            assert!(a.max_distance(&b) < 1e-12);
        }
    }

    fn flat(m: &Matrix) -> Vec<f64> {
        m.data().to_vec()
    }

    #[test]
    fn gradient_hand_formula_affine_only() {
        let mut rng = seeded_rng(12);
        let grid = frame_grid(3);
        let mut p = random_params(&grid, &mut rng);
        p.coeffs = Matrix::zeros(2, grid.len());
        let src = random_points(5, &mut rng);
        let dst = random_points(5, &mut rng);
        let w = TpsLossWeights { gamma: 1.0, varphi: 0.0, psi: 0.0 };
        let g = tps_loss_grad(&p, &src, &dst, &p, &grid.as_landmarks(), &w).unwrap();
        let resid = dst.to_matrix().sub(&p.affine.matmul(&src.homogeneous()));
        let hand = resid.matmul(&src.homogeneous().transpose()).scale(-2.0);
        assert!(g.affine.sub(&hand).max_abs() < 1e-9 * hand.max_abs());
        assert_eq!(g.control_affine.max_abs(), 0.0);
    }

    #[test]
    fn gradient_vanishes_at_fitted_optimum() {
        // the interpolating fit zeroes the data term; a small frame keeps
        // kernel entries O(10) so the stationarity check is well scaled
        let mut rng = seeded_rng(13);
        let grid = ControlGrid::covering_frame(5, 5, 4.0, 4.0).unwrap();
        let pts = |rng: &mut Rng| {
            LandmarkSet::new((0..10).map(|_| [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)]).collect()).unwrap()
        };
        let src = pts(&mut rng);
        let dst = pts(&mut rng);
        let fit = tps_fit_closed_form(&src, &dst, &grid, 0.0).unwrap();
        let w = TpsLossWeights { gamma: 0.0, varphi: 0.0, psi: 0.0 };
        let g = tps_loss_grad(&fit, &src, &dst, &fit, &grid.as_landmarks(), &w).unwrap();
        assert!(g.affine.max_abs() <= 1e-6);
        assert!(g.coeffs.max_abs() <= 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(14);
        let grid = frame_grid(3);
        let w = TpsLossWeights::default();
        for _ in 0..100 {
            let p = random_params(&grid, &mut rng);
            let c = random_params(&grid, &mut rng);
            let src = random_points(5, &mut rng);
            let dst = random_points(5, &mut rng);
            let targets = random_points(grid.len(), &mut rng);
            let g = tps_loss_grad(&p, &src, &dst, &c, &targets, &w).unwrap();

            let loss = |p: &TpsParams, c: &TpsParams, s: &LandmarkSet| {
                tps_regularized_loss(p, s, &dst, c, &targets, &w).unwrap()
            };
            let num_d = finite_diff_grad(|v| {
                let mut q = p.clone();
                q.affine = Matrix::from_vec(2, 3, v.to_vec()).unwrap();
                loss(&q, &c, &src)
            }, p.affine.data(), 1e-5).unwrap();
            assert!(relative_error(&flat(&g.affine), &num_d) < 1e-5);

            let num_u = finite_diff_grad(|v| {
                let mut q = p.clone();
                q.coeffs = Matrix::from_vec(2, grid.len(), v.to_vec()).unwrap();
                loss(&q, &c, &src)
            }, p.coeffs.data(), 1e-7).unwrap();
            assert!(relative_error(&flat(&g.coeffs), &num_u) < 1e-5);

            let num_dc = finite_diff_grad(|v| {
                let mut q = c.clone();
                q.affine = Matrix::from_vec(2, 3, v.to_vec()).unwrap();
                loss(&p, &q, &src)
            }, c.affine.data(), 1e-5).unwrap();
            assert!(relative_error(&flat(&g.control_affine), &num_dc) < 1e-5);

            let num_uc = finite_diff_grad(|v| {
                let mut q = c.clone();
                q.coeffs = Matrix::from_vec(2, grid.len(), v.to_vec()).unwrap();
                loss(&p, &q, &src)
            }, c.coeffs.data(), 1e-7).unwrap();
            assert!(relative_error(&flat(&g.control_coeffs), &num_uc) < 1e-5);

            let num_src = finite_diff_grad(|v| loss(&p, &c, &LandmarkSet::from_stacked(v).unwrap()), &src.stacked(), 1e-5).unwrap();
            let analytic_src: Vec<f64> = (0..src.len()).flat_map(|i| [g.src[(0, i)], g.src[(1, i)]]).collect();
            assert!(relative_error(&analytic_src, &num_src) < 1e-5);
        }
    }

    #[test]
    fn apply_vjp_matches_finite_differences() {
        let mut rng = seeded_rng(15);
        let grid = frame_grid(3);
        let p = random_params(&grid, &mut rng);
        let pts = random_points(4, &mut rng);
        let up = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let (gd, gu, gp) = tps_apply_vjp(&p, &pts, &up).unwrap();
        let f = |q: &TpsParams, s: &LandmarkSet| {
            let w = tps_apply(q, s).unwrap().to_matrix();
            w.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let nd = finite_diff_grad(|v| { let mut q = p.clone(); q.affine = Matrix::from_vec(2, 3, v.to_vec()).unwrap(); f(&q, &pts) }, p.affine.data(), 1e-5).unwrap();
        assert!(relative_error(gd.data(), &nd) < 1e-6);
        let nu = finite_diff_grad(|v| { let mut q = p.clone(); q.coeffs = Matrix::from_vec(2, grid.len(), v.to_vec()).unwrap(); f(&q, &pts) }, p.coeffs.data(), 1e-6).unwrap();
        assert!(relative_error(gu.data(), &nu) < 1e-6);
        let np = finite_diff_grad(|v| f(&p, &LandmarkSet::from_stacked(v).unwrap()), &pts.stacked(), 1e-5).unwrap();
        let ap: Vec<f64> = (0..4).flat_map(|i| [gp[(0, i)], gp[(1, i)]]).collect();
        assert!(relative_error(&ap, &np) < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[test]
    fn displacement_map_meets_side_conditions_and_projects() {
        let grid = ControlGrid::covering_frame(4, 5, 32.0, 24.0).unwrap();
        let m = grid.len();
        let mut rng = seeded_rng(11);
        let r = Matrix::from_fn(2, m, |_, _| rng.gen_range(-2.0..2.0));
        let map = grid.displacement_map().unwrap();
        let u = r.matmul(map);
        let side = u.matmul_t(&grid.homogeneous());
        assert!(side.max_abs() < 1e-9, "{}", side.max_abs());
        // P = M K is a symmetric idempotent of rank m - 3 that fixes the
        // kernel part of any admissible U
        let p = map.matmul(grid.self_kernel());
        assert!(p.sub(&p.transpose()).max_abs() < 1e-8);
        assert!(p.matmul(&p).sub(&p).max_abs() < 1e-8);
        assert!((p.trace() - (m - 3) as f64).abs() < 1e-8);
        let v = u.matmul(grid.self_kernel());
        assert!(v.matmul(map).sub(&u).max_abs() < 1e-9);
    }

    proptest! {
            #[test]
            fn bending_nonnegative_and_zero_without_coeffs(seed in 0u64..1000) {
                let mut rng = seeded_rng(seed);
                let grid = frame_grid(4);
                let p = random_params(&grid, &mut rng);
                let pts = random_points(7, &mut rng);
                prop_assert!(p.bending_at(&pts) >= 0.0);
                let affine = TpsParams::affine_only(p.affine.clone(), grid).unwrap();
                prop_assert_eq!(affine.bending_at(&pts), 0.0);
            }
        }
    }
}
