//! The learnable cascade: a pooling-free stride-2 convolution stack, the
//! shape-basis head and the point-transformer head, with hand-written
//! backward passes.
//!
//! Features are the final activation map flattened channel-major
//! (`c, y, x`). The shape head regresses basis coefficients (scaled per mode
//! by a fixed vector) and decodes them through the frozen PCA basis. The
//! transformer head regresses offsets from the identity transform:
//!
//! ```text
//! D = [I + s_lin A | s_t t - s_lin A c0],  U = s_u R
//! ```
//!
//! where `(A, t, R)` are the raw head outputs and `c0` is the frame centre,
//! so the linear part acts about the centre and a zero output is the
//! identity warp.

use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::image::Image;
use crate::linalg::{Matrix, Rng};
use crate::shape::{decode_shape, BasisCoeffs, LandmarkSet, ShapeBasis};
use crate::tps::{tps_apply, tps_apply_vjp, ControlGrid, TpsParams};

use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Tps,
    Affine,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Tps => "tps",
            TransformKind::Affine => "affine",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tps" => Ok(TransformKind::Tps),
            "affine" => Ok(TransformKind::Affine),
            other => Err(DdnError::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// Trainable parameter groups, frozen and unfrozen as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv,
    SbnHead,
    PtnHead,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::SbnHead => "sbn_head",
            ParamGroup::PtnHead => "ptn_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvStackConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
}

impl Default for ConvStackConfig {
    fn default() -> Self {
        ConvStackConfig {
            input_size: 64,
            input_channels: 1,
            stages: [8, 16, 32, 64]
                .into_iter()
                .map(|channels| ConvStage {
                    channels,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
        }
    }
}

impl ConvStackConfig {
    /// `(channels, height, width)` of the input followed by every stage output.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(DdnError::Config("input size and channels must be positive".into()));
        }
        let mut shapes = vec![(self.input_channels, self.input_size, self.input_size)];
        let mut size = self.input_size;
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || s.kernel == 0 || s.channels == 0 {
                return Err(DdnError::Config(format!("conv stage {i} has a zero dimension")));
            }
            let pad = (s.kernel - 1) / 2;
            if size + 2 * pad < s.kernel {
                return Err(DdnError::Config(format!("conv stage {i} kernel exceeds its input")));
            }
            size = (size + 2 * pad - s.kernel) / s.stride + 1;
            shapes.push((s.channels, size, size));
        }
        Ok(shapes)
    }

    pub fn feature_len(&self) -> Result<usize> {
        let (c, h, w) = *self.shapes()?.last().unwrap();
        Ok(c * h * w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub conv: ConvStackConfig,
    /// Width of the hidden layer in both heads.
    pub hidden: usize,
    pub transform: TransformKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            conv: ConvStackConfig::default(),
            hidden: 128,
            transform: TransformKind::Tps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_size: usize,
    pub out_size: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, in_size: usize, out_size: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            in_size,
            out_size,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Convolution followed by the rectifier.
    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (is, os) = (self.in_size, self.out_size);
        let mut out = vec![0.0; self.out_channels * os * os];
        for o in 0..self.out_channels {
            let plane = &mut out[o * os * os..(o + 1) * os * os];
            plane.fill(self.bias[o]);
            for c in 0..self.in_channels {
                let src = &input[c * is * is..(c + 1) * is * is];
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight[((o * self.in_channels + c) * k + ky) * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        for oy in 0..os {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= is as isize {
                                continue;
                            }
                            let row = &src[iy as usize * is..(iy as usize + 1) * is];
                            let orow = &mut plane[oy * os..(oy + 1) * os];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < is as isize {
                                    *ov += w * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `want_input` is set.
    fn backward(&self, input: &[f64], output: &[f64], grad_out: &[f64], grads: &mut Conv2d, want_input: bool) -> Option<Vec<f64>> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (is, os) = (self.in_size, self.out_size);
        let pre: Vec<f64> = grad_out
            .iter()
            .zip(output)
            .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
            .collect();
        let mut grad_in = if want_input { vec![0.0; self.in_channels * is * is] } else { Vec::new() };
        for o in 0..self.out_channels {
            let gplane = &pre[o * os * os..(o + 1) * os * os];
            grads.bias[o] += gplane.iter().sum::<f64>();
            if gplane.iter().all(|g| *g == 0.0) {
                continue;
            }
            for c in 0..self.in_channels {
                let src = &input[c * is * is..(c + 1) * is * is];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * self.in_channels + c) * k + ky) * k + kx;
                        let w = self.weight[widx];
                        let mut acc = 0.0;
                        for oy in 0..os {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= is as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..os {
                                let ix = (ox * s + kx) as isize - p;
                                if ix < 0 || ix >= is as isize {
                                    continue;
                                }
                                let g = gplane[oy * os + ox];
                                acc += g * src[iy * is + ix as usize];
                                if want_input {
                                    grad_in[(c * is + iy) * is + ix as usize] += w * g;
                                }
                            }
                        }
                        grads.weight[widx] += acc;
                    }
                }
            }
        }
        want_input.then_some(grad_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grads.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn fill_uniform(values: &mut [f64], bound: f64, rng: &mut Rng) {
    for v in values {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Fixed scalings between raw transformer-head outputs and `(D, U)`.
///
/// The raw spline outputs are displacements (pixels, times `coeff`) at the
/// control points; they reach `U` through the grid's displacement map, so
/// the kernel part of the warp at the control points is their projection
/// onto what the kernel can express.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtnOutputScale {
    pub center: [f64; 2],
    pub linear: f64,
    pub translation: f64,
    pub coeff: f64,
}

impl PtnOutputScale {
    pub fn for_frame(size: usize) -> Self {
        let s = (size.max(2)) as f64;
        PtnOutputScale {
            center: [(s - 1.0) / 2.0; 2],
            linear: 2.0 / s,
            translation: 1.0,
            coeff: 1.0,
        }
    }
}

/// All weights of the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub(crate) config: NetworkConfig,
    pub(crate) landmarks: usize,
    pub(crate) rank: usize,
    pub(crate) controls: usize,
    pub(crate) conv: Vec<Conv2d>,
    pub(crate) sbn_hidden: Dense,
    pub(crate) sbn_out: Dense,
    pub(crate) ptn_hidden: Dense,
    pub(crate) ptn_out: Dense,
    /// Per-mode output scale of the shape head; fixed, not trained.
    pub(crate) coeff_scale: Vec<f64>,
    version: u64,
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut Vec<f64>,
}

impl NetworkParams {
    /// Zero-initialized parameters with consistent shapes.
    pub fn zeros(config: &NetworkConfig, landmarks: usize, rank: usize, controls: usize) -> Result<Self> {
        let shapes = config.conv.shapes()?;
        if config.hidden == 0 {
            return Err(DdnError::Config("hidden width must be positive".into()));
        }
        if landmarks == 0 {
            return Err(DdnError::Config("landmark count must be positive".into()));
        }
        let conv = config
            .conv
            .stages
            .iter()
            .enumerate()
            .map(|(i, st)| Conv2d::zeros(shapes[i].0, st.channels, st.kernel, st.stride, shapes[i].1, shapes[i + 1].1))
            .collect();
        let features = config.conv.feature_len()?;
        let ptn_outputs = match config.transform {
            TransformKind::Tps => 6 + 2 * controls,
            TransformKind::Affine => 6,
        };
        Ok(NetworkParams {
            config: config.clone(),
            landmarks,
            rank,
            controls,
            conv,
            sbn_hidden: Dense::zeros(features, config.hidden),
            sbn_out: Dense::zeros(config.hidden, rank),
            ptn_hidden: Dense::zeros(features, config.hidden),
            ptn_out: Dense::zeros(config.hidden, ptn_outputs),
            coeff_scale: vec![1.0; rank],
            version: 0,
        })
    }

    /// Seeded fan-in scaled uniform initialization. The transformer head's
    /// output layer starts at zero so the initial warp is the identity.
    pub fn init(config: &NetworkConfig, basis: &ShapeBasis, grid: &ControlGrid, train_count: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = NetworkParams::zeros(config, basis.landmark_count(), basis.rank(), grid.len())?;
        for layer in &mut p.conv {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            fill_uniform(&mut layer.weight, (6.0 / fan_in).sqrt(), rng);
        }
        let fan = |d: &Dense| d.inputs as f64;
        let b = (6.0 / fan(&p.sbn_hidden)).sqrt();
        fill_uniform(&mut p.sbn_hidden.weight, b, rng);
        let b = (3.0 / fan(&p.sbn_out)).sqrt();
        fill_uniform(&mut p.sbn_out.weight, b, rng);
        let b = (6.0 / fan(&p.ptn_hidden)).sqrt();
        fill_uniform(&mut p.ptn_hidden.weight, b, rng);
        p.coeff_scale = basis.coefficient_scales(train_count);
        Ok(p)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn transform(&self) -> TransformKind {
        self.config.transform
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn controls(&self) -> usize {
        self.controls
    }

    pub fn coeff_scale(&self) -> &[f64] {
        &self.coeff_scale
    }

    pub fn set_coeff_scale(&mut self, scale: Vec<f64>) -> Result<()> {
        if scale.len() != self.rank {
            return Err(DdnError::shape(format!("{} scales for rank {}", scale.len(), self.rank)));
        }
        self.coeff_scale = scale;
        self.version += 1;
        Ok(())
    }

    pub fn conv_layers(&self) -> &[Conv2d] {
        &self.conv
    }

    /// Mutation counter; traces remember the value they were built at.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn feature_len(&self) -> usize {
        self.sbn_hidden.inputs
    }

    /// Same shapes, all zeros; the layout used for gradients.
    pub fn zeros_like(&self) -> NetworkParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z.version = 0;
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push(TensorRef {
                name: format!("conv{i}.weight"),
                group: ParamGroup::Conv,
                shape: vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                data: &c.weight,
            });
            out.push(TensorRef {
                name: format!("conv{i}.bias"),
                group: ParamGroup::Conv,
                shape: vec![c.out_channels],
                data: &c.bias,
            });
        }
        for (prefix, group, d) in [
            ("sbn.hidden", ParamGroup::SbnHead, &self.sbn_hidden),
            ("sbn.out", ParamGroup::SbnHead, &self.sbn_out),
            ("ptn.hidden", ParamGroup::PtnHead, &self.ptn_hidden),
            ("ptn.out", ParamGroup::PtnHead, &self.ptn_out),
        ] {
            out.push(TensorRef {
                name: format!("{prefix}.weight"),
                group,
                shape: vec![d.outputs, d.inputs],
                data: &d.weight,
            });
            out.push(TensorRef {
                name: format!("{prefix}.bias"),
                group,
                shape: vec![d.outputs],
                data: &d.bias,
            });
        }
        out
    }

    /// Mutable access to every trainable tensor, in the order of
    /// [`NetworkParams::tensors`]. Invalidates outstanding traces.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.version += 1;
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            out.push(TensorMut {
                name: format!("conv{i}.weight"),
                group: ParamGroup::Conv,
                data: &mut c.weight,
            });
            out.push(TensorMut {
                name: format!("conv{i}.bias"),
                group: ParamGroup::Conv,
                data: &mut c.bias,
            });
        }
        for (prefix, group, d) in [
            ("sbn.hidden", ParamGroup::SbnHead, &mut self.sbn_hidden),
            ("sbn.out", ParamGroup::SbnHead, &mut self.sbn_out),
            ("ptn.hidden", ParamGroup::PtnHead, &mut self.ptn_hidden),
            ("ptn.out", ParamGroup::PtnHead, &mut self.ptn_out),
        ] {
            out.push(TensorMut {
                name: format!("{prefix}.weight"),
                group,
                data: &mut d.weight,
            });
            out.push(TensorMut {
                name: format!("{prefix}.bias"),
                group,
                data: &mut d.bias,
            });
        }
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.tensors_mut().into_iter().find(|t| t.name == name).map(|t| t.data)
    }

    /// Flattened values of the given groups, in tensor order.
    pub fn flatten(&self, groups: &[ParamGroup]) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|t| groups.contains(&t.group))
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    /// Inverse of [`NetworkParams::flatten`].
    pub fn unflatten(&mut self, groups: &[ParamGroup], values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for t in self.tensors_mut() {
            if !groups.contains(&t.group) {
                continue;
            }
            let len = t.data.len();
            if offset + len > values.len() {
                return Err(DdnError::shape("flat parameter vector too short"));
            }
            t.data.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        if offset != values.len() {
            return Err(DdnError::shape("flat parameter vector too long"));
        }
        Ok(())
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &NetworkParams) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(s.data) {
                *a += b;
            }
        }
    }

    pub fn scale_all(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn ptn_scale(&self) -> PtnOutputScale {
        PtnOutputScale::for_frame(self.config.conv.input_size)
    }

    /// Decodes raw transformer-head outputs into transform parameters.
    pub fn decode_transform(&self, raw: &[f64], grid: &ControlGrid) -> Result<TpsParams> {
        let s = self.ptn_scale();
        let a = [[raw[0] * s.linear, raw[1] * s.linear], [raw[3] * s.linear, raw[4] * s.linear]];
        let t = [raw[2] * s.translation, raw[5] * s.translation];
        let mut d = Matrix::zeros(2, 3);
        for r in 0..2 {
            d[(r, 0)] = if r == 0 { 1.0 } else { 0.0 } + a[r][0];
            d[(r, 1)] = if r == 1 { 1.0 } else { 0.0 } + a[r][1];
            d[(r, 2)] = t[r] - a[r][0] * s.center[0] - a[r][1] * s.center[1];
        }
        let m = grid.len();
        let mut u = Matrix::zeros(2, m);
        if raw.len() > 6 {
            if raw.len() != 6 + 2 * m {
                return Err(DdnError::shape(format!(
                    "transformer head emits {} values, grid needs {}",
                    raw.len(),
                    6 + 2 * m
                )));
            }
            let disp = Matrix::from_fn(2, m, |r, j| raw[6 + r * m + j] * s.coeff);
            u = disp.matmul(grid.displacement_map()?);
        }
        TpsParams::new(d, u, grid.clone())
    }

    /// Chains `(dL/dD, dL/dU)` back to the raw head outputs.
    fn encode_transform_grad(&self, g_affine: &Matrix, g_coeffs: &Matrix, grid: &ControlGrid, outputs: usize) -> Result<Vec<f64>> {
        let s = self.ptn_scale();
        let mut g = vec![0.0; outputs];
        for r in 0..2 {
            for c in 0..2 {
                let ga = g_affine[(r, c)] - g_affine[(r, 2)] * s.center[c];
                g[3 * r + c] = ga * s.linear;
            }
            g[3 * r + 2] = g_affine[(r, 2)] * s.translation;
        }
        if outputs > 6 {
            // U = R M
            let g_disp = g_coeffs.matmul_t(grid.displacement_map()?);
            let m = g_coeffs.cols();
            for r in 0..2 {
                for j in 0..m {
                    g[6 + r * m + j] = g_disp[(r, j)] * s.coeff;
                }
            }
        }
        Ok(g)
    }
}

/// Cached activations of the convolution stack.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    input: Vec<f64>,
    /// Rectified output of every stage; the last one is the feature vector.
    activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SbnTrace {
    hidden: Vec<f64>,
    pub coeffs: BasisCoeffs,
    basis: Matrix,
}

#[derive(Debug, Clone)]
pub struct PtnTrace {
    hidden: Vec<f64>,
    pub transform: TpsParams,
    /// The points that were warped.
    pub source: LandmarkSet,
}

impl PtnTrace {
    /// Rectified hidden activations of the transformer head.
    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    version: u64,
    features: FeatureTrace,
    sbn: Option<SbnTrace>,
    ptn: Option<PtnTrace>,
    /// Whether the transformer warped the shape head's output (as opposed
    /// to a fixed shape such as the mean).
    chained: bool,
}

impl ForwardTrace {
    /// Feature vector shared by both heads.
    pub fn features(&self) -> &[f64] {
        self.features.activations_last()
    }
}

impl ForwardTrace {
    pub fn sbn(&self) -> Option<&SbnTrace> {
        self.sbn.as_ref()
    }

    pub fn ptn(&self) -> Option<&PtnTrace> {
        self.ptn.as_ref()
    }
}

pub fn forward_features(params: &NetworkParams, image: &Image) -> Result<(Vec<f64>, FeatureTrace)> {
    let cfg = &params.config.conv;
    if image.width() != cfg.input_size || image.height() != cfg.input_size || image.channels() != cfg.input_channels {
        return Err(DdnError::shape(format!(
            "image is {}x{}x{}, network expects {}x{}x{}",
            image.width(),
            image.height(),
            image.channels(),
            cfg.input_size,
            cfg.input_size,
            cfg.input_channels
        )));
    }
    let input = image.data().to_vec();
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(params.conv.len());
    for layer in &params.conv {
        let x = activations.last().unwrap_or(&input);
        let y = layer.forward(x);
        activations.push(y);
    }
    let features = activations.last().cloned().unwrap_or_else(|| input.clone());
    Ok((features, FeatureTrace { input, activations }))
}

fn check_features(params: &NetworkParams, features: &[f64]) -> Result<()> {
    if features.len() != params.feature_len() {
        return Err(DdnError::shape(format!(
            "{} features, heads expect {}",
            features.len(),
            params.feature_len()
        )));
    }
    Ok(())
}

/// Shape head: coefficients from features, decoded through the basis.
pub fn forward_sbn(params: &NetworkParams, features: &[f64], basis: &ShapeBasis) -> Result<(LandmarkSet, SbnTrace)> {
    check_features(params, features)?;
    if basis.rank() != params.rank || basis.landmark_count() != params.landmarks {
        return Err(DdnError::shape(format!(
            "basis has rank {} over {} landmarks, network was built for rank {} over {}",
            basis.rank(),
            basis.landmark_count(),
            params.rank,
            params.landmarks
        )));
    }
    let mut hidden = params.sbn_hidden.forward(features);
    relu_in_place(&mut hidden);
    let raw = params.sbn_out.forward(&hidden);
    let coeffs = BasisCoeffs(raw.iter().zip(&params.coeff_scale).map(|(r, s)| r * s).collect());
    let shape = decode_shape(basis, &coeffs)?;
    Ok((
        shape,
        SbnTrace {
            hidden,
            coeffs,
            basis: basis.basis.clone(),
        },
    ))
}

/// Transformer head: transform from features, applied to `source`.
pub fn forward_ptn(params: &NetworkParams, features: &[f64], source: &LandmarkSet, grid: &ControlGrid) -> Result<(LandmarkSet, PtnTrace)> {
    check_features(params, features)?;
    if grid.len() != params.controls {
        return Err(DdnError::shape(format!(
            "grid has {} controls, network was built for {}",
            grid.len(),
            params.controls
        )));
    }
    let mut hidden = params.ptn_hidden.forward(features);
    relu_in_place(&mut hidden);
    let raw = params.ptn_out.forward(&hidden);
    let transform = params.decode_transform(&raw, grid)?;
    let warped = tps_apply(&transform, source)?;
    Ok((
        warped,
        PtnTrace {
            hidden,
            transform,
            source: source.clone(),
        },
    ))
}

/// Which parts of the cascade a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Shape head only.
    Sbn,
    /// Transformer head warping the basis mean.
    PtnFromMean,
    /// Shape head feeding the transformer head.
    Cascade,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Shape-head output, or the mean shape when the head did not run.
    pub coarse: LandmarkSet,
    /// Final output: the warped shape, or `coarse` when no transformer ran.
    pub refined: LandmarkSet,
    pub trace: ForwardTrace,
}

pub fn forward(params: &NetworkParams, image: &Image, basis: &ShapeBasis, grid: &ControlGrid, mode: ForwardMode) -> Result<Forward> {
    let (features, ftrace) = forward_features(params, image)?;
    let (coarse, sbn) = match mode {
        ForwardMode::Sbn | ForwardMode::Cascade => {
            let (y, t) = forward_sbn(params, &features, basis)?;
            (y, Some(t))
        }
        ForwardMode::PtnFromMean => (basis.mean_shape(), None),
    };
    let (refined, ptn) = match mode {
        ForwardMode::Sbn => (coarse.clone(), None),
        _ => {
            let (y, t) = forward_ptn(params, &features, &coarse, grid)?;
            (y, Some(t))
        }
    };
    Ok(Forward {
        coarse,
        refined,
        trace: ForwardTrace {
            version: params.version,
            features: ftrace,
            sbn,
            ptn,
            chained: mode == ForwardMode::Cascade,
        },
    })
}

/// Loss gradients arriving at the network's outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    /// With respect to the warped points, stacked `2n`.
    pub refined: Option<Vec<f64>>,
    /// With respect to the transform parameters `(D, U)` directly.
    pub transform: Option<(Matrix, Matrix)>,
    /// With respect to the shape-head output, stacked `2n`.
    pub coarse: Option<Vec<f64>>,
    /// With respect to the basis coefficients.
    pub coeffs: Option<Vec<f64>>,
}

/// Gradients for every trainable weight, as a [`NetworkParams`]-shaped value.
pub fn backward(params: &NetworkParams, trace: ForwardTrace, upstream: &OutputGrads) -> Result<NetworkParams> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`], adding into an existing gradient buffer.
pub fn backward_into(params: &NetworkParams, trace: ForwardTrace, upstream: &OutputGrads, grads: &mut NetworkParams) -> Result<()> {
    backward_impl(params, trace, upstream, grads, true)
}

/// Like [`backward_into`] but stops at the features: convolution gradients
/// stay untouched. For phases where the convolution stack is frozen.
pub fn backward_heads_into(params: &NetworkParams, trace: ForwardTrace, upstream: &OutputGrads, grads: &mut NetworkParams) -> Result<()> {
    backward_impl(params, trace, upstream, grads, false)
}

fn backward_impl(params: &NetworkParams, trace: ForwardTrace, upstream: &OutputGrads, grads: &mut NetworkParams, conv: bool) -> Result<()> {
    if trace.version != params.version {
        return Err(DdnError::Contract(format!(
            "trace was recorded at parameter version {}, parameters are at {}",
            trace.version, params.version
        )));
    }
    let mut g_feat = vec![0.0; params.feature_len()];
    let mut g_coarse: Option<Vec<f64>> = upstream.coarse.clone();

    let wants_ptn = upstream.refined.is_some() || upstream.transform.is_some();
    match (&trace.ptn, wants_ptn) {
        (Some(ptn), _) => {
            let m = ptn.transform.grid.len();
            let (mut g_d, mut g_u) = upstream
                .transform
                .clone()
                .unwrap_or_else(|| (Matrix::zeros(2, 3), Matrix::zeros(2, m)));
            if g_d.rows() != 2 || g_d.cols() != 3 || g_u.rows() != 2 || g_u.cols() != m {
                return Err(DdnError::shape("transform gradient has the wrong shape"));
            }
            if let Some(g_ref) = &upstream.refined {
                let up = LandmarkSet::from_stacked(g_ref)?.to_matrix();
                let (a, b, c) = tps_apply_vjp(&ptn.transform, &ptn.source, &up)?;
                g_d = g_d.add(&a);
                g_u = g_u.add(&b);
                if trace.chained {
                    let stacked: Vec<f64> = (0..c.cols()).flat_map(|i| [c[(0, i)], c[(1, i)]]).collect();
                    accumulate_opt(&mut g_coarse, &stacked);
                }
            }
            let g_raw = params.encode_transform_grad(&g_d, &g_u, &ptn.transform.grid, params.ptn_out.outputs)?;
            let mut g_hidden = params.ptn_out.backward(&ptn.hidden, &g_raw, &mut grads.ptn_out);
            relu_mask(&mut g_hidden, &ptn.hidden);
            let g = params.ptn_hidden.backward(&trace.features.activations_last(), &g_hidden, &mut grads.ptn_hidden);
            add_into(&mut g_feat, &g);
        }
        (None, true) => {
            return Err(DdnError::Contract("transform gradients given but the transformer head did not run".into()));
        }
        (None, false) => {}
    }

    let wants_sbn = g_coarse.is_some() || upstream.coeffs.is_some();
    match (&trace.sbn, wants_sbn) {
        (Some(sbn), _) => {
            let mut g_x = upstream.coeffs.clone().unwrap_or_else(|| vec![0.0; params.rank]);
            if g_x.len() != params.rank {
                return Err(DdnError::shape("coefficient gradient has the wrong length"));
            }
            if let Some(gy) = &g_coarse {
                // dL/dx = Q^T dL/dy
                add_into(&mut g_x, &sbn.basis.t_matvec(gy));
            }
            let g_raw: Vec<f64> = g_x.iter().zip(&params.coeff_scale).map(|(g, s)| g * s).collect();
            let mut g_hidden = params.sbn_out.backward(&sbn.hidden, &g_raw, &mut grads.sbn_out);
            relu_mask(&mut g_hidden, &sbn.hidden);
            let g = params.sbn_hidden.backward(&trace.features.activations_last(), &g_hidden, &mut grads.sbn_hidden);
            add_into(&mut g_feat, &g);
        }
        (None, true) if upstream.coeffs.is_some() || !trace.chained && upstream.coarse.is_some() => {
            return Err(DdnError::Contract("shape gradients given but the shape head did not run".into()));
        }
        _ => {}
    }

    if !conv {
        return Ok(());
    }
    // convolution stack, last stage first
    let layers = &params.conv;
    let mut g_out = g_feat;
    for l in (0..layers.len()).rev() {
        let input = if l == 0 { &trace.features.input } else { &trace.features.activations[l - 1] };
        let out = &trace.features.activations[l];
        let g_in = layers[l].backward(input, out, &g_out, &mut grads.conv[l], l > 0);
        match g_in {
            Some(g) => g_out = g,
            None => break,
        }
    }
    Ok(())
}

impl FeatureTrace {
    fn activations_last(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&self.input)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn accumulate_opt(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => add_into(d, src),
        None => *dst = Some(src.to_vec()),
    }
}
