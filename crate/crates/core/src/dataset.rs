//! Synthetic deformable-shape data, annotation files and crops.
//!
//! The synthetic family is a symmetric 12-point face-like template deformed
//! by a few linear modes, an optional global pose change and a small smooth
//! thin-plate-spline jitter. Images are rendered from the landmarks alone
//! (Gaussian blobs plus soft line segments), so identical shapes always give
//! identical images.
//!
//! Annotation formats:
//!
//! * points-text, one shape per file:
//!   ```text
//!   version 1
//!   n_points K
//!   u1 v1
//!   ...
//!   uK vK
//!   ```
//!   Lines consisting of `{` or `}` are ignored on read. The image belonging
//!   to `face.pts` is `face.png`.
//! * delimited table, one record per line: `image_path,u1,v1,...,un,vn`.
//!   Blank lines are skipped.
//!
//! Coordinates are written with the shortest representation that reads
//! back to the same `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DdnError, Result};
use crate::image::Image;
use crate::linalg::{derive_seed, seeded_rng, Rng};
use crate::shape::LandmarkSet;
use crate::tps::{tps_apply, ControlGrid, TpsFitter};

/// How the per-sample reference length is measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalizer {
    /// Distance between two designated landmarks (inter-ocular style).
    Pair { a: usize, b: usize },
    /// Larger side of the landmarks' bounding box.
    BoundingBox,
}

impl Normalizer {
    pub fn measure(&self, shape: &LandmarkSet) -> Result<f64> {
        let d = match *self {
            Normalizer::Pair { a, b } => {
                if a >= shape.len() || b >= shape.len() {
                    return Err(DdnError::Config(format!(
                        "normalizer pair ({a}, {b}) out of range for {} landmarks",
                        shape.len()
                    )));
                }
                let (p, q) = (shape.point(a), shape.point(b));
                (p[0] - q[0]).hypot(p[1] - q[1])
            }
            Normalizer::BoundingBox => {
                let (lo, hi) = shape.bounding_box();
                (hi[0] - lo[0]).max(hi[1] - lo[1])
            }
        };
        if d > 0.0 && d.is_finite() {
            Ok(d)
        } else {
            Err(DdnError::Domain(format!("degenerate normalizer length {d}")))
        }
    }
}

/// One image with its landmarks and reference length.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub truth: LandmarkSet,
    pub normalizer: f64,
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Template landmarks in unit-frame coordinates (`0..1` across the image).
    pub template: Vec<[f64; 2]>,
    /// `mirror[i]` is the landmark that `i` becomes under a horizontal flip.
    pub mirror: Vec<usize>,
    /// Landmark pairs joined by rendered segments.
    pub edges: Vec<[usize; 2]>,
    /// Deformation directions in unit-frame coordinates; orthonormalized
    /// before use.
    pub modes: Vec<Vec<[f64; 2]>>,
    /// Standard deviation (pixels) of the coefficient of each used mode;
    /// the length is the family's rank.
    pub mode_amplitudes: Vec<f64>,
    /// Standard deviation (pixels) of the smooth warp's control offsets.
    pub jitter: f64,
    /// Uniform translation range (pixels, each axis).
    pub translation: f64,
    /// Uniform rotation range (degrees).
    pub rotation: f64,
    /// Uniform relative scale range.
    pub scale: f64,
    /// Landmarks are kept at least this far (pixels) inside the frame.
    pub margin: f64,
    pub blob_sigma: f64,
    pub line_width: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub normalizer: Normalizer,
}

/// Template points; indices 0..3 are the eye corners left to right.
const FACE_TEMPLATE: [[f64; 2]; 12] = [
    [0.28, 0.38],
    [0.42, 0.38],
    [0.58, 0.38],
    [0.72, 0.38],
    [0.32, 0.27],
    [0.68, 0.27],
    [0.50, 0.55],
    [0.38, 0.70],
    [0.50, 0.66],
    [0.62, 0.70],
    [0.50, 0.76],
    [0.50, 0.88],
];

const FACE_MIRROR: [usize; 12] = [3, 2, 1, 0, 5, 4, 6, 9, 8, 7, 10, 11];

const FACE_EDGES: [[usize; 2]; 9] = [[0, 1], [2, 3], [4, 1], [5, 2], [6, 8], [7, 8], [8, 9], [9, 10], [10, 7]];

fn face_modes() -> Vec<Vec<[f64; 2]>> {
    let mode = |f: &dyn Fn(usize, [f64; 2]) -> [f64; 2]| -> Vec<[f64; 2]> {
        FACE_TEMPLATE.iter().enumerate().map(|(i, &p)| f(i, p)).collect()
    };
    vec![
        // mouth opening
        mode(&|i, _| match i {
            8 => [0.0, -0.3],
            10 => [0.0, 1.0],
            11 => [0.0, 0.6],
            7 | 9 => [0.0, 0.3],
            _ => [0.0, 0.0],
        }),
        // turning: the lower face slides sideways, the far eye narrows
        mode(&|i, _| match i {
            6 => [1.0, 0.0],
            7..=11 => [0.7, 0.0],
            2 | 3 | 5 => [-0.3, 0.0],
            _ => [0.0, 0.0],
        }),
        // face elongation about the nose
        mode(&|_, p| [0.0, p[1] - 0.55]),
        // brow raise
        mode(&|i, _| if i == 4 || i == 5 { [0.0, -1.0] } else { [0.0, 0.0] }),
        // smile
        mode(&|i, _| match i {
            7 => [-0.6, -0.8],
            9 => [0.6, -0.8],
            _ => [0.0, 0.0],
        }),
    ]
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            template: FACE_TEMPLATE.to_vec(),
            mirror: FACE_MIRROR.to_vec(),
            edges: FACE_EDGES.to_vec(),
            modes: face_modes(),
            mode_amplitudes: vec![20.0, 16.0, 12.0],
            jitter: 1.5,
            translation: 0.0,
            rotation: 0.0,
            scale: 0.0,
            margin: 2.0,
            blob_sigma: 1.2,
            line_width: 0.7,
            train_count: 800,
            test_count: 200,
            seed: 7,
            normalizer: Normalizer::Pair { a: 0, b: 3 },
        }
    }
}

/// Maximum attempts at drawing an in-frame shape before giving up.
const MAX_DRAWS: usize = 200;

impl SyntheticSpec {
    pub fn landmark_count(&self) -> usize {
        self.template.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.template.len();
        let bad = |m: String| Err(DdnError::Config(m));
        if n < 4 {
            return bad(format!("template needs at least 4 landmarks, has {n}"));
        }
        if self.image_size < 4 {
            return bad("image size must be at least 4".into());
        }
        if self.train_count == 0 || self.test_count == 0 {
            return bad("train and test counts must be at least 1".into());
        }
        if self.mode_amplitudes.len() > self.modes.len() {
            return bad(format!(
                "{} amplitudes but only {} modes",
                self.mode_amplitudes.len(),
                self.modes.len()
            ));
        }
        if self.modes.iter().any(|m| m.len() != n) {
            return bad("every mode needs one offset per landmark".into());
        }
        let nonneg = [self.jitter, self.translation, self.rotation, self.scale, self.margin];
        if self.mode_amplitudes.iter().chain(&nonneg).any(|a| !(*a >= 0.0 && a.is_finite())) {
            return bad("amplitudes and ranges must be finite and non-negative".into());
        }
        if self.scale >= 1.0 {
            return bad("scale range must be below 1".into());
        }
        if !(self.blob_sigma > 0.0) || !(self.line_width > 0.0) {
            return bad("blob sigma and line width must be positive".into());
        }
        validate_mirror(&self.mirror, n)?;
        if self.edges.iter().flatten().any(|&i| i >= n) {
            return bad("edge refers to a missing landmark".into());
        }
        if let Normalizer::Pair { a, b } = self.normalizer {
            if a >= n || b >= n || a == b {
                return bad(format!("normalizer pair ({a}, {b}) is invalid"));
            }
        }
        Ok(())
    }

    fn frame_extent(&self) -> f64 {
        (self.image_size - 1) as f64
    }

    fn template_pixels(&self) -> Vec<f64> {
        let s = self.frame_extent();
        self.template.iter().flat_map(|p| [p[0] * s, p[1] * s]).collect()
    }

    /// Orthonormal stacked directions for the used modes.
    fn orthonormal_modes(&self) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for mode in self.modes.iter().take(self.mode_amplitudes.len()) {
            let mut v: Vec<f64> = mode.iter().flat_map(|p| [p[0], p[1]]).collect();
            for q in &out {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= d * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(DdnError::Config("deformation modes are linearly dependent".into()));
            }
            v.iter_mut().for_each(|a| *a /= norm);
            out.push(v);
        }
        Ok(out)
    }
}

/// Checks that `mirror` is an involutive permutation of `0..n`.
pub fn validate_mirror(mirror: &[usize], n: usize) -> Result<()> {
    if mirror.len() != n {
        return Err(DdnError::Config(format!("mirror permutation has {} entries for {n} landmarks", mirror.len())));
    }
    for (i, &j) in mirror.iter().enumerate() {
        if j >= n || mirror[j] != i {
            return Err(DdnError::Config(format!("mirror permutation is not an involution at {i}")));
        }
    }
    Ok(())
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    template: Vec<f64>,
    modes: Vec<Vec<f64>>,
    jitter_grid: ControlGrid,
    jitter_fitter: TpsFitter,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let size = spec.image_size as f64;
        let jitter_grid = ControlGrid::covering_frame(3, 3, size, size)?;
        let jitter_fitter = TpsFitter::new(&jitter_grid.as_landmarks(), &jitter_grid, 0.0)?;
        Ok(Generator {
            spec,
            template: spec.template_pixels(),
            modes: spec.orthonormal_modes()?,
            jitter_grid,
            jitter_fitter,
        })
    }

    fn draw_shape(&self, rng: &mut Rng) -> Result<LandmarkSet> {
        let spec = self.spec;
        let mut y = self.template.clone();
        for (mode, amp) in self.modes.iter().zip(&spec.mode_amplitudes) {
            let c: f64 = rng.sample::<f64, _>(StandardNormal) * amp;
            for (a, b) in y.iter_mut().zip(mode) {
                *a += c * b;
            }
        }
        let mut shape = LandmarkSet::from_stacked(&y)?;
        if spec.translation > 0.0 || spec.rotation > 0.0 || spec.scale > 0.0 {
            let uniform = |rng: &mut Rng, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
            let theta = uniform(rng, spec.rotation).to_radians();
            let s = 1.0 + uniform(rng, spec.scale);
            let t = [uniform(rng, spec.translation), uniform(rng, spec.translation)];
            let c = self.spec.frame_extent() / 2.0;
            let (sin, cos) = theta.sin_cos();
            shape = shape.map(|p| {
                let (x, y) = (p[0] - c, p[1] - c);
                [c + s * (cos * x - sin * y) + t[0], c + s * (sin * x + cos * y) + t[1]]
            });
        }
        if spec.jitter > 0.0 {
            let displaced = self.jitter_grid.as_landmarks().map(|p| {
                [
                    p[0] + rng.sample::<f64, _>(StandardNormal) * spec.jitter,
                    p[1] + rng.sample::<f64, _>(StandardNormal) * spec.jitter,
                ]
            });
            let warp = self.jitter_fitter.fit(&displaced)?;
            shape = tps_apply(&warp, &shape)?;
        }
        Ok(shape)
    }

    fn in_frame(&self, shape: &LandmarkSet) -> bool {
        let lo = self.spec.margin;
        let hi = self.spec.frame_extent() - self.spec.margin;
        shape.points().iter().flatten().all(|v| *v >= lo && *v <= hi)
    }

    fn sample(&self, seed: u64) -> Result<Sample> {
        let mut rng = seeded_rng(seed);
        for _ in 0..MAX_DRAWS {
            let truth = self.draw_shape(&mut rng)?;
            if self.in_frame(&truth) {
                let normalizer = self.spec.normalizer.measure(&truth)?;
                let image = render_landmarks(self.spec, &truth);
                return Ok(Sample {
                    image,
                    truth,
                    normalizer,
                });
            }
        }
        Err(DdnError::Domain(format!(
            "no in-frame shape after {MAX_DRAWS} draws; reduce the deformation ranges"
        )))
    }
}

/// Renders landmarks as blobs joined by soft segments, quantized to 8 bits.
pub fn render_landmarks(spec: &SyntheticSpec, shape: &LandmarkSet) -> Image {
    let size = spec.image_size;
    let n = shape.len();
    let blob_peak: Vec<f64> = (0..n).map(|i| 0.55 + 0.45 * (i as f64 + 1.0) / n as f64).collect();
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let two_w2 = 2.0 * spec.line_width * spec.line_width;
    let reach = 4.0 * spec.blob_sigma.max(spec.line_width);
    let mut img = Image::zeros(size, size, 1);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64, y as f64);
            let mut val: f64 = 0.0;
            for (i, p) in shape.points().iter().enumerate() {
                let (du, dv) = (u - p[0], v - p[1]);
                if du.abs() > reach || dv.abs() > reach {
                    continue;
                }
                val = val.max(blob_peak[i] * (-(du * du + dv * dv) / two_s2).exp());
            }
            for e in &spec.edges {
                let d2 = segment_distance_sq([u, v], shape.point(e[0]), shape.point(e[1]));
                if d2 < reach * reach {
                    val = val.max(0.35 * (-d2 / two_w2).exp());
                }
            }
            img.set(0, y, x, val);
        }
    }
    img.quantize();
    img
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0] * d[0] + d[1] * d[1]
}

/// Draws the train and test splits. Each sample has its own derived seed,
/// so the result does not depend on how the work is scheduled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let gen = Generator::new(spec)?;
    let split = |tag: u64, count: usize| -> Result<Vec<Sample>> {
        (0..count)
            .into_par_iter()
            .map(|i| gen.sample(derive_seed(spec.seed, &[tag, i as u64])))
            .collect()
    };
    Ok((split(0, spec.train_count)?, split(1, spec.test_count)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    PointsText,
    DelimitedTable,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = DdnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points-text" => Ok(AnnotationFormat::PointsText),
            "delimited-table" => Ok(AnnotationFormat::DelimitedTable),
            other => Err(DdnError::Config(format!("unknown annotation format {other:?}"))),
        }
    }
}

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image: PathBuf,
    pub landmarks: LandmarkSet,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DdnError::io(path, e))
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DdnError::Parse {
        line,
        message: format!("expected a finite number, found {token:?}"),
    })
}

/// Parses one points-text document.
pub fn parse_points_text(text: &str) -> Result<LandmarkSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && *l != "{" && *l != "}");
    let mut header = |key: &str| -> Result<String> {
        let (no, line) = lines.next().ok_or_else(|| DdnError::Parse {
            line: 0,
            message: format!("missing {key} header"),
        })?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
            _ => Err(DdnError::Parse {
                line: no,
                message: format!("expected `{key} <value>`, found {line:?}"),
            }),
        }
    };
    let version = header("version")?;
    if version != "1" {
        return Err(DdnError::Format(format!("unsupported points-text version {version}")));
    }
    let count_text = header("n_points")?;
    let count: usize = count_text.parse().map_err(|_| DdnError::Parse {
        line: 2,
        message: format!("bad point count {count_text:?}"),
    })?;
    let mut points = Vec::with_capacity(count);
    for (no, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(DdnError::Parse {
                line: no,
                message: format!("expected `u v`, found {line:?}"),
            });
        }
        points.push([parse_f64(fields[0], no)?, parse_f64(fields[1], no)?]);
    }
    if points.len() != count {
        return Err(DdnError::Format(format!("header declares {count} points, found {}", points.len())));
    }
    LandmarkSet::new(points)
}

pub fn format_points_text(shape: &LandmarkSet) -> String {
    let mut s = format!("version 1\nn_points {}\n", shape.len());
    for p in shape.points() {
        s.push_str(&format!("{} {}\n", p[0], p[1]));
    }
    s
}

pub fn read_points_text(path: &Path) -> Result<LandmarkSet> {
    parse_points_text(&read_text(path)?)
}

pub fn write_points_text(path: &Path, shape: &LandmarkSet) -> Result<()> {
    fs::write(path, format_points_text(shape)).map_err(|e| DdnError::io(path, e))
}

/// Parses a delimited table; `base` resolves relative image paths.
pub fn parse_delimited_table(text: &str, base: &Path) -> Result<Vec<Annotation>> {
    let mut out: Vec<Annotation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 || fields.len() % 2 == 0 {
            return Err(DdnError::Parse {
                line: no,
                message: "expected `image_path,u1,v1,...`".into(),
            });
        }
        let coords = fields[1..].iter().map(|f| parse_f64(f, no)).collect::<Result<Vec<_>>>()?;
        let landmarks = LandmarkSet::from_stacked(&coords)?;
        if let Some(first) = out.first() {
            if first.landmarks.len() != landmarks.len() {
                return Err(DdnError::Format(format!(
                    "line {no} has {} landmarks, earlier records have {}",
                    landmarks.len(),
                    first.landmarks.len()
                )));
            }
        }
        out.push(Annotation {
            image: base.join(fields[0].trim()),
            landmarks,
        });
    }
    Ok(out)
}

pub fn format_delimited_table(records: &[(String, LandmarkSet)]) -> String {
    let mut s = String::new();
    for (path, shape) in records {
        s.push_str(path);
        for v in shape.stacked() {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Reads annotations. For points-text, `path` is a single file or a
/// directory whose `*.pts` files are read in name order.
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<Annotation>> {
    match format {
        AnnotationFormat::DelimitedTable => {
            let base = path.parent().unwrap_or(Path::new(""));
            parse_delimited_table(&read_text(path)?, base)
        }
        AnnotationFormat::PointsText => {
            let files = if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(path)
                    .map_err(|e| DdnError::io(path, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "pts"))
                    .collect();
                files.sort();
                files
            } else {
                vec![path.to_path_buf()]
            };
            let mut out: Vec<Annotation> = Vec::with_capacity(files.len());
            for f in files {
                let text = read_text(&f)?;
                if text.trim().is_empty() {
                    continue;
                }
                let landmarks = parse_points_text(&text)?;
                if let Some(first) = out.first() {
                    if first.landmarks.len() != landmarks.len() {
                        return Err(DdnError::Format(format!(
                            "{} has {} landmarks, earlier files have {}",
                            f.display(),
                            landmarks.len(),
                            first.landmarks.len()
                        )));
                    }
                }
                out.push(Annotation {
                    image: f.with_extension("png"),
                    landmarks,
                });
            }
            Ok(out)
        }
    }
}

/// Axis-aligned crop window in pixel coordinates. Output pixel `(i, j)`
/// samples the source at `(x0 + i s, y0 + j s)` with `s = width / target`,
/// so landmarks map as `u' = (u - x0) / s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Resamples a window of `sample` to `target_width x target_height` pixels.
/// The window and target must share an aspect ratio, so the landmark map is
/// a similarity and the normalizer scales with it.
pub fn crop_and_resize(sample: &Sample, window: CropBox, target_width: usize, target_height: usize) -> Result<Sample> {
    let CropBox { x0, y0, width, height } = window;
    if ![x0, y0, width, height].iter().all(|v| v.is_finite()) || !(width > 0.0 && height > 0.0) {
        return Err(DdnError::Domain(format!("degenerate crop box {window:?}")));
    }
    if target_width == 0 || target_height == 0 {
        return Err(DdnError::Domain("crop target size must be positive".into()));
    }
    let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
    if x0 >= w || y0 >= h || x0 + width <= 0.0 || y0 + height <= 0.0 {
        return Err(DdnError::Domain(format!("crop box {window:?} misses the image")));
    }
    let s = width / target_width as f64;
    let sy = height / target_height as f64;
    if (s - sy).abs() > 1e-12 * s.max(sy) {
        return Err(DdnError::Domain(format!(
            "crop scales differ between axes ({s} vs {sy}); keep the aspect ratio"
        )));
    }
    let image = sample
        .image
        .resample(target_width, target_height, |i, j| (x0 + i * s, y0 + j * s));
    let truth = sample.truth.map(|p| [(p[0] - x0) / s, (p[1] - y0) / s]);
    Ok(Sample {
        image,
        truth,
        normalizer: sample.normalizer / s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::build_shape_basis;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_count: 30,
            test_count: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        SyntheticSpec::default().validate().unwrap();
        assert_eq!(SyntheticSpec::default().landmark_count(), 12);
    }

    #[test]
    fn zero_amplitudes_give_the_template() {
        let spec = SyntheticSpec {
            mode_amplitudes: vec![0.0; 3],
            jitter: 0.0,
            ..small_spec()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        let template = LandmarkSet::from_stacked(&spec.template_pixels()).unwrap();
        for s in train.iter().chain(&test) {
            assert_eq!(s.truth, template);
        }
    }

    #[test]
    fn rank_one_family_has_rank_one_basis() {
        let spec = SyntheticSpec {
            mode_amplitudes: vec![5.0],
            jitter: 0.0,
            ..small_spec()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let shapes: Vec<_> = train.iter().map(|s| s.truth.clone()).collect();
        assert_eq!(build_shape_basis(&shapes, 0.99).unwrap().rank(), 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn rendering_depends_only_on_landmarks() {
        let spec = small_spec();
        let (train, _) = generate_synthetic(&spec).unwrap();
        for s in &train[..3] {
            assert_eq!(render_landmarks(&spec, &s.truth), s.image);
        }
    }

    #[test]
    fn samples_stay_in_frame() {
        let spec = small_spec();
        let (train, test) = generate_synthetic(&spec).unwrap();
        let hi = (spec.image_size - 1) as f64 - spec.margin;
        for s in train.iter().chain(&test) {
            assert!(s.truth.points().iter().flatten().all(|v| *v >= spec.margin && *v <= hi));
            assert!(s.normalizer > 0.0);
        }
    }

    #[test]
    fn face_mirror_is_an_involution() {
        validate_mirror(&FACE_MIRROR, 12).unwrap();
        assert!(validate_mirror(&[1, 2, 0], 3).is_err());
    }

    #[test]
    fn points_text_round_trip() {
        let shape = LandmarkSet::new(vec![[1.5, 2.25], [0.1, 1e-7], [33.0, 12.125]]).unwrap();
        let text = format_points_text(&shape);
        assert_eq!(text, "version 1\nn_points 3\n1.5 2.25\n0.1 0.0000001\n33 12.125\n");
        assert_eq!(parse_points_text(&text).unwrap(), shape);
        let braced = "version 1\nn_points 1\n{\n4 5\n}\n";
        assert_eq!(parse_points_text(braced).unwrap().points(), &[[4.0, 5.0]]);
    }

    #[test]
    fn malformed_points_line_reports_line_number() {
        let err = parse_points_text("version 1\nn_points 2\n1 2\n3 x\n").unwrap_err();
        assert!(matches!(err, DdnError::Parse { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn table_parsing() {
        assert!(parse_delimited_table("", Path::new("")).unwrap().is_empty());
        let recs = parse_delimited_table("a.png,1,2,3,4,5.5,6\n", Path::new("d")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].image, Path::new("d/a.png"));
        assert_eq!(recs[0].landmarks.stacked(), vec![1.0, 2.0, 3.0, 4.0, 5.5, 6.0]);
        let err = parse_delimited_table("a,1,2,3,4\nb,1,2\n", Path::new("")).unwrap_err();
        assert!(matches!(err, DdnError::Format(_)));
        let err = parse_delimited_table("a,1,2\nb,1,oops\n", Path::new("")).unwrap_err();
        assert!(matches!(err, DdnError::Parse { line: 2, .. }));
    }

    fn test_sample() -> Sample {
        let spec = small_spec();
        generate_synthetic(&spec).unwrap().0.swap_remove(0)
    }

    #[test]
    fn full_crop_is_identity() {
        let s = test_sample();
        let out = crop_and_resize(&s, CropBox { x0: 0.0, y0: 0.0, width: 64.0, height: 64.0 }, 64, 64).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn half_size_crop_halves_coordinates() {
        let s = test_sample();
        let out = crop_and_resize(&s, CropBox { x0: 0.0, y0: 0.0, width: 64.0, height: 64.0 }, 32, 32).unwrap();
        for (a, b) in out.truth.points().iter().zip(s.truth.points()) {
            assert_eq!(*a, [b[0] / 2.0, b[1] / 2.0]);
        }
        assert_eq!(out.normalizer, s.normalizer / 2.0);
    }

    #[test]
    fn degenerate_crops_are_rejected() {
        let s = test_sample();
        for b in [
            CropBox { x0: 0.0, y0: 0.0, width: 0.0, height: 10.0 },
            CropBox { x0: 100.0, y0: 0.0, width: 10.0, height: 10.0 },
            CropBox { x0: 0.0, y0: 0.0, width: 10.0, height: 20.0 },
        ] {
            assert!(matches!(crop_and_resize(&s, b, 16, 16), Err(DdnError::Domain(_))));
        }
    }
}
