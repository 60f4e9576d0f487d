//! Localization metrics: percentage of correct keypoints and mean
//! normalized error.
//!
//! Landmark `i` of sample `j` is correct at threshold `alpha` when
//! `|y - y~| <= alpha * D_j`, boundary included.

use std::fmt::Write as _;

use crate::error::{DdnError, Result};
use crate::shape::LandmarkSet;

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub alphas: Vec<f64>,
    /// `per_landmark[i][a]`: fraction of samples whose landmark `i` is
    /// correct at `alphas[a]`.
    pub per_landmark: Vec<Vec<f64>>,
    /// Per-alpha average of `per_landmark`.
    pub mean: Vec<f64>,
    pub samples: usize,
}

fn check_inputs(predictions: &[LandmarkSet], truths: &[LandmarkSet], normalizers: &[f64]) -> Result<usize> {
    if predictions.len() != truths.len() || truths.len() != normalizers.len() {
        return Err(DdnError::shape(format!(
            "{} predictions, {} truths, {} normalizers",
            predictions.len(),
            truths.len(),
            normalizers.len()
        )));
    }
    let n = truths.first().map_or(0, LandmarkSet::len);
    for (j, (p, t)) in predictions.iter().zip(truths).enumerate() {
        if p.len() != n || t.len() != n {
            return Err(DdnError::shape(format!("sample {j} does not have {n} landmarks")));
        }
    }
    if let Some(d) = normalizers.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(DdnError::Domain(format!("normalizer must be positive, got {d}")));
    }
    Ok(n)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn pck(predictions: &[LandmarkSet], truths: &[LandmarkSet], normalizers: &[f64], alphas: &[f64]) -> Result<PckReport> {
    let n = check_inputs(predictions, truths, normalizers)?;
    if alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
        return Err(DdnError::Domain("alphas must be finite and non-negative".into()));
    }
    let samples = truths.len();
    let mut counts = vec![vec![0usize; alphas.len()]; n];
    for ((p, t), d) in predictions.iter().zip(truths).zip(normalizers) {
        for (i, row) in counts.iter_mut().enumerate() {
            let e = distance(p.point(i), t.point(i));
            for (a, c) in alphas.iter().zip(row.iter_mut()) {
                if e <= a * d {
                    *c += 1;
                }
            }
        }
    }
    let denom = samples.max(1) as f64;
    let per_landmark: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / denom).collect())
        .collect();
    let mean = (0..alphas.len())
        .map(|a| {
            if n == 0 {
                0.0
            } else {
                per_landmark.iter().map(|r| r[a]).sum::<f64>() / n as f64
            }
        })
        .collect();
    Ok(PckReport {
        alphas: alphas.to_vec(),
        per_landmark,
        mean,
        samples,
    })
}

/// `100 * mean_{j,i} |y - y~| / D_j`.
pub fn mean_normalized_error(predictions: &[LandmarkSet], truths: &[LandmarkSet], normalizers: &[f64]) -> Result<f64> {
    let n = check_inputs(predictions, truths, normalizers)?;
    if n == 0 || truths.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((p, t), d) in predictions.iter().zip(truths).zip(normalizers) {
        for i in 0..n {
            total += distance(p.point(i), t.point(i)) / d;
        }
    }
    Ok(100.0 * total / (n * truths.len()) as f64)
}

fn alpha_label(a: f64) -> String {
    format!("{a:.2}")
}

impl PckReport {
    /// Mean fraction at `alpha`, if it was evaluated.
    pub fn mean_at(&self, alpha: f64) -> Option<f64> {
        self.alphas.iter().position(|a| *a == alpha).map(|i| self.mean[i])
    }

    /// `landmark,alpha,fraction` rows, then `mean` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("landmark,alpha,fraction\n");
        for (i, row) in self.per_landmark.iter().enumerate() {
            for (a, f) in self.alphas.iter().zip(row) {
                let _ = writeln!(s, "{i},{a},{f}");
            }
        }
        for (a, f) in self.alphas.iter().zip(&self.mean) {
            let _ = writeln!(s, "mean,{a},{f}");
        }
        s
    }

    /// Per-landmark percentages, one row per alpha.
    pub fn landmark_table(&self) -> String {
        let mut s = String::from("alpha ");
        for i in 0..self.per_landmark.len() {
            let _ = write!(s, "{:>6}", format!("L{i}"));
        }
        s.push_str("   mean\n");
        for (a, alpha) in self.alphas.iter().enumerate() {
            let _ = write!(s, "{:<6}", alpha_label(*alpha));
            for row in &self.per_landmark {
                let _ = write!(s, "{:>6.1}", 100.0 * row[a]);
            }
            let _ = writeln!(s, "{:>7.1}", 100.0 * self.mean[a]);
        }
        s
    }
}

/// Side-by-side mean PCK (percent) of several methods, one row per method
/// and one column per alpha.
pub fn comparison_table(rows: &[(&str, &PckReport)]) -> Result<String> {
    let Some((_, first)) = rows.first() else {
        return Ok(String::new());
    };
    if rows.iter().any(|(_, r)| r.alphas != first.alphas) {
        return Err(DdnError::shape("reports were evaluated at different alphas"));
    }
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<width$}", "Method");
    for _ in &first.alphas {
        s.push_str("   PCK");
    }
    let _ = write!(s, "\n{:<width$}", "alpha");
    for a in &first.alphas {
        let _ = write!(s, "{:>6}", alpha_label(*a));
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "{name:<width$}");
        for m in &r.mean {
            let _ = write!(s, "{:>6.1}", 100.0 * m);
        }
        s.push('\n');
    }
    Ok(s)
}
