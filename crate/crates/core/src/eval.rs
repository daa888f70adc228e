//! Evaluation metrics: per-label Dice, FA-map SSD and deformation quality.

use std::fmt;

use crate::diffeo::jacobian_data;
use crate::error::Result;
use crate::linalg;
use crate::reduce::stable_sum;
use crate::tensor::fa;
use crate::volume::{assert_same_grid, norm3, HasGrid, LabelVolume, TensorVolume, VectorField};

/// Per-label Dice scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub labels: Vec<u16>,
    pub scores: Vec<f64>,
    /// Label absent from both volumes (score reported as 1.0).
    pub absent: Vec<bool>,
    pub mean: f64,
}

impl DiceReport {
    pub fn score(&self, label: u16) -> Option<f64> {
        self.labels.iter().position(|&l| l == label).map(|i| self.scores[i])
    }

    pub fn to_report(&self) -> KeyValueReport {
        let mut r = KeyValueReport::default();
        r.push("metric", "dice");
        for ((l, s), a) in self.labels.iter().zip(&self.scores).zip(&self.absent) {
            r.push(format!("dice.{l}"), format!("{s:.6}"));
            if *a {
                r.push(format!("dice.{l}.absent"), "true");
            }
        }
        r.push("dice.mean", format!("{:.6}", self.mean));
        r
    }
}

/// `2|A∩B| / (|A|+|B|)` for each requested label.
pub fn dice(a: &LabelVolume, b: &LabelVolume, labels: &[u16]) -> Result<DiceReport> {
    assert_same_grid(a, b)?;
    let mut scores = Vec::with_capacity(labels.len());
    let mut absent = Vec::with_capacity(labels.len());
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (ia, ib) = (x == l, y == l);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        if na + nb == 0 {
            scores.push(1.0);
            absent.push(true);
        } else {
            scores.push(2.0 * both as f64 / (na + nb) as f64);
            absent.push(false);
        }
    }
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(DiceReport {
        labels: labels.to_vec(),
        scores,
        absent,
        mean,
    })
}

/// `Σ (FA(F) − FA(M))²` over all voxels.
pub fn fa_ssd(f: &TensorVolume, m: &TensorVolume) -> Result<f64> {
    assert_same_grid(f, m)?;
    let (a, b) = (f.data(), m.data());
    Ok(stable_sum(a.len(), |i| (fa(&a[i]) - fa(&b[i])).powi(2)))
}

/// Summary of a deformation over interior voxels (one voxel away from every face).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationStats {
    pub min_det: f64,
    pub mean_det: f64,
    /// Voxels with `det J <= 0`.
    pub folds: usize,
    pub max_displacement: f64,
    pub voxels: usize,
}

impl DeformationStats {
    pub fn to_report(&self) -> KeyValueReport {
        let mut r = KeyValueReport::default();
        r.push("metric", "defstats");
        r.push("min_det_j", format!("{:.6}", self.min_det));
        r.push("mean_det_j", format!("{:.6}", self.mean_det));
        r.push("folds", self.folds.to_string());
        r.push("max_displacement", format!("{:.6}", self.max_displacement));
        r.push("voxels", self.voxels.to_string());
        r
    }
}

pub fn deformation_stats(phi: &VectorField) -> DeformationStats {
    let g = *phi.grid();
    let jac = jacobian_data(&g, phi.data());
    let (mut min_det, mut sum, mut folds, mut max_disp, mut n) = (f64::INFINITY, 0.0, 0, 0.0f64, 0);
    for (idx, c) in g.voxels() {
        if !g.is_interior(c, 1) {
            continue;
        }
        let d = linalg::det(&jac[idx]);
        min_det = min_det.min(d);
        sum += d;
        folds += (d <= 0.0) as usize;
        max_disp = max_disp.max(norm3(phi.data()[idx]));
        n += 1;
    }
    DeformationStats {
        min_det,
        mean_det: if n > 0 { sum / n as f64 } else { f64::NAN },
        folds,
        max_displacement: max_disp,
        voxels: n,
    }
}

/// Median Euclidean distance between two displacement fields over voxels
/// at least `margin` voxels from every face.
pub fn median_endpoint_error(a: &VectorField, b: &VectorField, margin: usize) -> Result<f64> {
    assert_same_grid(a, b)?;
    let g = *a.grid();
    let mut errs: Vec<f64> = g
        .voxels()
        .filter(|(_, c)| g.is_interior(*c, margin))
        .map(|(i, _)| {
            let (x, y) = (a.data()[i], b.data()[i]);
            norm3([x[0] - y[0], x[1] - y[1], x[2] - y[2]])
        })
        .collect();
    if errs.is_empty() {
        return Ok(0.0);
    }
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    Ok(if n % 2 == 1 {
        errs[n / 2]
    } else {
        0.5 * (errs[n / 2 - 1] + errs[n / 2])
    })
}

/// Ordered `key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValueReport {
    entries: Vec<(String, String)>,
}

impl KeyValueReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Parses lines written by the `Display` impl; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        KeyValueReport { entries }
    }
}

impl fmt::Display for KeyValueReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
