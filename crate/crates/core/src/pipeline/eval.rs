//! Held-out evaluation: Chamfer and normal error over the fixed-grid cloud,
//! against freshly drawn ground truth for each repeat.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, PosedBody};
use crate::codec::ScaleModel;
use crate::data::{synth_clothed_scan, Frame, Generator};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::loss::{chamfer, normal_loss};
use crate::scalar::Real;
use crate::seed::{derive_seed, stream};

/// Reporting units: Chamfer in 1e-4 m^2, normal error in 1e-1.
pub const CHAMFER_SCALE: f64 = 1.0e4;
pub const NORMAL_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    /// One value per repeat.
    pub chamfer: Vec<f64>,
    pub normal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub repeats: usize,
    pub seeds: Vec<u64>,
    /// Predicted points per frame.
    pub points_per_frame: usize,
    pub chamfer: f64,
    pub chamfer_scaled: f64,
    pub normal: Option<f64>,
    pub normal_scaled: Option<f64>,
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    /// Human-readable summary in reporting units.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let normal = self.normal_scaled.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(s, "{:<24} {:<20}", "Chamfer-L2 (×1e-4 m²)", "Normal diff (×1e-1)").unwrap();
        writeln!(s, "{:<24.4} {:<20}", self.chamfer_scaled, normal).unwrap();
        writeln!(s, "frames: {}  repeats: {}  points/frame: {}", self.frames.len(), self.repeats, self.points_per_frame).unwrap();
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn widen<T: Real>(v: &[Vec3<T>]) -> Vec<Vec3<f64>> {
    v.iter().map(|p| geom::cast3(*p)).collect()
}

/// Evaluates `model` on `frames` over `repeats` ground-truth draws.
///
/// With a `generator`, each repeat redraws every frame's scan with a distinct
/// seed; otherwise the stored scans are reused.
pub fn evaluate<T: Real>(
    model: &ScaleModel<T>,
    template: &BodyTemplate<f64>,
    frames: &[Frame<T>],
    generator: Option<&Generator>,
    repeats: usize,
    seed: u64,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if repeats == 0 {
        return Err(Error::invalid("evaluation needs at least one repeat"));
    }
    let tpl = template.cast::<T>();
    model.check_template(&tpl)?;
    let seeds: Vec<u64> = (0..repeats).map(|r| derive_seed(seed, stream::EVAL, r as u64)).collect();

    let per_frame: Vec<(FrameMetrics, usize)> = frames
        .par_iter()
        .enumerate()
        .map(|(fi, frame)| {
            let body = PosedBody::new(&tpl, &frame.pose.cast())?;
            let cloud = model.predict(&body)?;
            let points = widen(&cloud.points);
            let normals = cloud.normals.as_deref().map(widen);
            let mut m = FrameMetrics { frame: frame.scan.frame.clone(), chamfer: Vec::new(), normal: Vec::new() };
            for &s in &seeds {
                let (gt_points, gt_normals) = match generator {
                    Some(g) => {
                        let scan = synth_clothed_scan::<f64>(template, &frame.pose, &g.clothing, g.points_per_scan, derive_seed(s, stream::SCAN, fi as u64))?;
                        (scan.points, scan.normals)
                    }
                    None => (widen(&frame.scan.points), widen(&frame.scan.normals)),
                };
                m.chamfer.push(chamfer(&points, &gt_points)?);
                if let Some(n) = &normals {
                    m.normal.push(normal_loss(&points, n, &gt_points, &gt_normals)?);
                }
            }
            Ok((m, points.len()))
        })
        .collect::<Result<_>>()?;

    let count = (frames.len() * repeats) as f64;
    let chamfer_mean = per_frame.iter().flat_map(|(m, _)| &m.chamfer).sum::<f64>() / count;
    let normal_mean = normals_mean(per_frame.iter().map(|(m, _)| m), count);
    Ok(EvalReport {
        repeats,
        seeds,
        points_per_frame: per_frame[0].1,
        chamfer: chamfer_mean,
        chamfer_scaled: chamfer_mean * CHAMFER_SCALE,
        normal: normal_mean,
        normal_scaled: normal_mean.map(|v| v * NORMAL_SCALE),
        frames: per_frame.into_iter().map(|(m, _)| m).collect(),
    })
}

fn normals_mean<'a>(frames: impl Iterator<Item = &'a FrameMetrics>, count: f64) -> Option<f64> {
    let mut any = false;
    let mut sum = 0.0;
    for m in frames {
        any |= !m.normal.is_empty();
        sum += m.normal.iter().sum::<f64>();
    }
    any.then(|| sum / count)
}
