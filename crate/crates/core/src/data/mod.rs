//! Synthetic clothed-scan datasets, point-cloud files and sequence splits.

mod clothing;
mod motion;
mod ply;

pub use clothing::{rotation_angle, synth_clothed_scan, AreaSampler, ClothingConfig, Garment, GarmentSample, HemConfig};
pub use motion::{generate_motion, MotionConfig};
pub use ply::{dequantize_color, load_ply, quantize_color, save_ply, PlyFormat};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{load_poses, load_template, make_procedural_body, save_poses, save_template, BlobMode, BodyConfig, BodyTemplate, Pose};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::Real;
use crate::seed::{derive_rng, derive_seed, stream};

pub const DEFAULT_SCAN_POINTS: usize = 40_000;
const MANIFEST_FORMAT: &str = "ale-dataset";
const MANIFEST_VERSION: u32 = 1;

/// Oriented (optionally colored) point cloud of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Scan<T> {
    pub points: Vec<Vec3<T>>,
    pub normals: Vec<Vec3<T>>,
    pub colors: Option<Vec<Vec3<T>>>,
    /// `<sequence>/<frame>` label; empty when unknown.
    pub frame: String,
    /// Index of the frame's pose within its sequence's pose file.
    pub pose_index: Option<usize>,
}

impl<T: Real> Scan<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.normals.len() != n || self.colors.as_ref().is_some_and(|c| c.len() != n) {
            return Err(Error::dim(format!("scan {}: attribute counts differ from {n} points", self.frame)));
        }
        let finite = |v: &Vec<Vec3<T>>| v.iter().flatten().all(|x| x.is_finite());
        if !finite(&self.points) || !finite(&self.normals) {
            return Err(Error::invalid(format!("scan {}: non-finite coordinates", self.frame)));
        }
        Ok(())
    }
}

/// Seeded shuffle of `ids`; the first `ceil(ratio * n)` go to training.
pub fn split_sequences<S: Clone>(ids: &[S], ratio: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot split an empty sequence list"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut derive_rng(seed, stream::SPLIT, 0));
    // tolerate ratio * n landing a rounding error above an integer
    let n_train = ((ratio * ids.len() as f64) - 1e-9).ceil() as usize;
    let pick = |ix: &[usize]| ix.iter().map(|&i| ids[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How the scans were generated; lets evaluation redraw ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub clothing: ClothingConfig,
    pub points_per_scan: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub split: Split,
    /// Pose file, relative to the manifest.
    pub poses: String,
    /// Scan files, relative to the manifest, one per pose.
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub template: String,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub generator: Option<Generator>,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("expected {MANIFEST_FORMAT} version {MANIFEST_VERSION}")));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, split: Split) -> (usize, usize) {
        let seqs = self.sequences.iter().filter(|s| s.split == split);
        seqs.fold((0, 0), |(s, f), e| (s + 1, f + e.frames.len()))
    }
}

/// One posed frame with its scan.
#[derive(Clone, Debug)]
pub struct Frame<T> {
    pub sequence: usize,
    pub index: usize,
    pub pose: Pose<f64>,
    pub scan: Scan<T>,
}

#[derive(Clone, Debug)]
pub struct Sequence<T> {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Frame<T>>,
}

/// A body template with its posed, scanned sequences.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub template: BodyTemplate<f64>,
    pub sequences: Vec<Sequence<T>>,
    pub generator: Option<Generator>,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl<T: Real> Dataset<T> {
    pub fn frames(&self, split: Split) -> impl Iterator<Item = &Frame<T>> {
        self.sequences.iter().filter(move |s| s.split == split).flat_map(|s| &s.frames)
    }

    /// Frames of `split` in dataset order.
    pub fn collect(&self, split: Split) -> Vec<Frame<T>> {
        self.frames(split).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub body: BodyConfig,
    pub motion: MotionConfig,
    pub clothing: ClothingConfig,
    pub points_per_scan: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub ply_format: PlyFormat,
    /// Store large template arrays in a sibling binary file.
    pub template_blob: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            body: BodyConfig::default(),
            motion: MotionConfig::default(),
            clothing: ClothingConfig::default(),
            points_per_scan: DEFAULT_SCAN_POINTS,
            split_ratio: 0.7,
            seed: 0,
            ply_format: PlyFormat::BinaryLittleEndian,
            template_blob: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.body.validate()?;
        self.motion.validate()?;
        self.clothing.validate()?;
        if self.points_per_scan == 0 {
            return Err(Error::invalid("points_per_scan must be positive"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid(format!("split_ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        Ok(())
    }
}

pub fn sequence_id(s: usize) -> String {
    format!("seq{s:03}")
}

/// Seed of the ground-truth scan of frame `f` of sequence `s`.
pub fn scan_seed(master: u64, s: usize, f: usize) -> u64 {
    derive_seed(master, stream::SCAN, ((s as u64) << 32) | f as u64)
}

/// Builds the whole synthetic dataset in memory.
pub fn synthesize<T: Real>(config: &SynthConfig) -> Result<Dataset<T>> {
    config.validate()?;
    let template = make_procedural_body::<f64>(&config.body, derive_seed(config.seed, stream::BODY, 0))?;
    let motion = generate_motion(&config.motion, &template, derive_seed(config.seed, stream::MOTION, 0))?;
    let ids: Vec<usize> = (0..motion.len()).collect();
    let (train, _) = split_sequences(&ids, config.split_ratio, config.seed)?;
    let generator = Generator { clothing: config.clothing.clone(), points_per_scan: config.points_per_scan, seed: config.seed };

    let jobs: Vec<(usize, usize, Pose<f64>)> = motion
        .iter()
        .enumerate()
        .flat_map(|(s, poses)| poses.iter().enumerate().map(move |(f, p)| (s, f, p.clone())))
        .collect();
    let frames: Vec<Frame<T>> = jobs
        .into_par_iter()
        .map(|(s, f, pose)| {
            let mut scan = synth_clothed_scan(&template, &pose, &generator.clothing, generator.points_per_scan, scan_seed(generator.seed, s, f))?;
            scan.frame = format!("{}/{f:04}", sequence_id(s));
            scan.pose_index = Some(f);
            Ok(Frame { sequence: s, index: f, pose, scan })
        })
        .collect::<Result<_>>()?;

    let mut sequences: Vec<Sequence<T>> = (0..motion.len())
        .map(|s| Sequence {
            id: sequence_id(s),
            split: if train.contains(&s) { Split::Train } else { Split::Test },
            frames: Vec::new(),
        })
        .collect();
    for fr in frames {
        sequences[fr.sequence].frames.push(fr);
    }
    Ok(Dataset { template, sequences, generator: Some(generator), split_ratio: config.split_ratio, split_seed: config.seed })
}

/// Writes template, pose files, scans and `manifest.json` under `dir`.
pub fn write_dataset<T: Real>(dataset: &Dataset<T>, dir: &Path, ply_format: PlyFormat, blob: bool) -> Result<PathBuf> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(dir)?;
    let mode = if blob { BlobMode::Sibling } else { BlobMode::Inline };
    save_template(&dataset.template, &dir.join("body.json"), mode)?;
    mkdir(&dir.join("poses"))?;
    let mut entries = Vec::new();
    for seq in &dataset.sequences {
        let poses: Vec<Pose<f64>> = seq.frames.iter().map(|f| f.pose.clone()).collect();
        let pose_file = format!("poses/{}.json", seq.id);
        save_poses(&poses, &dir.join(&pose_file))?;
        mkdir(&dir.join("scans").join(&seq.id))?;
        let frames = seq
            .frames
            .iter()
            .map(|f| {
                let rel = format!("scans/{}/{:04}.ply", seq.id, f.index);
                save_ply(&f.scan, &dir.join(&rel), ply_format)?;
                Ok(rel)
            })
            .collect::<Result<_>>()?;
        entries.push(SequenceEntry { id: seq.id.clone(), split: seq.split, poses: pose_file, frames });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        template: "body.json".into(),
        split_ratio: dataset.split_ratio,
        split_seed: dataset.split_seed,
        generator: dataset.generator.clone(),
        sequences: entries,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Loads the dataset described by a manifest, optionally only one split.
pub fn load_dataset<T: Real>(manifest_path: &Path, only: Option<Split>) -> Result<Dataset<T>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let template = load_template::<f64>(&base.join(&manifest.template))?;
    let mut sequences = Vec::new();
    for (s, entry) in manifest.sequences.iter().enumerate() {
        if only.is_some_and(|sp| sp != entry.split) {
            continue;
        }
        let pose_path = base.join(&entry.poses);
        let poses = load_poses::<f64>(&pose_path)?;
        if poses.len() != entry.frames.len() {
            return Err(Error::format(&pose_path, format!("{} poses for {} frames", poses.len(), entry.frames.len())));
        }
        let frames = poses
            .into_iter()
            .zip(&entry.frames)
            .enumerate()
            .map(|(f, (pose, rel))| {
                pose.validate(template.joint_count())?;
                let scan = load_ply::<T>(&base.join(rel))?;
                scan.validate()?;
                Ok(Frame { sequence: s, index: f, pose, scan })
            })
            .collect::<Result<_>>()?;
        sequences.push(Sequence { id: entry.id.clone(), split: entry.split, frames });
    }
    Ok(Dataset {
        template,
        sequences,
        generator: manifest.generator,
        split_ratio: manifest.split_ratio,
        split_seed: manifest.split_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let ids: Vec<u32> = (0..10).collect();
        let (tr, te) = split_sequences(&ids, 0.7, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        assert_eq!(split_sequences(&ids, 0.7, 3).unwrap(), (tr.clone(), te.clone()));
        let mut all: Vec<u32> = tr.iter().chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, ids);
        let (tr13, te13) = split_sequences(&(0..13).collect::<Vec<_>>(), 0.7, 0).unwrap();
        assert_eq!((tr13.len(), te13.len()), (10, 3));
        assert!(split_sequences::<u32>(&[], 0.7, 0).is_err());
        assert!(split_sequences(&ids, 1.0, 0).is_err());
    }

    fn tiny() -> SynthConfig {
        SynthConfig {
            motion: MotionConfig { sequences: 4, frames_per_sequence: 2, ..MotionConfig::default() },
            points_per_scan: 500,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize::<f32>(&tiny()).unwrap();
        assert_eq!(ds.sequences.iter().filter(|s| s.split == Split::Train).count(), 3);
        let path = write_dataset(&ds, dir.path(), PlyFormat::BinaryLittleEndian, true).unwrap();
        let back = load_dataset::<f32>(&path, None).unwrap();
        assert_eq!(back.template, ds.template);
        for (a, b) in ds.sequences.iter().zip(&back.sequences) {
            assert_eq!((a.id.as_str(), a.split), (b.id.as_str(), b.split));
            for (x, y) in a.frames.iter().zip(&b.frames) {
                // rotations are stored as quaternions
                let rots = |p: &Pose<f64>| p.joint_rotations.iter().chain([&p.root_rotation]).flatten().flatten().copied().collect::<Vec<_>>();
                assert!(rots(&x.pose).iter().zip(rots(&y.pose)).all(|(u, v)| (u - v).abs() < 1e-12));
                assert_eq!(x.pose.root_translation, y.pose.root_translation);
                assert_eq!(x.scan, y.scan);
            }
        }
        let test_only = load_dataset::<f32>(&path, Some(Split::Test)).unwrap();
        assert!(test_only.sequences.iter().all(|s| s.split == Split::Test));
        assert_eq!(Manifest::load(&path).unwrap().count(Split::Test).0, test_only.sequences.len());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize::<f64>(&tiny()).unwrap();
        let b = synthesize::<f64>(&tiny()).unwrap();
        for (x, y) in a.frames(Split::Train).zip(b.frames(Split::Train)) {
            assert_eq!(x.scan, y.scan);
        }
    }
}
