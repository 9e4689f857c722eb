//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ale::body::{load_poses, load_template, BodyTemplate, Pose, PosedBody};
use ale::codec::PredictedCloud;
use ale::data::{load_dataset, save_ply, synthesize, write_dataset, Manifest, PlyFormat, Scan, Split, SynthConfig};
use ale::geom;
use ale::pipeline::{checkpoint_dtype, evaluate, load_checkpoint, train, TrainConfig, CHECKPOINT_FILE};
use ale::seed::{derive_seed, stream};
use ale::{DType, Real};

use crate::config;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_CONFIG_FILE: &str = "train_config.toml";
pub const REPORT_FILE: &str = "eval_report.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let dataset = synthesize::<f32>(cfg)?;
    let manifest = write_dataset(&dataset, out, cfg.ply_format, cfg.template_blob)?;
    let m = Manifest::load(&manifest)?;
    let (ts, tf) = m.count(Split::Train);
    let (es, ef) = m.count(Split::Test);
    println!("wrote {}", manifest.display());
    println!("train: {ts} sequences / {tf} frames; test: {es} sequences / {ef} frames");
    Ok(manifest)
}

pub fn train_cmd(cfg: &TrainConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Config("train needs a dataset manifest (set `manifest`)".into()))?;
    let dataset = load_dataset::<f32>(manifest, Some(Split::Train))?;
    let frames = dataset.collect(Split::Train);
    create_dir(out)?;
    let cfg_path = out.join(TRAIN_CONFIG_FILE);
    std::fs::write(&cfg_path, config::to_toml(cfg)).map_err(|e| CliError::io(&cfg_path, e))?;
    log::info!("training on {} frames for {} epochs", frames.len(), cfg.epochs);
    let outcome = train(cfg, &dataset.template, &frames, Some(out))?;
    let last = outcome.epoch_losses().last().copied().unwrap_or(f64::NAN);
    let path = outcome.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    println!("final epoch mean loss {last:.6e}");
    if !outcome.plateaus.is_empty() {
        println!("plateau warnings at epochs {:?}", outcome.plateaus);
    }
    println!("checkpoint {}", path.display());
    Ok(path)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub checkpoint: Option<PathBuf>,
    /// Body template; taken from `manifest` when absent.
    pub template: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Pose files; without any, the manifest's test poses are used.
    pub poses: Vec<PathBuf>,
    /// Points per square meter; absent means the fixed K·M grid.
    pub density: Option<f64>,
    pub seed: u64,
    pub ply_format: PlyFormat,
}

struct Job {
    name: String,
    pose: Pose<f64>,
}

fn manifest_template(manifest: &Path) -> Result<BodyTemplate<f64>> {
    let m = Manifest::load(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(load_template(&base.join(&m.template))?)
}

fn infer_jobs(cfg: &InferConfig) -> Result<Vec<Job>> {
    let mut jobs = Vec::new();
    for file in &cfg.poses {
        let stem = file.file_stem().map_or("pose".into(), |s| s.to_string_lossy().into_owned());
        for (i, pose) in load_poses::<f64>(file)?.into_iter().enumerate() {
            jobs.push(Job { name: format!("{stem}_{i:04}"), pose });
        }
    }
    if cfg.poses.is_empty() {
        let manifest = cfg
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("infer needs `poses` or a `manifest`".into()))?;
        let m = Manifest::load(manifest)?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        for seq in m.sequences.iter().filter(|s| s.split == Split::Test) {
            for (i, pose) in load_poses::<f64>(&base.join(&seq.poses))?.into_iter().enumerate() {
                jobs.push(Job { name: format!("{}_{i:04}", seq.id), pose });
            }
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Config("no poses to run".into()));
    }
    Ok(jobs)
}

pub fn infer(cfg: &InferConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = cfg.checkpoint.as_deref().ok_or_else(|| CliError::Config("infer needs a checkpoint".into()))?;
    let template = match (&cfg.template, &cfg.manifest) {
        (Some(t), _) => load_template::<f64>(t)?,
        (None, Some(m)) => manifest_template(m)?,
        (None, None) => return Err(CliError::Config("infer needs a `template` or a `manifest`".into())),
    };
    let jobs = infer_jobs(cfg)?;
    match checkpoint_dtype(ckpt)? {
        DType::F32 => infer_with::<f32>(cfg, ckpt, &template, &jobs, out),
        DType::F64 => infer_with::<f64>(cfg, ckpt, &template, &jobs, out),
    }
}

fn infer_with<T: Real>(cfg: &InferConfig, ckpt: &Path, template: &BodyTemplate<f64>, jobs: &[Job], out: &Path) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint::<T>(ckpt)?.model;
    let tpl = template.cast::<T>();
    model.check_template(&tpl)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for (i, job) in jobs.iter().enumerate() {
        job.pose.validate(tpl.joint_count())?;
        let body = PosedBody::new(&tpl, &job.pose.cast())?;
        let cloud = match cfg.density {
            Some(d) => model.adaptive_sample(&body, d, derive_seed(cfg.seed, stream::INFER, i as u64))?.0,
            None => model.predict(&body)?,
        };
        let scan = cloud_to_scan(cloud, &body, &job.name);
        let path = out.join(format!("{}.ply", job.name));
        save_ply(&scan, &path, cfg.ply_format)?;
        log::info!("{}: {} points", path.display(), scan.len());
        written.push(path);
    }
    println!("wrote {} point clouds to {}", written.len(), out.display());
    Ok(written)
}

/// Without a normal head, each point takes its patch's body normal.
fn cloud_to_scan<T: Real>(cloud: PredictedCloud<T>, body: &PosedBody<T>, name: &str) -> Scan<T> {
    let normals = cloud.normals.unwrap_or_else(|| {
        let up = [T::zero(), T::zero(), T::one()];
        cloud.patch.iter().map(|&k| geom::mat_vec(&body.frames[k], up)).collect()
    });
    Scan { points: cloud.points, normals, colors: cloud.colors, frame: name.to_string(), pose_index: None }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { checkpoint: None, manifest: None, repeats: 3, seed: 0 }
    }
}

pub fn eval(cfg: &EvalConfig, out: &Path) -> Result<PathBuf> {
    let ckpt = cfg.checkpoint.as_deref().ok_or_else(|| CliError::Config("eval needs a checkpoint".into()))?;
    let manifest = cfg.manifest.as_deref().ok_or_else(|| CliError::Config("eval needs a dataset manifest".into()))?;
    let report = match checkpoint_dtype(ckpt)? {
        DType::F32 => eval_with::<f32>(cfg, ckpt, manifest)?,
        DType::F64 => eval_with::<f64>(cfg, ckpt, manifest)?,
    };
    create_dir(out)?;
    let path = out.join(REPORT_FILE);
    report.save(&path)?;
    print!("{}", report.table());
    println!("report {}", path.display());
    Ok(path)
}

fn eval_with<T: Real>(cfg: &EvalConfig, ckpt: &Path, manifest: &Path) -> Result<ale::pipeline::EvalReport> {
    let model = load_checkpoint::<T>(ckpt)?.model;
    let dataset = load_dataset::<T>(manifest, Some(Split::Test))?;
    let frames = dataset.collect(Split::Test);
    Ok(evaluate(&model, &dataset.template, &frames, dataset.generator.as_ref(), cfg.repeats, cfg.seed)?)
}
