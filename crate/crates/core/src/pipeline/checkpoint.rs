//! Model + optimizer checkpoints in the tensor archive format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{ModelConfig, ScaleModel};
use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::io::{Archive, Section};
use crate::tensor::{Adam, AdamConfig, RunningStats, Tensor};

const FORMAT: &str = "ale-checkpoint";
const PARAMS: [u8; 4] = *b"PARM";
const BUFFERS: [u8; 4] = *b"BUFF";
const OPTIMIZER: [u8; 4] = *b"ADAM";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dtype: String,
    model: ModelConfig,
    chart_pixels: Vec<usize>,
    trained: bool,
    /// Completed training epochs.
    epochs: usize,
    adam: Option<AdamState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamState {
    config: AdamConfig,
    step: u64,
}

/// A loaded checkpoint.
pub struct Checkpoint<T> {
    pub model: ScaleModel<T>,
    pub optimizer: Option<Adam<T>>,
    pub epochs: usize,
}

pub fn checkpoint_bytes<T: Real>(model: &ScaleModel<T>, optimizer: Option<&Adam<T>>, epochs: usize) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        dtype: T::DTYPE.name().into(),
        model: model.config().clone(),
        chart_pixels: model.chart_pixels().to_vec(),
        trained: model.is_trained(),
        epochs,
        adam: optimizer.map(|a| AdamState { config: a.config, step: a.step_count() }),
    };
    let params = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let buffers = model
        .buffers()
        .iter()
        .flat_map(|(n, s)| {
            let c = s.channels();
            [
                (format!("{n}.mean"), Tensor::new([c], s.mean.clone()).expect("stats length")),
                (format!("{n}.var"), Tensor::new([c], s.var.clone()).expect("stats length")),
            ]
        })
        .collect();
    let mut sections = vec![
        Section { tag: PARAMS, meta: Vec::new(), tensors: params },
        Section { tag: BUFFERS, meta: Vec::new(), tensors: buffers },
    ];
    if let Some(adam) = optimizer {
        let (m, v) = adam.moments();
        let tensors = m
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("m.{i}"), t.clone()))
            .chain(v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t.clone())))
            .collect();
        sections.push(Section { tag: OPTIMIZER, meta: Vec::new(), tensors });
    }
    let archive = Archive { header: serde_json::to_string(&header).expect("header serializes"), sections };
    archive.to_bytes()
}

pub fn save_checkpoint<T: Real>(model: &ScaleModel<T>, optimizer: Option<&Adam<T>>, epochs: usize, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, optimizer, epochs);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scalar type a checkpoint was written with.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    crate::tensor::io::peek_dtype(&bytes).ok_or_else(|| Error::format(path, "not a checkpoint archive"))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, path)
}

pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let archive = Archive::<T>::from_bytes(bytes, path)?;
    let header: Header = serde_json::from_str(&archive.header).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::format(path, format!("expected a {FORMAT} archive, found '{}'", header.format)));
    }
    let section = |tag: &[u8; 4]| {
        archive
            .section(tag)
            .ok_or_else(|| Error::format(path, format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let params = section(&PARAMS)?.tensors.clone();
    let mut buffers = Vec::new();
    let stats = &section(&BUFFERS)?.tensors;
    if stats.len() % 2 != 0 {
        return Err(Error::format(path, "unpaired normalization statistics"));
    }
    for pair in stats.chunks_exact(2) {
        let name = pair[0]
            .0
            .strip_suffix(".mean")
            .filter(|n| pair[1].0.strip_suffix(".var") == Some(n))
            .ok_or_else(|| Error::format(path, format!("unexpected statistics entry {}", pair[0].0)))?;
        buffers.push((
            name.to_string(),
            RunningStats { mean: pair[0].1.data().to_vec(), var: pair[1].1.data().to_vec() },
        ));
    }
    let model = ScaleModel::from_parts(header.model, header.chart_pixels, params, buffers, header.trained)?;
    let optimizer = match (header.adam, archive.section(&OPTIMIZER)) {
        (Some(state), Some(sec)) => {
            let n = model.params().len();
            if sec.tensors.len() != 2 * n {
                return Err(Error::format(path, "optimizer moments do not match the parameters"));
            }
            let m: Vec<Tensor<T>> = sec.tensors[..n].iter().map(|(_, t)| t.clone()).collect();
            let v: Vec<Tensor<T>> = sec.tensors[n..].iter().map(|(_, t)| t.clone()).collect();
            let shapes_ok = model.params().iter().zip(&m).all(|((_, p), t)| p.shape() == t.shape());
            if !shapes_ok {
                return Err(Error::format(path, "optimizer moment shapes do not match the parameters"));
            }
            Some(Adam::from_state(state.config, state.step, m, v)?)
        }
        (None, None) => None,
        _ => return Err(Error::format(path, "optimizer header and section disagree")),
    };
    Ok(Checkpoint { model, optimizer, epochs: header.epochs })
}
