//! JSON body templates (optionally with a sibling binary blob) and pose files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BodyTemplate, ChartEntry, Pose};
use crate::error::{Error, Result};
use crate::geom;
use crate::scalar::Real;

const TEMPLATE_FORMAT: &str = "ale-body";
const POSES_FORMAT: &str = "ale-poses";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobMode {
    /// Every array inline in the JSON document.
    Inline,
    /// Large arrays in `<stem>.bin` next to the JSON file.
    Sibling,
}

/// A flat numeric array, inline or stored in a little-endian blob.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Array {
    Inline(Vec<f64>),
    Blob(BlobRef),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    blob: String,
    /// "f64" or "u32"
    dtype: String,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    format: String,
    version: u32,
    uv_resolution: [usize; 2],
    joint_names: Vec<String>,
    parent: Vec<Option<usize>>,
    joints: Array,
    vertices: Array,
    faces: Array,
    skin_weights: Array,
    chart_pixels: Array,
    chart_faces: Array,
    chart_bary: Array,
}

struct BlobWriter {
    name: String,
    bytes: Vec<u8>,
    enabled: bool,
}

impl BlobWriter {
    fn floats(&mut self, values: Vec<f64>) -> Array {
        if !self.enabled {
            return Array::Inline(values);
        }
        let offset = self.bytes.len() as u64;
        values.iter().for_each(|v| self.bytes.extend_from_slice(&v.to_le_bytes()));
        Array::Blob(BlobRef { blob: self.name.clone(), dtype: "f64".into(), offset, count: values.len() as u64 })
    }

    fn indices(&mut self, values: Vec<usize>) -> Array {
        if !self.enabled {
            return Array::Inline(values.into_iter().map(|v| v as f64).collect());
        }
        let offset = self.bytes.len() as u64;
        values.iter().for_each(|&v| self.bytes.extend_from_slice(&(v as u32).to_le_bytes()));
        Array::Blob(BlobRef { blob: self.name.clone(), dtype: "u32".into(), offset, count: values.len() as u64 })
    }
}

pub fn save_template<T: Real>(template: &BodyTemplate<T>, path: &Path, mode: BlobMode) -> Result<()> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("body");
    let mut blob = BlobWriter { name: format!("{stem}.bin"), bytes: Vec::new(), enabled: mode == BlobMode::Sibling };
    let f = |x: &T| x.to_f64_lossless();
    let file = TemplateFile {
        format: TEMPLATE_FORMAT.into(),
        version: 1,
        uv_resolution: [template.uv_resolution.0, template.uv_resolution.1],
        joint_names: template.joint_names.clone(),
        parent: template.parent.clone(),
        joints: Array::Inline(template.joints.iter().flatten().map(f).collect()),
        vertices: blob.floats(template.vertices.iter().flatten().map(f).collect()),
        faces: blob.indices(template.faces.iter().flatten().copied().collect()),
        skin_weights: blob.floats(template.skin_weights.iter().map(f).collect()),
        chart_pixels: blob.indices(template.uv_chart.iter().flat_map(|e| [e.pixel.0, e.pixel.1]).collect()),
        chart_faces: blob.indices(template.uv_chart.iter().map(|e| e.face).collect()),
        chart_bary: blob.floats(template.uv_chart.iter().flat_map(|e| e.bary).map(|x| f(&x)).collect()),
    };
    let json = serde_json::to_string(&file).expect("template serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    if blob.enabled {
        let bin = path.with_file_name(&blob.name);
        std::fs::write(&bin, &blob.bytes).map_err(|e| Error::io(bin, e))?;
    }
    Ok(())
}

struct BlobReader<'a> {
    dir: PathBuf,
    path: &'a Path,
    cache: Vec<(String, Vec<u8>)>,
}

impl BlobReader<'_> {
    fn bytes(&mut self, name: &str) -> Result<&[u8]> {
        if Path::new(name).components().count() != 1 {
            return Err(Error::format(self.path, format!("blob name {name:?} must be a sibling file name")));
        }
        if !self.cache.iter().any(|(n, _)| n == name) {
            let p = self.dir.join(name);
            let data = std::fs::read(&p).map_err(|e| Error::io(p, e))?;
            self.cache.push((name.to_string(), data));
        }
        Ok(&self.cache.iter().find(|(n, _)| n == name).unwrap().1)
    }

    fn floats(&mut self, a: Array, what: &str) -> Result<Vec<f64>> {
        match a {
            Array::Inline(v) => Ok(v),
            Array::Blob(b) => {
                let path = self.path.to_path_buf();
                let raw = slice(self.bytes(&b.blob)?, &b, 8, &path, what)?;
                if b.dtype != "f64" {
                    return Err(Error::format(path, format!("{what}: expected dtype f64, got {}", b.dtype)));
                }
                Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
        }
    }

    fn indices(&mut self, a: Array, what: &str) -> Result<Vec<usize>> {
        match a {
            Array::Inline(v) => v
                .into_iter()
                .map(|x| {
                    if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
                        Ok(x as usize)
                    } else {
                        Err(Error::format(self.path, format!("{what}: {x} is not an index")))
                    }
                })
                .collect(),
            Array::Blob(b) => {
                let path = self.path.to_path_buf();
                let raw = slice(self.bytes(&b.blob)?, &b, 4, &path, what)?;
                if b.dtype != "u32" {
                    return Err(Error::format(path, format!("{what}: expected dtype u32, got {}", b.dtype)));
                }
                Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect())
            }
        }
    }
}

fn slice<'a>(bytes: &'a [u8], b: &BlobRef, size: u64, path: &Path, what: &str) -> Result<&'a [u8]> {
    let end = b.count.checked_mul(size).and_then(|n| n.checked_add(b.offset));
    match end {
        Some(end) if end as usize <= bytes.len() => Ok(&bytes[b.offset as usize..end as usize]),
        _ => Err(Error::format(path, format!("{what}: blob range exceeds {} ({} bytes)", b.blob, bytes.len()))),
    }
}

fn triples<T: Real>(v: Vec<f64>, what: &str, path: &Path) -> Result<Vec<[T; 3]>> {
    if v.len() % 3 != 0 {
        return Err(Error::format(path, format!("{what}: length {} is not a multiple of 3", v.len())));
    }
    Ok(v.chunks_exact(3).map(|c| [T::lit(c[0]), T::lit(c[1]), T::lit(c[2])]).collect())
}

pub fn load_template<T: Real>(path: &Path) -> Result<BodyTemplate<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: TemplateFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != TEMPLATE_FORMAT || file.version != 1 {
        return Err(Error::format(path, format!("not an {TEMPLATE_FORMAT} v1 document")));
    }
    let mut blobs = BlobReader { dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(), path, cache: Vec::new() };
    let joints = triples(blobs.floats(file.joints, "joints")?, "joints", path)?;
    let vertices = triples(blobs.floats(file.vertices, "vertices")?, "vertices", path)?;
    let faces = blobs.indices(file.faces, "faces")?;
    if faces.len() % 3 != 0 {
        return Err(Error::format(path, "faces: length is not a multiple of 3"));
    }
    let skin_weights = blobs.floats(file.skin_weights, "skin_weights")?.into_iter().map(T::lit).collect();
    let pixels = blobs.indices(file.chart_pixels, "chart_pixels")?;
    let chart_faces = blobs.indices(file.chart_faces, "chart_faces")?;
    let bary: Vec<[T; 3]> = triples(blobs.floats(file.chart_bary, "chart_bary")?, "chart_bary", path)?;
    if pixels.len() != 2 * chart_faces.len() || bary.len() != chart_faces.len() {
        return Err(Error::format(path, "chart arrays have inconsistent lengths"));
    }
    let template = BodyTemplate {
        vertices,
        faces: faces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        joint_names: file.joint_names,
        joints,
        parent: file.parent,
        skin_weights,
        uv_chart: chart_faces
            .iter()
            .zip(&bary)
            .enumerate()
            .map(|(k, (&face, &bary))| ChartEntry { pixel: (pixels[2 * k], pixels[2 * k + 1]), face, bary })
            .collect(),
        uv_resolution: (file.uv_resolution[0], file.uv_resolution[1]),
    };
    template.validate()?;
    Ok(template)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFrame {
    /// `[w, x, y, z]` per joint, flattened.
    rotations: Vec<f64>,
    root_rotation: [f64; 4],
    root_translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosesFile {
    format: String,
    joint_count: usize,
    frames: Vec<PoseFrame>,
}

/// One pose sequence per file; rotations stored as unit quaternions.
pub fn save_poses<T: Real>(poses: &[Pose<T>], path: &Path) -> Result<()> {
    let joint_count = poses.first().map_or(0, |p| p.joint_rotations.len());
    let frames = poses
        .iter()
        .map(|p| PoseFrame {
            rotations: p
                .joint_rotations
                .iter()
                .flat_map(|r| geom::mat_to_quat(&geom::cast_mat::<T, f64>(r)))
                .collect(),
            root_rotation: geom::mat_to_quat(&geom::cast_mat::<T, f64>(&p.root_rotation)),
            root_translation: geom::cast3(p.root_translation),
        })
        .collect();
    let file = PosesFile { format: POSES_FORMAT.into(), joint_count, frames };
    let json = serde_json::to_string(&file).expect("poses serialize");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_poses<T: Real>(path: &Path) -> Result<Vec<Pose<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PosesFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != POSES_FORMAT {
        return Err(Error::format(path, format!("not an {POSES_FORMAT} document")));
    }
    let quat = |q: &[f64], what: String| {
        geom::quat_to_mat([q[0], q[1], q[2], q[3]])
            .map(|m| geom::cast_mat::<f64, T>(&m))
            .ok_or_else(|| Error::format(path, format!("{what}: zero quaternion")))
    };
    file.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.rotations.len() != 4 * file.joint_count {
                return Err(Error::format(path, format!("frame {i}: expected {} rotation values", 4 * file.joint_count)));
            }
            Ok(Pose {
                joint_rotations: f
                    .rotations
                    .chunks_exact(4)
                    .enumerate()
                    .map(|(j, q)| quat(q, format!("frame {i} joint {j}")))
                    .collect::<Result<_>>()?,
                root_rotation: quat(&f.root_rotation, format!("frame {i} root"))?,
                root_translation: geom::cast3(f.root_translation),
            })
        })
        .collect()
}
