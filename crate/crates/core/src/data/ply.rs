//! Oriented, optionally colored point clouds in PLY (ascii or binary little endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scan;
use crate::error::{Error, Result};
use crate::scalar::{DType, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

const REQUIRED: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];
const COLOR: [&str; 3] = ["red", "green", "blue"];

/// 8-bit color channel, as stored.
pub fn quantize_color(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize_color<T: Real>(c: u8) -> T {
    T::lit(f64::from(c) / 255.0)
}

pub fn save_ply<T: Real>(scan: &Scan<T>, path: &Path, format: PlyFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(scan, &mut w, format).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_ply<T: Real, W: Write>(scan: &Scan<T>, w: &mut W, format: PlyFormat) -> std::io::Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let ty = match T::DTYPE {
        DType::F32 => "float",
        DType::F64 => "double",
    };
    writeln!(w, "ply\nformat {fmt} 1.0")?;
    if !scan.frame.is_empty() {
        writeln!(w, "comment frame {}", scan.frame)?;
    }
    if let Some(p) = scan.pose_index {
        writeln!(w, "comment pose {p}")?;
    }
    writeln!(w, "element vertex {}", scan.len())?;
    for name in REQUIRED {
        writeln!(w, "property {ty} {name}")?;
    }
    if scan.colors.is_some() {
        for name in COLOR {
            writeln!(w, "property uchar {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    let mut buf = Vec::new();
    for i in 0..scan.len() {
        let vals = scan.points[i].iter().chain(&scan.normals[i]);
        let rgb = scan.colors.as_ref().map(|c| c[i].map(|v| quantize_color(v.to_f64_lossless())));
        match format {
            PlyFormat::Ascii => {
                let mut line: Vec<String> = vals.map(|v| v.to_string()).collect();
                if let Some(rgb) = rgb {
                    line.extend(rgb.iter().map(|c| c.to_string()));
                }
                writeln!(w, "{}", line.join(" "))?;
            }
            PlyFormat::BinaryLittleEndian => {
                buf.clear();
                vals.for_each(|v| v.write_le(&mut buf));
                if let Some(rgb) = rgb {
                    buf.extend_from_slice(&rgb);
                }
                w.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PropType {
    Int(usize, bool),
    F32,
    F64,
}

impl PropType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PropType::Int(1, true),
            "uchar" | "uint8" => PropType::Int(1, false),
            "short" | "int16" => PropType::Int(2, true),
            "ushort" | "uint16" => PropType::Int(2, false),
            "int" | "int32" => PropType::Int(4, true),
            "uint" | "uint32" => PropType::Int(4, false),
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::Int(n, _) => n,
            PropType::F32 => 4,
            PropType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            PropType::F32 => f64::from(f32::from_le_bytes(b.try_into().unwrap())),
            PropType::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            PropType::Int(1, false) => f64::from(b[0]),
            PropType::Int(1, true) => f64::from(b[0] as i8),
            PropType::Int(2, false) => f64::from(u16::from_le_bytes(b.try_into().unwrap())),
            PropType::Int(2, true) => f64::from(i16::from_le_bytes(b.try_into().unwrap())),
            PropType::Int(_, false) => f64::from(u32::from_le_bytes(b.try_into().unwrap())),
            PropType::Int(_, true) => f64::from(i32::from_le_bytes(b.try_into().unwrap())),
        }
    }
}

struct Header {
    binary: bool,
    vertices: usize,
    props: Vec<(String, PropType)>,
    frame: String,
    pose_index: Option<usize>,
}

fn parse_header<R: BufRead>(r: &mut R, path: &Path) -> Result<Header> {
    let bad = |reason: String| Error::format(path, reason);
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<bool> {
        line.clear();
        let n = r.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(n > 0)
    };
    if !next(&mut line)? || line.trim_end() != "ply" {
        return Err(bad("missing 'ply' magic line".into()));
    }
    let mut header = Header { binary: false, vertices: 0, props: Vec::new(), frame: String::new(), pose_index: None };
    let mut format_seen = false;
    // 0: before the vertex element, 1: inside it, 2: after it
    let mut stage = 0;
    loop {
        if !next(&mut line)? {
            return Err(bad("header ends without 'end_header'".into()));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", f, _] => {
                header.binary = match *f {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    other => return Err(bad(format!("unsupported PLY format '{other}'"))),
                };
                format_seen = true;
            }
            ["comment", "frame", rest @ ..] => header.frame = rest.join(" "),
            ["comment", "pose", p] => header.pose_index = p.parse().ok(),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| bad(format!("bad element count '{count}'")))?;
                if *name == "vertex" {
                    if stage != 0 {
                        return Err(bad("duplicate vertex element".into()));
                    }
                    header.vertices = count;
                    stage = 1;
                } else if stage == 0 && count > 0 {
                    return Err(bad(format!("element '{name}' precedes the vertex element")));
                } else if stage == 1 {
                    stage = 2;
                }
            }
            ["property", "list", ..] if stage == 1 => {
                return Err(bad("list properties on vertices are not supported".into()));
            }
            ["property", ty, name] => {
                if stage == 1 {
                    let ty = PropType::parse(ty).ok_or_else(|| bad(format!("unknown property type '{ty}'")))?;
                    header.props.push((name.to_string(), ty));
                }
            }
            ["property", ..] => {}
            _ => return Err(bad(format!("malformed header line '{}'", line.trim_end()))),
        }
    }
    if !format_seen {
        return Err(bad("header has no format line".into()));
    }
    if stage == 0 {
        return Err(bad("no vertex element".into()));
    }
    Ok(header)
}

pub fn load_ply<T: Real>(path: &Path) -> Result<Scan<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = parse_header(&mut r, path)?;
    let find = |name: &str| header.props.iter().position(|(n, _)| n == name);
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(REQUIRED) {
        *slot = find(name).ok_or_else(|| Error::format(path, format!("missing required vertex property '{name}'")))?;
    }
    let color_cols: Vec<Option<usize>> = COLOR.iter().map(|c| find(c)).collect();
    let color_cols: Option<[usize; 3]> = match color_cols.as_slice() {
        [Some(r), Some(g), Some(b)] => Some([*r, *g, *b]),
        [None, None, None] => None,
        _ => return Err(Error::format(path, "color properties must be all of red, green, blue or none")),
    };

    let n = header.vertices;
    let np = header.props.len();
    let mut values = vec![0f64; np];
    let mut scan = Scan {
        points: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        colors: color_cols.map(|_| Vec::with_capacity(n)),
        frame: header.frame.clone(),
        pose_index: header.pose_index,
    };
    let mut push = |values: &[f64], raw: &dyn Fn(usize) -> T| {
        scan.points.push([raw(cols[0]), raw(cols[1]), raw(cols[2])]);
        scan.normals.push([raw(cols[3]), raw(cols[4]), raw(cols[5])]);
        if let (Some(cc), Some(colors)) = (color_cols, scan.colors.as_mut()) {
            colors.push(cc.map(|c| {
                let v = values[c];
                if header.props[c].1 == PropType::Int(1, false) {
                    dequantize_color(v as u8)
                } else {
                    T::lit(v)
                }
            }));
        }
    };

    if header.binary {
        let stride: usize = header.props.iter().map(|(_, t)| t.size()).sum();
        let offsets: Vec<usize> = header.props.iter().scan(0, |o, (_, t)| {
            let cur = *o;
            *o += t.size();
            Some(cur)
        }).collect();
        let mut rec = vec![0u8; stride];
        for i in 0..n {
            r.read_exact(&mut rec).map_err(|_| Error::format(path, format!("truncated at vertex {i} of {n}")))?;
            for (k, (_, t)) in header.props.iter().enumerate() {
                values[k] = t.decode(&rec[offsets[k]..offsets[k] + t.size()]);
            }
            // exact values in the declared precision
            let raw = |c: usize| -> T {
                let (_, t) = header.props[c];
                let b = &rec[offsets[c]..offsets[c] + t.size()];
                match (t, T::DTYPE) {
                    (PropType::F32, DType::F32) | (PropType::F64, DType::F64) => T::read_le(b),
                    _ => T::lit(values[c]),
                }
            };
            push(&values, &raw);
        }
    } else {
        let mut line = String::new();
        for i in 0..n {
            line.clear();
            let got = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if got == 0 {
                return Err(Error::format(path, format!("truncated at vertex {i} of {n}")));
            }
            let mut words = line.split_whitespace();
            for v in values.iter_mut() {
                let w = words.next().ok_or_else(|| Error::format(path, format!("vertex {i} has too few values")))?;
                *v = w.parse().map_err(|_| Error::format(path, format!("vertex {i}: bad number '{w}'")))?;
            }
            let raw = |c: usize| -> T { T::lit(values[c]) };
            push(&values, &raw);
        }
    }
    Ok(scan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan() -> Scan<f32> {
        Scan {
            points: vec![[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 0.0, -0.0]],
            normals: vec![[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]],
            colors: Some(vec![[0.0, 1.0, dequantize_color(17)], [dequantize_color(200); 3]]),
            frame: "seq001/0004".into(),
            pose_index: Some(4),
        }
    }

    #[test]
    fn binary_and_ascii_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::BinaryLittleEndian, PlyFormat::Ascii] {
            let p = dir.path().join("a.ply");
            save_ply(&scan(), &p, fmt).unwrap();
            assert_eq!(load_ply::<f32>(&p).unwrap(), scan());
        }
        let mut plain = scan();
        plain.colors = None;
        let p = dir.path().join("b.ply");
        save_ply(&plain, &p, PlyFormat::BinaryLittleEndian).unwrap();
        assert_eq!(load_ply::<f32>(&p).unwrap(), plain);
        // widening on read
        let wide = load_ply::<f64>(&p).unwrap();
        assert_eq!(wide.points[0][0], f64::from(0.1f32));
    }

    #[test]
    fn missing_normals_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.ply");
        std::fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n").unwrap();
        let err = load_ply::<f64>(&p).unwrap_err().to_string();
        assert!(err.contains("'nx'"), "{err}");

        save_ply(&scan(), &p, PlyFormat::BinaryLittleEndian).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_ply::<f32>(&p), Err(Error::Format { .. })));

        std::fs::write(&p, "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(load_ply::<f32>(&p).is_err());
        std::fs::write(&p, "not a ply\n").unwrap();
        assert!(load_ply::<f32>(&p).is_err());
    }

    #[test]
    fn trailing_face_element_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty double nz\nproperty double ny\nproperty double nx\n\
                    property double z\nproperty double y\nproperty double x\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n1 0 0 3 2 1\n3 0 0 0\n";
        std::fs::write(&p, text).unwrap();
        let s = load_ply::<f64>(&p).unwrap();
        assert_eq!(s.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(s.normals, vec![[0.0, 0.0, 1.0]]);
    }
}
