//! Binary little-endian PLY in the common Gaussian-splat vertex layout.
//!
//! Written files carry exactly 14 `float` properties per vertex, in this order:
//! `x y z f_dc_0 f_dc_1 f_dc_2 opacity scale_0 scale_1 scale_2 rot_0 rot_1 rot_2 rot_3`.
//! Opacity is a logit, scales are natural logs, rotation is (w, x, y, z).
//! The reader accepts any property order and skips unknown scalar properties.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cloud::{GaussianCloud, RawGaussian};
use crate::error::{Error, PlyError, Result};

pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn header(count: usize) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {count}\n"));
    for p in PROPERTIES {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn to_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let head = header(cloud.len());
    let mut out = Vec::with_capacity(head.len() + cloud.len() * 14 * 4);
    out.extend_from_slice(head.as_bytes());
    for i in 0..cloud.len() {
        let g = cloud.get(i);
        let row = [
            g.position[0],
            g.position[1],
            g.position[2],
            g.sh_dc[0],
            g.sh_dc[1],
            g.sh_dc[2],
            g.opacity_logit,
            g.log_scale[0],
            g.log_scale[1],
            g.log_scale[2],
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
        ];
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

struct Property {
    name: String,
    ty: Scalar,
    offset: usize,
}

pub fn from_bytes(bytes: &[u8]) -> Result<GaussianCloud> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| PlyError::MalformedHeader("no end_header line".into()))?;
    let text = std::str::from_utf8(&bytes[..end])
        .map_err(|_| PlyError::MalformedHeader("header is not UTF-8".into()))?;
    let payload = &bytes[end + END.len()..];

    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(PlyError::MalformedHeader("missing `ply` magic".into()).into());
    }

    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<Property> = Vec::new();
    let mut stride = 0;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::UnsupportedFormat((*fmt).to_string()).into());
                }
            }
            ["element", name, count] => {
                if seen_vertex && !in_vertex {
                    continue;
                }
                if *name == "vertex" {
                    if seen_vertex {
                        return Err(PlyError::MalformedHeader("duplicate vertex element".into()).into());
                    }
                    let n: usize = count.parse().map_err(|_| {
                        PlyError::MalformedHeader(format!("bad vertex count `{count}`"))
                    })?;
                    vertex_count = Some(n);
                    in_vertex = true;
                    seen_vertex = true;
                } else if !seen_vertex {
                    return Err(PlyError::MalformedHeader(format!(
                        "element `{name}` precedes vertex data"
                    ))
                    .into());
                } else {
                    in_vertex = false;
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(PlyError::MalformedHeader(
                        "list properties are not supported on vertices".into(),
                    )
                    .into());
                }
            }
            ["property", ty, name] => {
                if !in_vertex {
                    continue;
                }
                let scalar = Scalar::parse(ty).ok_or_else(|| PlyError::PropertyType {
                    name: (*name).to_string(),
                    ty: (*ty).to_string(),
                })?;
                props.push(Property {
                    name: (*name).to_string(),
                    ty: scalar,
                    offset: stride,
                });
                stride += scalar.size();
            }
            _ => {
                return Err(PlyError::MalformedHeader(format!("unrecognized line `{line}`")).into());
            }
        }
    }

    let n = vertex_count.ok_or_else(|| PlyError::MalformedHeader("no vertex element".into()))?;
    let mut slots = [(0usize, Scalar::F32); 14];
    for (slot, want) in slots.iter_mut().zip(PROPERTIES) {
        let p = props
            .iter()
            .find(|p| p.name == want)
            .ok_or_else(|| PlyError::MissingProperty(want.to_string()))?;
        if !matches!(p.ty, Scalar::F32 | Scalar::F64) {
            return Err(PlyError::PropertyType {
                name: want.to_string(),
                ty: format!("{:?}", p.ty).to_lowercase(),
            }
            .into());
        }
        *slot = (p.offset, p.ty);
    }
    let expected = n * stride;
    if payload.len() < expected {
        return Err(PlyError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }

    let read = |row: &[u8], (off, ty): (usize, Scalar)| -> f64 {
        match ty {
            Scalar::F64 => f64::from_le_bytes(row[off..off + 8].try_into().unwrap()),
            _ => f32::from_le_bytes(row[off..off + 4].try_into().unwrap()) as f64,
        }
    };
    let mut cloud = GaussianCloud::default();
    for row in payload[..expected].chunks_exact(stride) {
        let v: Vec<f64> = slots.iter().map(|&s| read(row, s)).collect();
        cloud.push(RawGaussian {
            position: [v[0], v[1], v[2]],
            sh_dc: [v[3], v[4], v[5]],
            opacity_logit: v[6],
            log_scale: [v[7], v[8], v[9]],
            rotation: [v[10], v[11], v[12], v[13]],
        });
    }
    cloud.validate()?;
    Ok(cloud)
}
