//! Converter from an SMPL-X `.npz` release file to the body-model container.
//!
//! The archive is read with `zip`; each member is a NumPy `.npy` array
//! (format versions 1–3, little-endian numeric dtypes, C or Fortran order).

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::{Basis, BodyModel, Keypoint, SparseRow};
use crate::error::{Error, Result};

/// Default COCO-17 mapping for SMPL-X: face keypoints on head vertices, the rest on body joints.
pub const DEFAULT_KEYPOINT_MAP: &str = include_str!("../../data/smplx_coco17.json");

const BODY_JOINTS: [&str; 25] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "jaw",
    "left_eye",
    "right_eye",
];
const FINGERS: [&str; 5] = ["index", "middle", "pinky", "ring", "thumb"];

fn joint_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = BODY_JOINTS.iter().map(|s| s.to_string()).collect();
    for side in ["left", "right"] {
        for f in FINGERS {
            for i in 1..=3 {
                names.push(format!("{side}_{f}{i}"));
            }
        }
    }
    names.truncate(k);
    while names.len() < k {
        names.push(format!("joint_{}", names.len()));
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    /// Values in C (row-major) order.
    pub data: Vec<f64>,
}

impl NpyArray {
    fn dims<const N: usize>(&self, name: &str) -> Result<[usize; N]> {
        self.shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::Model(format!("`{name}` has shape {:?}, expected {N} dimensions", self.shape)))
    }
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let at = header.find(&format!("'{key}'"))?;
    let rest = header[at + key.len() + 2..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

/// Parses one `.npy` payload. Returns `Ok(None)` for non-numeric dtypes.
pub fn parse_npy(bytes: &[u8]) -> Result<Option<NpyArray>> {
    let bad = |m: &str| Error::Model(format!("npy: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let (len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = bytes
        .get(start..start + len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("bad header"))?;
    let descr = header_value(header, "descr")
        .and_then(|v| v.strip_prefix('\''))
        .and_then(|v| v.split('\'').next())
        .ok_or_else(|| bad("no descr"))?;
    let fortran = header_value(header, "fortran_order").ok_or_else(|| bad("no fortran_order"))?.starts_with("True");
    let shape_text = header_value(header, "shape")
        .and_then(|v| v.strip_prefix('('))
        .and_then(|v| v.split(')').next())
        .ok_or_else(|| bad("no shape"))?;
    let shape: Vec<usize> = shape_text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;

    let (order, kind) = descr.split_at(1);
    if !matches!(order, "<" | "|" | "=") {
        return Err(bad(&format!("unsupported byte order in `{descr}`")));
    }
    let size: usize = kind[1..].parse().unwrap_or(0);
    let read: fn(&[u8]) -> f64 = match (&kind[..1], size) {
        ("f", 4) => |b| f32::from_le_bytes(b.try_into().unwrap()) as f64,
        ("f", 8) => |b| f64::from_le_bytes(b.try_into().unwrap()),
        ("i", 4) => |b| i32::from_le_bytes(b.try_into().unwrap()) as f64,
        ("i", 8) => |b| i64::from_le_bytes(b.try_into().unwrap()) as f64,
        ("u", 4) => |b| u32::from_le_bytes(b.try_into().unwrap()) as f64,
        ("u", 8) => |b| u64::from_le_bytes(b.try_into().unwrap()) as f64,
        ("u", 1) | ("b", 1) => |b| b[0] as f64,
        ("i", 1) => |b| b[0] as i8 as f64,
        _ => return Ok(None),
    };
    let count: usize = shape.iter().product();
    let payload = &bytes[start + len..];
    if payload.len() < count * size {
        return Err(bad("truncated data"));
    }
    let raw: Vec<f64> = payload[..count * size].chunks_exact(size).map(read).collect();
    let data = if fortran && shape.len() > 1 {
        // Column-major to row-major.
        let mut out = vec![0.0; count];
        let mut idx = vec![0usize; shape.len()];
        for &v in &raw {
            let mut c = 0;
            for (d, &n) in shape.iter().enumerate() {
                c = c * n + idx[d];
            }
            out[c] = v;
            for (d, &n) in shape.iter().enumerate() {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
            }
        }
        out
    } else {
        raw
    };
    Ok(Some(NpyArray { shape, data }))
}

pub fn read_npz(path: &Path) -> Result<HashMap<String, NpyArray>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| Error::Model(e.to_string()))?;
        let name = entry.name().trim_end_matches(".npy").to_string();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if let Some(arr) = parse_npy(&bytes).map_err(|e| Error::Model(format!("`{name}`: {e}")))? {
            out.insert(name, arr);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvertOptions {
    pub betas: usize,
    pub expressions: usize,
    /// Column of the first expression component in `shapedirs`; `None` picks
    /// 300 for the 400-column release layout and half the columns otherwise.
    pub expression_offset: Option<usize>,
    pub keypoint_map: Vec<Keypoint>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            betas: 10,
            expressions: 10,
            expression_offset: None,
            keypoint_map: serde_json::from_str(DEFAULT_KEYPOINT_MAP).expect("bundled keypoint map"),
        }
    }
}

fn sparse_rows(data: &[f64], rows: usize, cols: usize, normalize: bool) -> Vec<SparseRow> {
    (0..rows)
        .map(|r| {
            let mut row: SparseRow = (0..cols)
                .filter_map(|c| {
                    let w = data[r * cols + c];
                    (w != 0.0).then_some((c as u32, w))
                })
                .collect();
            if normalize {
                let sum: f64 = row.iter().map(|e| e.1).sum();
                row.iter_mut().for_each(|e| e.1 /= sum);
            }
            row
        })
        .collect()
}

/// Takes columns `[from, from + n)` of a `V×3×S` basis.
fn basis_columns(arr: &NpyArray, from: usize, n: usize) -> Basis {
    let s = arr.shape[2];
    let n = n.min(s.saturating_sub(from));
    let rows = arr.shape[0] * 3;
    let mut data = Vec::with_capacity(rows * n);
    for r in 0..rows {
        data.extend_from_slice(&arr.data[r * s + from..r * s + from + n]);
    }
    Basis { components: n, data }
}

pub fn convert(arrays: &HashMap<String, NpyArray>, options: &ConvertOptions) -> Result<BodyModel> {
    let get = |name: &str| arrays.get(name).ok_or_else(|| Error::Model(format!("missing array `{name}`")));
    let tmpl = get("v_template")?;
    let [v, _] = tmpl.dims::<2>("v_template")?;
    let faces = get("f")?;
    let [nf, _] = faces.dims::<2>("f")?;
    let jreg = get("J_regressor")?;
    let [k, _] = jreg.dims::<2>("J_regressor")?;
    let weights = get("weights")?;
    let kin = get("kintree_table")?;
    let shapedirs = get("shapedirs")?;
    let [sv, _, s] = shapedirs.dims::<3>("shapedirs")?;
    if sv != v || weights.shape != [v, k] || kin.shape != [2, k] {
        return Err(Error::Model("array shapes disagree on vertex or joint count".into()));
    }
    let expr_from = options.expression_offset.unwrap_or(if s >= 400 { 300 } else { s / 2 });
    let pose_basis = match arrays.get("posedirs") {
        Some(p) => {
            let [_, _, n] = p.dims::<3>("posedirs")?;
            basis_columns(p, 0, n)
        }
        None => Basis::empty(),
    };
    let parents = (0..k)
        .map(|j| {
            let p = kin.data[j];
            (j > 0 && p >= 0.0 && (p as usize) < k).then_some(p as usize)
        })
        .collect();
    let model = BodyModel {
        name: "smplx".into(),
        template: tmpl.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        faces: faces.data[..nf * 3].chunks_exact(3).map(|c| [c[0] as u32, c[1] as u32, c[2] as u32]).collect(),
        shape_basis: basis_columns(shapedirs, 0, options.betas.min(expr_from)),
        pose_basis,
        expression_basis: basis_columns(shapedirs, expr_from, options.expressions),
        joint_names: joint_names(k),
        parents,
        joint_regressor: sparse_rows(&jreg.data, k, v, false),
        skin_weights: sparse_rows(&weights.data, v, k, true),
        keypoints: options.keypoint_map.clone(),
    };
    model.validate()?;
    Ok(model)
}

pub fn convert_npz(path: &Path, options: &ConvertOptions) -> Result<BodyModel> {
    convert(&read_npz(path)?, options)
}
