//! Parametric body model: blend shapes, linear blend skinning, surface
//! initialization and OpenPose-style skeleton conditioning maps.

mod container;
pub mod sample;
pub mod skeleton;
pub mod smplx;
pub mod toy;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{load_model, save_model};
pub use sample::{init_cloud, mean_nn_distance, sample_surface, sample_triangles, SurfaceSamples};
pub use skeleton::{render_skeleton, draw_skeleton, ViewClass, SkeletonImage};

/// Target standing height of a normalized body, in scene units.
pub const BODY_HEIGHT: f64 = 1.8;

pub const COCO_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointSource {
    Joint(usize),
    Vertex(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub source: KeypointSource,
}

/// Sparse row: (column, weight) pairs.
pub type SparseRow = Vec<(u32, f64)>;

/// Blend-shape basis stored as `[vertex][axis][component]`, flattened.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub components: usize,
    pub data: Vec<f64>,
}

impl Basis {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Adds `Σ_c coeff[c]·B[v][a][c]` to every vertex.
    fn apply(&self, coeffs: &[f64], vertices: &mut [Vector3<f64>]) {
        let n = self.components.min(coeffs.len());
        if n == 0 || coeffs[..n].iter().all(|&c| c == 0.0) {
            return;
        }
        for (v, out) in vertices.iter_mut().enumerate() {
            for a in 0..3 {
                let row = &self.data[(v * 3 + a) * self.components..][..n];
                out[a] += row.iter().zip(coeffs).map(|(b, c)| b * c).sum::<f64>();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    pub name: String,
    pub template: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub shape_basis: Basis,
    /// Either empty or `9·(K−1)` components driven by `R_k − I` of every non-root joint.
    pub pose_basis: Basis,
    pub expression_basis: Basis,
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub joint_regressor: Vec<SparseRow>,
    pub skin_weights: Vec<SparseRow>,
    pub keypoints: Vec<Keypoint>,
}

/// Shape, expression and pose coefficients. Empty vectors mean all zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseParams {
    pub betas: Vec<f64>,
    pub expression: Vec<f64>,
    /// Axis-angle root rotation, applied about the root joint.
    pub global_orient: [f64; 3],
    /// Axis-angle rotation for joints 1..K in model order.
    pub body_pose: Vec<[f64; 3]>,
    pub translation: [f64; 3],
}

impl PoseParams {
    /// Sets the axis-angle of a single named joint.
    pub fn with_joint(mut self, model: &BodyModel, joint: &str, axis_angle: [f64; 3]) -> Result<Self> {
        let k = model.joint_index(joint)?;
        if k == 0 {
            self.global_orient = axis_angle;
        } else {
            self.body_pose.resize(model.joint_count() - 1, [0.0; 3]);
            self.body_pose[k - 1] = axis_angle;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct Posed {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
}

impl Posed {
    pub fn transformed(&self, scale: f64, offset: &Vector3<f64>) -> Posed {
        let f = |p: &Vector3<f64>| (p - offset) * scale;
        Posed {
            vertices: self.vertices.iter().map(f).collect(),
            joints: self.joints.iter().map(f).collect(),
        }
    }
}

impl BodyModel {
    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn joint_index(&self, name: &str) -> Result<usize> {
        self.joint_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Model(format!("no joint named `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        let (v, k) = (self.vertex_count(), self.joint_count());
        if v == 0 || k == 0 {
            return bad("model has no vertices or joints".into());
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= v) {
            return bad("face index out of range".into());
        }
        for (name, b) in [
            ("shape", &self.shape_basis),
            ("pose", &self.pose_basis),
            ("expression", &self.expression_basis),
        ] {
            if b.data.len() != v * 3 * b.components {
                return bad(format!(
                    "{name} basis has {} values, expected {}",
                    b.data.len(),
                    v * 3 * b.components
                ));
            }
        }
        if self.pose_basis.components != 0 && self.pose_basis.components != 9 * (k - 1) {
            return bad(format!("pose basis needs 0 or {} components", 9 * (k - 1)));
        }
        if self.joint_names.len() != k || self.joint_regressor.len() != k {
            return bad("joint names/regressor length differs from parent table".into());
        }
        if self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} must have a parent with a smaller index")),
            }
        }
        if self.skin_weights.len() != v {
            return bad("skin weights need one row per vertex".into());
        }
        for (i, row) in self.skin_weights.iter().enumerate() {
            let sum: f64 = row.iter().map(|e| e.1).sum();
            if row.iter().any(|&(j, w)| w < 0.0 || j as usize >= k) || (sum - 1.0).abs() > 1e-6 {
                return bad(format!("skin weights of vertex {i} are not a convex combination"));
            }
        }
        if self.joint_regressor.iter().flatten().any(|&(c, _)| c as usize >= v) {
            return bad("joint regressor column out of range".into());
        }
        for name in COCO_KEYPOINTS {
            let hits: Vec<_> = self.keypoints.iter().filter(|kp| kp.name == name).collect();
            if hits.len() != 1 {
                return bad(format!("keypoint `{name}` mapped {} times", hits.len()));
            }
            let ok = match hits[0].source {
                KeypointSource::Joint(j) => j < k,
                KeypointSource::Vertex(i) => i < v,
            };
            if !ok {
                return bad(format!("keypoint `{name}` source out of range"));
            }
        }
        if self.keypoints.len() != COCO_KEYPOINTS.len() {
            return bad("keypoint map has entries outside COCO-17".into());
        }
        Ok(())
    }

    fn check_params(&self, params: &PoseParams) -> Result<()> {
        let k = self.joint_count();
        let len_ok = |n: usize, want: usize| n == 0 || n <= want;
        if !len_ok(params.betas.len(), self.shape_basis.components) {
            return Err(Error::Parameter(format!(
                "{} shape coefficients, model has {}",
                params.betas.len(),
                self.shape_basis.components
            )));
        }
        if !len_ok(params.expression.len(), self.expression_basis.components) {
            return Err(Error::Parameter(format!(
                "{} expression coefficients, model has {}",
                params.expression.len(),
                self.expression_basis.components
            )));
        }
        if !params.body_pose.is_empty() && params.body_pose.len() != k - 1 {
            return Err(Error::Parameter(format!(
                "body pose has {} joints, model has {}",
                params.body_pose.len(),
                k - 1
            )));
        }
        let all = params
            .betas
            .iter()
            .chain(&params.expression)
            .chain(params.global_orient.iter())
            .chain(params.translation.iter())
            .chain(params.body_pose.iter().flatten());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("pose parameters must be finite".into()));
        }
        for aa in std::iter::once(&params.global_orient).chain(&params.body_pose) {
            if Vector3::from(*aa).norm() >= std::f64::consts::PI {
                return Err(Error::Parameter("axis-angle magnitude must be below π".into()));
            }
        }
        Ok(())
    }

    fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.joint_regressor
            .iter()
            .map(|row| row.iter().map(|&(c, w)| vertices[c as usize] * w).sum())
            .collect()
    }

    /// Rest-pose joint locations of the unshaped template.
    pub fn rest_joints(&self) -> Vec<Vector3<f64>> {
        let t: Vec<Vector3<f64>> = self.template.iter().map(|&p| p.into()).collect();
        self.regress_joints(&t)
    }

    /// Resolves the 17 COCO keypoints on a posed body, in COCO order.
    pub fn coco_keypoints(&self, posed: &Posed) -> [Vector3<f64>; 17] {
        COCO_KEYPOINTS.map(|name| {
            let kp = self.keypoints.iter().find(|k| k.name == name).expect("validated keypoint map");
            match kp.source {
                KeypointSource::Joint(j) => posed.joints[j],
                KeypointSource::Vertex(v) => posed.vertices[v],
            }
        })
    }

    /// Head location used to aim zoomed-in cameras: the `head` joint when
    /// present, the nose keypoint otherwise.
    pub fn head_position(&self, posed: &Posed) -> Vector3<f64> {
        match self.joint_index("head") {
            Ok(j) => posed.joints[j],
            Err(_) => self.coco_keypoints(posed)[0],
        }
    }
}

fn rodrigues(aa: &[f64; 3]) -> Matrix3<f64> {
    *Rotation3::from_scaled_axis(Vector3::from(*aa)).matrix()
}

/// Blend shapes followed by linear blend skinning.
pub fn skin(model: &BodyModel, params: &PoseParams) -> Result<Posed> {
    model.check_params(params)?;
    let k = model.joint_count();
    let mut shaped: Vec<Vector3<f64>> = model.template.iter().map(|&p| p.into()).collect();
    model.shape_basis.apply(&params.betas, &mut shaped);
    model.expression_basis.apply(&params.expression, &mut shaped);
    let rest = model.regress_joints(&shaped);

    let local: Vec<Matrix3<f64>> = (0..k)
        .map(|j| match j {
            0 => rodrigues(&params.global_orient),
            _ => params.body_pose.get(j - 1).map_or_else(Matrix3::identity, rodrigues),
        })
        .collect();

    if model.pose_basis.components > 0 {
        let feature: Vec<f64> = local[1..]
            .iter()
            .flat_map(|r| {
                let d = r - Matrix3::identity();
                (0..9).map(move |e| d[(e / 3, e % 3)])
            })
            .collect();
        model.pose_basis.apply(&feature, &mut shaped);
    }

    // Forward kinematics, tracked as displacement from the rest joint so the
    // identity pose reproduces the template bit-exactly.
    let mut world_r = vec![Matrix3::identity(); k];
    let mut offset = vec![Vector3::zeros(); k];
    for j in 0..k {
        match model.parents[j] {
            None => world_r[j] = local[j],
            Some(p) => {
                world_r[j] = world_r[p] * local[j];
                offset[j] = (world_r[p] - Matrix3::identity()) * (rest[j] - rest[p]) + offset[p];
            }
        }
    }
    let trans = Vector3::from(params.translation);
    let vertices = shaped
        .iter()
        .zip(&model.skin_weights)
        .map(|(v, row)| {
            let mut d = Vector3::zeros();
            for &(j, w) in row {
                let j = j as usize;
                d += w * ((world_r[j] - Matrix3::identity()) * (v - rest[j]) + offset[j]);
            }
            v + d + trans
        })
        .collect();
    let joints = rest.iter().zip(&offset).map(|(r, o)| r + o + trans).collect();
    Ok(Posed { vertices, joints })
}

/// Scale and offset mapping a posed body to `BODY_HEIGHT` tall with the root joint at the origin.
pub fn normalization(posed: &Posed) -> Result<(f64, Vector3<f64>)> {
    let (lo, hi) = posed
        .vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.y), hi.max(v.y)));
    let height = hi - lo;
    if !(height > 0.0) {
        return Err(Error::Model("posed mesh has zero height".into()));
    }
    Ok((BODY_HEIGHT / height, posed.joints[0]))
}

/// Posed body in scene units: `BODY_HEIGHT` tall, root joint at the origin.
pub fn posed_normalized(model: &BodyModel, params: &PoseParams) -> Result<Posed> {
    let posed = skin(model, params)?;
    let (scale, offset) = normalization(&posed)?;
    Ok(posed.transformed(scale, &offset))
}

/// Wavefront OBJ text of a posed mesh.
pub fn to_obj(model: &BodyModel, posed: &Posed) -> String {
    use std::fmt::Write;
    let mut s = format!("# {}\n", model.name);
    for v in &posed.vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
    }
    for f in &model.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// Two bones along +x: joint 0 at the origin, joint 1 ("elbow") at x = 1.
    fn two_bone() -> BodyModel {
        let template = vec![[0.5, 0.0, 0.0], [1.0, 0.1, 0.0], [1.5, 0.0, 0.0], [2.0, 0.0, 0.0]];
        BodyModel {
            name: "two-bone".into(),
            template,
            faces: vec![[0, 1, 2], [1, 2, 3]],
            shape_basis: Basis::empty(),
            pose_basis: Basis::empty(),
            expression_basis: Basis::empty(),
            joint_names: vec!["root".into(), "elbow".into()],
            parents: vec![None, Some(0)],
            // v0 + v2 − v3 = origin, (v0 + v2) / 2 = (1, 0, 0)
            joint_regressor: vec![vec![(0, 1.0), (2, 1.0), (3, -1.0)], vec![(0, 0.5), (2, 0.5)]],
            skin_weights: vec![
                vec![(0, 1.0)],
                vec![(0, 0.5), (1, 0.5)],
                vec![(1, 1.0)],
                vec![(1, 1.0)],
            ],
            keypoints: COCO_KEYPOINTS
                .iter()
                .map(|n| Keypoint { name: n.to_string(), source: KeypointSource::Joint(0) })
                .collect(),
        }
    }

    #[test]
    fn two_bone_regressor_gives_expected_joints() {
        let j = two_bone().rest_joints();
        assert!((j[0] - Vector3::new(0.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((j[1] - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn elbow_rotation_matches_hand_blend() {
        let m = two_bone();
        m.validate().unwrap();
        let p = PoseParams::default().with_joint(&m, "elbow", [0.0, 0.0, FRAC_PI_2]).unwrap();
        let posed = skin(&m, &p).unwrap();
        // Rz(90°) about (1,0,0): (x, y) -> (1 - (y - 0), x - 1)
        let rot = |v: [f64; 3]| Vector3::new(1.0 - v[1], v[0] - 1.0, v[2]);
        assert!((posed.vertices[2] - rot([1.5, 0.0, 0.0])).norm() < 1e-12);
        assert!((posed.vertices[3] - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((posed.vertices[0] - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
        let v1 = [1.0, 0.1, 0.0];
        let blend = (Vector3::from(v1) + rot(v1)) * 0.5;
        assert!((posed.vertices[1] - blend).norm() < 1e-12);
        assert!((posed.joints[1] - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn pose_blend_uses_rotation_deviation() {
        let mut m = two_bone();
        m.pose_basis = Basis { components: 9, data: vec![0.0; 4 * 3 * 9] };
        // Vertex 3, axis y, driven by (R − I)[0][1].
        m.pose_basis.data[(3 * 3 + 1) * 9 + 1] = 1.0;
        let p = PoseParams::default().with_joint(&m, "elbow", [0.0, 0.0, FRAC_PI_2]).unwrap();
        let posed = skin(&m, &p).unwrap();
        // (R − I)[0][1] = −1 for Rz(90°), so the rest vertex moves to (2, −1, 0) before posing.
        let expected = Vector3::new(1.0 - (-1.0), 2.0 - 1.0, 0.0);
        assert!((posed.vertices[3] - expected).norm() < 1e-12);
    }

    #[test]
    fn parameter_errors() {
        let m = two_bone();
        let p = PoseParams { betas: vec![1.0], ..Default::default() };
        assert!(matches!(skin(&m, &p), Err(Error::Parameter(_))));
        let p = PoseParams { body_pose: vec![[0.0; 3]; 3], ..Default::default() };
        assert!(matches!(skin(&m, &p), Err(Error::Parameter(_))));
        let p = PoseParams { global_orient: [4.0, 0.0, 0.0], ..Default::default() };
        assert!(matches!(skin(&m, &p), Err(Error::Parameter(_))));
    }

    #[test]
    fn validation_catches_broken_models() {
        let mut m = two_bone();
        m.skin_weights[1] = vec![(0, 0.7), (1, 0.7)];
        assert!(m.validate().is_err());
        let mut m = two_bone();
        m.parents = vec![None, Some(1)];
        assert!(m.validate().is_err());
        let mut m = two_bone();
        m.keypoints.pop();
        assert!(m.validate().unwrap_err().to_string().contains("right_ankle"));
    }
}
