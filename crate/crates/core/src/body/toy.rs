//! A small articulated "capsule person" with the same schema as a full body
//! model: elliptic tubes for torso and limbs, a UV sphere for the head, an
//! A-pose, two shape components (stature, girth) and one expression component.

use nalgebra::Vector3;

use super::{Basis, BodyModel, Keypoint, KeypointSource, SparseRow, COCO_KEYPOINTS};

const JOINTS: [(&str, Option<usize>, [f64; 3]); 16] = [
    ("pelvis", None, [0.0, 0.95, 0.0]),
    ("spine", Some(0), [0.0, 1.15, 0.0]),
    ("neck", Some(1), [0.0, 1.45, 0.0]),
    ("head", Some(2), [0.0, 1.56, 0.0]),
    ("left_shoulder", Some(1), [0.17, 1.40, 0.0]),
    ("left_elbow", Some(4), [0.37, 1.20, 0.0]),
    ("left_wrist", Some(5), [0.55, 1.02, 0.0]),
    ("right_shoulder", Some(1), [-0.17, 1.40, 0.0]),
    ("right_elbow", Some(7), [-0.37, 1.20, 0.0]),
    ("right_wrist", Some(8), [-0.55, 1.02, 0.0]),
    ("left_hip", Some(0), [0.09, 0.90, 0.0]),
    ("left_knee", Some(10), [0.09, 0.50, 0.0]),
    ("left_ankle", Some(11), [0.09, 0.08, 0.0]),
    ("right_hip", Some(0), [-0.09, 0.90, 0.0]),
    ("right_knee", Some(13), [-0.09, 0.50, 0.0]),
    ("right_ankle", Some(14), [-0.09, 0.08, 0.0]),
];

const HEAD_CENTER: [f64; 3] = [0.0, 1.64, 0.0];
const HEAD_RADIUS: f64 = 0.1;
const HEAD_LAT: usize = 8;
const HEAD_LON: usize = 12;

struct Tube {
    a: [f64; 3],
    b: [f64; 3],
    radius: (f64, f64),
    rings: usize,
    segments: usize,
    owner: usize,
    start_blend: Option<usize>,
    end_blend: Option<usize>,
    caps: (bool, bool),
    /// (ring, joint) pairs whose ring centroid defines the joint.
    regress: &'static [(usize, usize)],
}

#[derive(Default)]
struct Builder {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    weights: Vec<SparseRow>,
    girth: Vec<Vector3<f64>>,
    regressor: Vec<SparseRow>,
}

impl Builder {
    fn push(&mut self, p: Vector3<f64>, weights: SparseRow, radial: Vector3<f64>) -> u32 {
        self.vertices.push(p);
        self.weights.push(weights);
        self.girth.push(radial);
        (self.vertices.len() - 1) as u32
    }

    fn tube(&mut self, t: &Tube) {
        let (a, b) = (Vector3::from(t.a), Vector3::from(t.b));
        let d = (b - a).normalize();
        let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::y() };
        let w = (helper - d * helper.dot(&d)).normalize();
        let u = w.cross(&d);
        let base = self.vertices.len() as u32;
        let idx = |r: usize, m: usize| base + (r * t.segments + m % t.segments) as u32;
        for r in 0..t.rings {
            let s = r as f64 / (t.rings - 1) as f64;
            let center = a + (b - a) * s;
            let weights = match (r, t.start_blend, t.end_blend) {
                (0, Some(o), _) => vec![(o as u32, 0.5), (t.owner as u32, 0.5)],
                (r, _, Some(o)) if r + 1 == t.rings => vec![(t.owner as u32, 0.5), (o as u32, 0.5)],
                _ => vec![(t.owner as u32, 1.0)],
            };
            for m in 0..t.segments {
                let phi = std::f64::consts::TAU * m as f64 / t.segments as f64;
                let radial = u * (t.radius.0 * phi.cos()) + w * (t.radius.1 * phi.sin());
                self.push(center + radial, weights.clone(), radial);
            }
        }
        for &(ring, joint) in t.regress {
            let wgt = 1.0 / t.segments as f64;
            self.regressor[joint] = (0..t.segments).map(|m| (idx(ring, m), wgt)).collect();
        }
        for r in 0..t.rings - 1 {
            for m in 0..t.segments {
                self.faces.push([idx(r, m), idx(r, m + 1), idx(r + 1, m)]);
                self.faces.push([idx(r, m + 1), idx(r + 1, m + 1), idx(r + 1, m)]);
            }
        }
        let last = t.rings - 1;
        if t.caps.0 {
            let wgt = self.weights[idx(0, 0) as usize].clone();
            let c = self.push(a, wgt, Vector3::zeros());
            for m in 0..t.segments {
                self.faces.push([c, idx(0, m + 1), idx(0, m)]);
            }
        }
        if t.caps.1 {
            let wgt = self.weights[idx(last, 0) as usize].clone();
            let c = self.push(b, wgt, Vector3::zeros());
            for m in 0..t.segments {
                self.faces.push([c, idx(last, m), idx(last, m + 1)]);
            }
        }
    }

    /// UV sphere; returns the index of vertex (latitude ring `k` ≥ 1, longitude `m`).
    fn head(&mut self, joint: usize) -> impl Fn(usize, usize) -> u32 {
        let c = Vector3::from(HEAD_CENTER);
        let base = self.vertices.len() as u32;
        let idx = move |k: usize, m: usize| base + ((k - 1) * HEAD_LON + m % HEAD_LON) as u32;
        for k in 1..HEAD_LAT {
            let theta = std::f64::consts::PI * k as f64 / HEAD_LAT as f64;
            for m in 0..HEAD_LON {
                let phi = std::f64::consts::TAU * m as f64 / HEAD_LON as f64;
                let n = Vector3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos());
                self.push(c + n * HEAD_RADIUS, vec![(joint as u32, 1.0)], n * HEAD_RADIUS);
            }
        }
        let top = self.push(c + Vector3::y() * HEAD_RADIUS, vec![(joint as u32, 1.0)], Vector3::y() * HEAD_RADIUS);
        let bottom =
            self.push(c - Vector3::y() * HEAD_RADIUS, vec![(joint as u32, 1.0)], -Vector3::y() * HEAD_RADIUS);
        for k in 1..HEAD_LAT - 1 {
            for m in 0..HEAD_LON {
                self.faces.push([idx(k, m), idx(k + 1, m), idx(k, m + 1)]);
                self.faces.push([idx(k, m + 1), idx(k + 1, m), idx(k + 1, m + 1)]);
            }
        }
        for m in 0..HEAD_LON {
            self.faces.push([top, idx(1, m), idx(1, m + 1)]);
            self.faces.push([bottom, idx(HEAD_LAT - 1, m + 1), idx(HEAD_LAT - 1, m)]);
        }
        idx
    }
}

fn mirror(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

fn joint(i: usize) -> [f64; 3] {
    JOINTS[i].2
}

fn limb_tubes(left: bool) -> Vec<Tube> {
    // Joint indices for one side; the right side mirrors positions.
    let (sh, el, wr, hip, kn, an) = if left { (4, 5, 6, 10, 11, 12) } else { (7, 8, 9, 13, 14, 15) };
    let side = |p: [f64; 3]| if left { p } else { mirror(p) };
    let hand_tip = {
        let (e, w) = (Vector3::from(joint(5)), Vector3::from(joint(6)));
        let tip = w + (w - e).normalize() * 0.08;
        side([tip.x, tip.y, tip.z])
    };
    let regress_arm: &'static [(usize, usize)] = if left { &[(0, 4)] } else { &[(0, 7)] };
    let regress_fore: &'static [(usize, usize)] = if left { &[(0, 5), (2, 6)] } else { &[(0, 8), (2, 9)] };
    let regress_thigh: &'static [(usize, usize)] = if left { &[(0, 10)] } else { &[(0, 13)] };
    let regress_shin: &'static [(usize, usize)] = if left { &[(0, 11), (3, 12)] } else { &[(0, 14), (3, 15)] };
    let tube = |a, b, r: (f64, f64), rings, owner, start, end, regress| Tube {
        a,
        b,
        radius: r,
        rings,
        segments: 8,
        owner,
        start_blend: start,
        end_blend: end,
        caps: (true, true),
        regress,
    };
    vec![
        tube(joint(sh), joint(el), (0.05, 0.05), 3, sh, Some(1), Some(el), regress_arm),
        tube(joint(el), joint(wr), (0.04, 0.04), 3, el, Some(sh), Some(wr), regress_fore),
        tube(joint(wr), hand_tip, (0.035, 0.02), 2, wr, Some(el), None, &[]),
        tube(joint(hip), joint(kn), (0.075, 0.075), 4, hip, Some(0), Some(kn), regress_thigh),
        tube(joint(kn), joint(an), (0.055, 0.055), 4, kn, Some(hip), Some(an), regress_shin),
        tube(joint(an), side([0.09, 0.04, 0.15]), (0.04, 0.035), 2, an, Some(kn), None, &[]),
    ]
}

/// Builds the toy model. The layout is deterministic, so two calls produce identical models.
pub fn capsule_person() -> BodyModel {
    let mut b = Builder { regressor: vec![Vec::new(); JOINTS.len()], ..Default::default() };
    let torso = [
        Tube {
            a: [0.0, 0.85, 0.0],
            b: joint(1),
            radius: (0.15, 0.10),
            rings: 4,
            segments: 12,
            owner: 0,
            start_blend: None,
            end_blend: Some(1),
            caps: (true, false),
            regress: &[(1, 0), (3, 1)],
        },
        Tube {
            a: joint(1),
            b: joint(2),
            radius: (0.16, 0.10),
            rings: 4,
            segments: 12,
            owner: 1,
            start_blend: Some(0),
            end_blend: Some(2),
            caps: (false, true),
            regress: &[(3, 2)],
        },
        Tube {
            a: joint(2),
            b: joint(3),
            radius: (0.05, 0.05),
            rings: 3,
            segments: 8,
            owner: 2,
            start_blend: Some(1),
            end_blend: Some(3),
            caps: (false, false),
            regress: &[(2, 3)],
        },
    ];
    for t in &torso {
        b.tube(t);
    }
    let head = b.head(3);
    let face = [
        ("nose", head(4, 0)),
        ("left_eye", head(3, 1)),
        ("right_eye", head(3, HEAD_LON - 1)),
        ("left_ear", head(4, 3)),
        ("right_ear", head(4, HEAD_LON - 3)),
    ];
    for left in [true, false] {
        for t in limb_tubes(left) {
            b.tube(&t);
        }
    }

    let v = b.vertices.len();
    let mut shape = vec![0.0; v * 3 * 2];
    let mut expression = vec![0.0; v * 3];
    let head_center = Vector3::from(HEAD_CENTER);
    for (i, p) in b.vertices.iter().enumerate() {
        // Stature: stretch vertically about the pelvis.
        shape[(i * 3 + 1) * 2] = 0.1 * (p.y - joint(0)[1]);
        // Girth: push outward from each part's axis.
        for a in 0..3 {
            shape[(i * 3 + a) * 2 + 1] = 0.15 * b.girth[i][a];
        }
        // Expression: bulge the front of the face.
        let n = (p - head_center) / HEAD_RADIUS;
        if (n.norm() - 1.0).abs() < 1e-9 && n.z > 0.0 {
            expression[i * 3 + 2] = 0.01 * n.z;
        }
    }

    let mut keypoints: Vec<Keypoint> = face
        .iter()
        .map(|&(name, vtx)| Keypoint { name: name.into(), source: KeypointSource::Vertex(vtx as usize) })
        .collect();
    for name in &COCO_KEYPOINTS[5..] {
        let j = JOINTS.iter().position(|(n, ..)| n == name).expect("body keypoints are joints");
        keypoints.push(Keypoint { name: name.to_string(), source: KeypointSource::Joint(j) });
    }
    keypoints.sort_by_key(|k| COCO_KEYPOINTS.iter().position(|n| *n == k.name));

    BodyModel {
        name: "capsule-person".into(),
        template: b.vertices.iter().map(|p| [p.x, p.y, p.z]).collect(),
        faces: b.faces,
        shape_basis: Basis { components: 2, data: shape },
        pose_basis: Basis::empty(),
        expression_basis: Basis { components: 1, data: expression },
        joint_names: JOINTS.iter().map(|j| j.0.to_string()).collect(),
        parents: JOINTS.iter().map(|j| j.1).collect(),
        joint_regressor: b.regressor,
        skin_weights: b.weights,
        keypoints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_model_is_valid_and_small() {
        let m = capsule_person();
        m.validate().unwrap();
        assert!((400..700).contains(&m.vertex_count()), "{}", m.vertex_count());
    }

    #[test]
    fn regressed_joints_match_layout() {
        let m = capsule_person();
        for (j, p) in m.rest_joints().iter().enumerate() {
            let want = Vector3::from(JOINTS[j].2);
            assert!((p - want).norm() < 1e-12, "joint {} at {p:?}", JOINTS[j].0);
        }
    }

    #[test]
    fn face_keypoints_face_forward() {
        let m = capsule_person();
        let posed = super::super::skin(&m, &Default::default()).unwrap();
        let k = m.coco_keypoints(&posed);
        assert!(k[0].z > 0.09);
        assert!(k[1].x > 0.0 && k[2].x < 0.0);
        assert!(k[3].x > 0.09 && k[4].x < -0.09);
    }
}
