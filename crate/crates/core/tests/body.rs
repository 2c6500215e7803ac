mod common;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use splatgen_core::body::skeleton::{COCO_TO_OPENPOSE, OPENPOSE_COLORS};
use splatgen_core::body::{
    init_cloud, load_model, posed_normalized, render_skeleton, sample_surface, sample_triangles, save_model,
    skin, toy, PoseParams, ViewClass, BODY_HEIGHT,
};
use splatgen_core::geometry::project_point;
use splatgen_core::raster::RenderSettings;
use splatgen_core::{render, Camera};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn model() -> splatgen_core::body::BodyModel {
    toy::capsule_person()
}

#[test]
fn identity_pose_is_exact() {
    let m = model();
    let posed = skin(&m, &PoseParams::default()).unwrap();
    for (v, t) in posed.vertices.iter().zip(&m.template) {
        assert_eq!([v.x, v.y, v.z], *t);
    }
    for (j, r) in posed.joints.iter().zip(m.rest_joints()) {
        assert_eq!(*j, r);
    }
}

#[test]
fn global_rotation_is_rigid_about_root() {
    let m = model();
    let mut r = common::rng(4);
    for _ in 0..10 {
        let aa = Vector3::new(r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(-1.5..1.5));
        let rot = Rotation3::from_scaled_axis(aa);
        let p = PoseParams { global_orient: aa.into(), ..Default::default() };
        let posed = skin(&m, &p).unwrap();
        let root = m.rest_joints()[0];
        for (v, t) in posed.vertices.iter().zip(&m.template) {
            let expect = rot * (Vector3::from(*t) - root) + root;
            assert!((v - expect).norm() < 1e-6);
        }
    }
}

#[test]
fn translation_is_added_exactly() {
    let m = model();
    let base = PoseParams::default().with_joint(&m, "left_knee", [0.4, 0.0, 0.1]).unwrap();
    let t = [0.3, -1.25, 2.5];
    let moved = PoseParams { translation: t, ..base.clone() };
    let a = skin(&m, &base).unwrap();
    let b = skin(&m, &moved).unwrap();
    for (p, q) in a.vertices.iter().zip(&b.vertices) {
        assert_eq!(p + Vector3::from(t), *q);
    }
}

#[test]
fn elbow_rotation_moves_forearm_rigidly() {
    let m = model();
    let elbow = m.joint_index("left_elbow").unwrap();
    let wrist = m.joint_index("left_wrist").unwrap();
    let aa = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
    let posed = skin(&m, &PoseParams::default().with_joint(&m, "left_elbow", aa).unwrap()).unwrap();
    let rest = m.rest_joints();
    let rot = Rotation3::from_scaled_axis(Vector3::from(aa));
    let mut checked = 0;
    for (i, row) in m.skin_weights.iter().enumerate() {
        let v = Vector3::from(m.template[i]);
        let about_elbow = rot * (v - rest[elbow]) + rest[elbow];
        if row.iter().all(|&(j, _)| j as usize == elbow || j as usize == wrist) {
            assert!((posed.vertices[i] - about_elbow).norm() < 1e-12);
            checked += 1;
        } else if row.len() == 2 && row.iter().any(|&(j, _)| j as usize == elbow) {
            // Half on the upper arm, half on the forearm.
            let expect = (v + about_elbow) * 0.5;
            assert!((posed.vertices[i] - expect).norm() < 1e-12);
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn shape_components_change_the_body() {
    let m = model();
    let tall = posed_normalized(&m, &PoseParams { betas: vec![1.0, 0.0], ..Default::default() }).unwrap();
    let base = skin(&m, &PoseParams::default()).unwrap();
    let wide = skin(&m, &PoseParams { betas: vec![0.0, 1.0], ..Default::default() }).unwrap();
    let width = |vs: &[Vector3<f64>]| vs.iter().map(|v| v.x).fold(f64::MIN, f64::max);
    assert!(width(&wide.vertices) > width(&base.vertices));
    let (lo, hi) = tall.vertices.iter().fold((f64::MAX, f64::MIN), |a, v| (a.0.min(v.y), a.1.max(v.y)));
    assert!((hi - lo - BODY_HEIGHT).abs() < 1e-9);
}

#[test]
fn two_triangle_area_split() {
    let v = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(2.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(10.0, 0.0, 0.0),
        Vector3::new(16.0, 0.0, 0.0),
        Vector3::new(10.0, 0.0, 1.0),
    ];
    let s = sample_triangles(&v, &[[0, 1, 2], [3, 4, 5]], 40_000, &mut common::rng(11)).unwrap();
    let second = s.faces.iter().filter(|&&f| f == 1).count();
    assert!((second as i64 - 30_000).abs() <= 500, "{second}");
    let chi2 = (second as f64 - 30_000.0).powi(2) / 30_000.0 + ((40_000 - second) as f64 - 10_000.0).powi(2) / 10_000.0;
    assert!(1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2) > 0.01);
}

#[test]
fn equilateral_centroid_converges() {
    let h = 3f64.sqrt() / 2.0;
    let v = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.5, h, 0.0)];
    let s = sample_triangles(&v, &[[0, 1, 2]], 100_000, &mut common::rng(12)).unwrap();
    let mean = s.points.iter().sum::<Vector3<f64>>() / s.points.len() as f64;
    let centroid = (v[0] + v[1] + v[2]) / 3.0;
    assert!((mean - centroid).norm() < 0.01 * centroid.norm());
}

fn point_triangle_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    // Distance to the plane; samples are inside by construction, checked via barycentrics.
    let n = (b - a).cross(&(c - a));
    let area2 = n.norm();
    let n = n / area2;
    let d = (p - a).dot(&n);
    let q = p - n * d;
    let bary = [
        (c - b).cross(&(q - b)).dot(&n) / area2,
        (a - c).cross(&(q - c)).dot(&n) / area2,
        (b - a).cross(&(q - a)).dot(&n) / area2,
    ];
    assert!(bary.iter().all(|&w| w > -1e-9), "{bary:?}");
    d.abs()
}

#[test]
fn samples_lie_on_the_posed_mesh() {
    let m = model();
    let params = PoseParams::default().with_joint(&m, "right_shoulder", [0.0, 0.3, -0.5]).unwrap();
    let posed = posed_normalized(&m, &params).unwrap();
    let s = sample_surface(&m, &params, 5000, &mut common::rng(13)).unwrap();
    for (p, &f) in s.points.iter().zip(&s.faces) {
        let [a, b, c] = m.faces[f as usize].map(|i| posed.vertices[i as usize]);
        assert!(point_triangle_distance(p, &a, &b, &c) < 1e-6);
    }
}

#[test]
fn init_cloud_defaults() {
    let m = model();
    let cloud = init_cloud(&m, &PoseParams::default(), 20_000, &mut common::rng(14)).unwrap();
    assert_eq!(cloud.len(), 20_000);
    for i in 0..cloud.len() {
        assert!((cloud.opacity(i) - 0.1).abs() < 1e-6);
        assert_eq!(cloud.color(i), [0.5; 3]);
        assert_eq!(cloud.rotations[i], [1.0, 0.0, 0.0, 0.0]);
        let s = cloud.scale(i);
        assert_eq!(s.x, s.y);
        assert_eq!(s.y, s.z);
    }
    let (lo, hi) = cloud.bounds();
    assert!(hi.y - lo.y <= BODY_HEIGHT + 1e-9 && hi.y - lo.y > 0.97 * BODY_HEIGHT);
    let posed = posed_normalized(&m, &PoseParams::default()).unwrap();
    assert!(posed.joints[0].norm() == 0.0);
}

#[test]
fn init_cloud_render_covers_silhouette() {
    let m = model();
    let cloud = init_cloud(&m, &PoseParams::default(), 100_000, &mut common::rng(15)).unwrap();
    let posed = posed_normalized(&m, &PoseParams::default()).unwrap();
    let center = (posed.joints[0] + posed.joints[2]) / 2.0;
    let size = 128usize;
    let cam = Camera::from_spherical(2.6, 0.0, 0.0, 50.0, center, size as u32, size as u32).unwrap();
    let out = render(&cloud, &cam, &RenderSettings::default());

    // Silhouette from a dense point projection, eroded twice to keep only the interior.
    let mut mask = vec![false; size * size];
    for i in 0..cloud.len() {
        let p = project_point(&cam, &cloud.position(i)).pixel;
        let (x, y) = (p.x.round() as usize, p.y.round() as usize);
        if x < size && y < size {
            mask[y * size + x] = true;
        }
    }
    for _ in 0..2 {
        let prev = mask.clone();
        for y in 0..size {
            for x in 0..size {
                let inside = |dx: i64, dy: i64| {
                    let (u, v) = (x as i64 + dx, y as i64 + dy);
                    u >= 0 && v >= 0 && (u as usize) < size && (v as usize) < size && prev[v as usize * size + u as usize]
                };
                mask[y * size + x] = inside(0, 0) && inside(1, 0) && inside(-1, 0) && inside(0, 1) && inside(0, -1);
            }
        }
    }
    let interior: Vec<usize> = (0..size * size).filter(|&p| mask[p]).collect();
    assert!(interior.len() > 500);
    let worst = interior.iter().map(|&p| out.alpha[p]).fold(1.0, f64::min);
    assert!(worst > 0.9, "lowest interior alpha {worst}");
    assert_eq!(out.alpha[0], 0.0);
}

fn skeleton_camera(az: f64, size: u32) -> Camera {
    let m = model();
    let posed = posed_normalized(&m, &PoseParams::default()).unwrap();
    let (lo, hi) = posed
        .vertices
        .iter()
        .fold((Vector3::repeat(f64::MAX), Vector3::repeat(f64::MIN)), |(lo, hi), v| (lo.inf(v), hi.sup(v)));
    Camera::from_spherical(2.6, 0.0, az, 50.0, (lo + hi) / 2.0, size, size).unwrap()
}

const FACE: [usize; 5] = [0, 1, 2, 3, 4];

fn face_color(coco: usize) -> [u8; 3] {
    OPENPOSE_COLORS[COCO_TO_OPENPOSE[coco]]
}

#[test]
fn skeleton_back_view_hides_face() {
    let img = render_skeleton(&model(), &PoseParams::default(), &skeleton_camera(180.0, 512)).unwrap();
    for k in FACE {
        assert_eq!(img.count_color(face_color(k)), 0);
    }
    assert!(img.count_color(face_color(5)) > 0);
}

#[test]
fn skeleton_front_view_draws_all_discs() {
    let img = render_skeleton(&model(), &PoseParams::default(), &skeleton_camera(0.0, 512)).unwrap();
    let discs = (0..17).filter(|&k| img.count_color(face_color(k)) > 0).count();
    assert_eq!(discs, 17);
}

#[test]
fn skeleton_side_views_drop_far_side_face_points() {
    let right = render_skeleton(&model(), &PoseParams::default(), &skeleton_camera(90.0, 512)).unwrap();
    assert_eq!(right.count_color(face_color(1)), 0);
    assert_eq!(right.count_color(face_color(3)), 0);
    assert!(right.count_color(face_color(2)) > 0);
    let left = render_skeleton(&model(), &PoseParams::default(), &skeleton_camera(-90.0, 512)).unwrap();
    assert_eq!(left.count_color(face_color(2)), 0);
    assert_eq!(left.count_color(face_color(4)), 0);
    assert!(left.count_color(face_color(1)) > 0);
}

#[test]
fn culling_depends_only_on_view_class() {
    let m = model();
    let present = |az: f64| {
        let img = render_skeleton(&m, &PoseParams::default(), &skeleton_camera(az, 256)).unwrap();
        FACE.map(|k| img.count_color(face_color(k)) > 0)
    };
    for (a, b) in [(-40.0, 40.0), (70.0, 110.0), (-110.0, -70.0), (130.0, -150.0)] {
        assert_eq!(ViewClass::from_azimuth(a), ViewClass::from_azimuth(b));
        assert_eq!(present(a), present(b), "{a} vs {b}");
    }
}

#[test]
fn discs_land_on_projected_keypoints() {
    let m = model();
    let cam = skeleton_camera(20.0, 512);
    let posed = posed_normalized(&m, &PoseParams::default()).unwrap();
    let kps = m.coco_keypoints(&posed);
    let img = render_skeleton(&m, &PoseParams::default(), &cam).unwrap();
    // Body keypoints are far enough apart that their discs are not overdrawn.
    for k in 5..17 {
        let c = img.centroid(face_color(k)).unwrap();
        let p = project_point(&cam, &kps[k]).pixel;
        assert!((c - p).norm() <= 1.0, "keypoint {k}: {c:?} vs {p:?}");
    }
}

#[test]
fn container_round_trips() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    for name in ["toy.json", "toy.body"] {
        let path = dir.path().join(name);
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}

#[test]
fn shipped_toy_model_matches_generator() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/capsule_person.json");
    assert_eq!(load_model(path).unwrap(), model());
}
