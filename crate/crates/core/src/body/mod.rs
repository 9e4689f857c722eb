//! Articulated body: template, linear blend skinning, UV chart points, local
//! frames and the root-normalized positional map.

mod io;
mod procedural;

pub use io::{load_poses, load_template, save_poses, save_template, BlobMode};
pub use procedural::{make_procedural_body, BodyConfig, BASE_CHART_POINTS, JOINT_NAMES};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Triangles with area at or below this (m^2) cannot carry a local frame.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// One valid UV pixel and the surface point it stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartEntry<T> {
    /// (row, col) in the `uv_resolution` grid.
    pub pixel: (usize, usize),
    pub face: usize,
    pub bary: [T; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate<T> {
    pub vertices: Vec<Vec3<T>>,
    pub faces: Vec<[usize; 3]>,
    pub joint_names: Vec<String>,
    pub joints: Vec<Vec3<T>>,
    pub parent: Vec<Option<usize>>,
    /// Dense `V x J`, row-major.
    pub skin_weights: Vec<T>,
    pub uv_chart: Vec<ChartEntry<T>>,
    /// (rows, cols)
    pub uv_resolution: (usize, usize),
}

fn tolerance<T: Real>() -> f64 {
    (64.0 * T::epsilon().to_f64_lossless()).max(1e-9)
}

impl<T: Real> BodyTemplate<T> {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Number of chart points `K`.
    pub fn chart_len(&self) -> usize {
        self.uv_chart.len()
    }

    pub fn weights(&self, v: usize) -> &[T] {
        let j = self.joints.len();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    /// Joint indices ordered so that every parent precedes its children.
    pub fn kinematic_order(&self) -> Result<Vec<usize>> {
        let n = self.parent.len();
        if n != self.joints.len() || n == 0 {
            return Err(Error::invalid(format!("{} parents for {} joints", n, self.joints.len())));
        }
        // 0 = unvisited, 1 = on the current path, 2 = placed
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        for start in 0..n {
            let mut path = Vec::new();
            let mut j = start;
            loop {
                match state[j] {
                    2 => break,
                    1 => return Err(Error::invalid(format!("kinematic tree has a cycle through joint {j}"))),
                    _ => {}
                }
                state[j] = 1;
                path.push(j);
                match self.parent[j] {
                    Some(p) if p >= n => return Err(Error::invalid(format!("joint {j} has parent {p} out of range"))),
                    Some(p) => j = p,
                    None => break,
                }
            }
            for &j in path.iter().rev() {
                state[j] = 2;
                order.push(j);
            }
        }
        Ok(order)
    }

    /// Checks every structural invariant of the template.
    pub fn validate(&self) -> Result<()> {
        let tol = tolerance::<T>();
        let (v, f, j) = (self.vertices.len(), self.faces.len(), self.joints.len());
        if v == 0 || f == 0 {
            return Err(Error::invalid("template has no vertices or faces"));
        }
        self.kinematic_order()?;
        if self.joint_names.len() != j {
            return Err(Error::invalid("joint name count differs from joint count"));
        }
        if let Some((i, _)) = self.faces.iter().enumerate().find(|(_, t)| t.iter().any(|&x| x >= v)) {
            return Err(Error::invalid(format!("face {i} references a vertex out of range")));
        }
        if self.skin_weights.len() != v * j {
            return Err(Error::invalid(format!("skin weights hold {} values, expected {v} x {j}", self.skin_weights.len())));
        }
        for vi in 0..v {
            let w = self.weights(vi);
            let s: f64 = w.iter().map(|x| x.to_f64_lossless()).sum();
            if (s - 1.0).abs() > tol || w.iter().any(|&x| x < T::zero()) {
                return Err(Error::invalid(format!("skin weights of vertex {vi} sum to {s}")));
            }
        }
        let (h, w) = self.uv_resolution;
        let mut seen = vec![false; h * w];
        for (k, e) in self.uv_chart.iter().enumerate() {
            let (r, c) = e.pixel;
            if r >= h || c >= w {
                return Err(Error::invalid(format!("chart entry {k} pixel {:?} outside {h}x{w}", e.pixel)));
            }
            if std::mem::replace(&mut seen[r * w + c], true) {
                return Err(Error::invalid(format!("chart pixel {:?} assigned twice", e.pixel)));
            }
            if e.face >= f {
                return Err(Error::invalid(format!("chart entry {k} references face {} of {f}", e.face)));
            }
            let s: f64 = e.bary.iter().map(|x| x.to_f64_lossless()).sum();
            if (s - 1.0).abs() > tol || e.bary.iter().any(|&x| x < T::zero()) {
                return Err(Error::invalid(format!("chart entry {k} has barycentrics {:?}", e.bary)));
            }
        }
        Ok(())
    }

    /// Flat pixel index `row * W + col` of every chart entry.
    pub fn chart_pixels(&self) -> Vec<usize> {
        let w = self.uv_resolution.1;
        self.uv_chart.iter().map(|e| e.pixel.0 * w + e.pixel.1).collect()
    }

    /// Global patch descriptors: pixel centers normalized to `[0, 1]`, as `(u, v) = (col, row)`.
    pub fn chart_uv(&self) -> Vec<[T; 2]> {
        let (h, w) = self.uv_resolution;
        self.uv_chart
            .iter()
            .map(|e| {
                [
                    T::lit((e.pixel.1 as f64 + 0.5) / w as f64),
                    T::lit((e.pixel.0 as f64 + 0.5) / h as f64),
                ]
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> BodyTemplate<U> {
        BodyTemplate {
            vertices: self.vertices.iter().map(|&v| geom::cast3(v)).collect(),
            faces: self.faces.clone(),
            joint_names: self.joint_names.clone(),
            joints: self.joints.iter().map(|&v| geom::cast3(v)).collect(),
            parent: self.parent.clone(),
            skin_weights: self.skin_weights.iter().map(|x| U::lit(x.to_f64_lossless())).collect(),
            uv_chart: self
                .uv_chart
                .iter()
                .map(|e| ChartEntry {
                    pixel: e.pixel,
                    face: e.face,
                    bary: geom::cast3(e.bary),
                })
                .collect(),
            uv_resolution: self.uv_resolution,
        }
    }
}

/// Per-joint local rotations (relative to the rest pose, about the joint)
/// plus a rigid root transform applied last.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose<T> {
    pub joint_rotations: Vec<Mat3<T>>,
    pub root_rotation: Mat3<T>,
    pub root_translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity(joints: usize) -> Self {
        Pose {
            joint_rotations: vec![geom::identity(); joints],
            root_rotation: geom::identity(),
            root_translation: [T::zero(); 3],
        }
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.joint_rotations.len() != joints {
            return Err(Error::invalid(format!(
                "pose has {} joint rotations, template has {joints} joints",
                self.joint_rotations.len()
            )));
        }
        let tol = (1e-6f64).max(16.0 * T::epsilon().to_f64_lossless());
        let all = self.joint_rotations.iter().chain(std::iter::once(&self.root_rotation));
        for (i, r) in all.enumerate() {
            let err = geom::orthonormality_error(r).to_f64_lossless();
            if !(err <= tol) {
                return Err(Error::invalid(format!("rotation {i} is not orthonormal (error {err:e})")));
            }
        }
        if self.root_translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("root translation is not finite"));
        }
        Ok(())
    }

    /// The same pose with an extra rigid motion `x -> R x + d` applied on top.
    pub fn with_root_motion(&self, r: &Mat3<T>, d: Vec3<T>) -> Self {
        Pose {
            joint_rotations: self.joint_rotations.clone(),
            root_rotation: geom::mat_mul(r, &self.root_rotation),
            root_translation: geom::add(geom::mat_vec(r, self.root_translation), d),
        }
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            joint_rotations: self.joint_rotations.iter().map(geom::cast_mat).collect(),
            root_rotation: geom::cast_mat(&self.root_rotation),
            root_translation: geom::cast3(self.root_translation),
        }
    }
}

/// Forward-kinematics transforms `x -> A x + b` of every joint relative to
/// the rest pose, without the root transform.
pub fn joint_transforms<T: Real>(template: &BodyTemplate<T>, pose: &Pose<T>) -> Result<Vec<(Mat3<T>, Vec3<T>)>> {
    let order = template.kinematic_order()?;
    pose.validate(template.joint_count())?;
    let mut out = vec![(geom::identity(), [T::zero(); 3]); template.joint_count()];
    for j in order {
        let r = &pose.joint_rotations[j];
        let c = template.joints[j];
        // L_j(x) = c + R (x - c)
        let local_b = geom::sub(c, geom::mat_vec(r, c));
        out[j] = match template.parent[j] {
            None => (*r, local_b),
            Some(p) => {
                let (pa, pb) = out[p];
                (geom::mat_mul(&pa, r), geom::add(geom::mat_vec(&pa, local_b), pb))
            }
        };
    }
    Ok(out)
}

/// Linear blend skinning followed by the root transform.
pub fn pose_body<T: Real>(template: &BodyTemplate<T>, pose: &Pose<T>) -> Result<Vec<Vec3<T>>> {
    let g = joint_transforms(template, pose)?;
    let j = template.joint_count();
    Ok(template
        .vertices
        .iter()
        .enumerate()
        .map(|(vi, &v)| {
            let w = &template.skin_weights[vi * j..(vi + 1) * j];
            // v + sum_j w_j (G_j v - v): exact at the rest pose, where every G_j v - v is zero
            let mut acc = v;
            for (ji, &wj) in w.iter().enumerate() {
                if wj != T::zero() {
                    let (a, b) = &g[ji];
                    acc = geom::add(acc, geom::scale(geom::add(geom::sub(geom::mat_vec(a, v), v), *b), wj));
                }
            }
            geom::add(geom::mat_vec(&pose.root_rotation, acc), pose.root_translation)
        })
        .collect())
}

fn face_vertices<T: Real>(verts: &[Vec3<T>], face: [usize; 3]) -> [Vec3<T>; 3] {
    face.map(|i| verts[i])
}

/// Surface point `t_k` of every chart entry, in chart order.
pub fn chart_points<T: Real>(verts: &[Vec3<T>], template: &BodyTemplate<T>) -> Vec<Vec3<T>> {
    template
        .uv_chart
        .iter()
        .map(|e| {
            let [a, b, c] = face_vertices(verts, template.faces[e.face]);
            geom::add(
                geom::add(geom::scale(a, e.bary[0]), geom::scale(b, e.bary[1])),
                geom::scale(c, e.bary[2]),
            )
        })
        .collect()
}

/// Frame `[e1 e2 e3]` (as columns) of a triangle: the first two edges and
/// their cross product, each normalized. The edges are not orthogonalized.
pub fn triangle_frame<T: Real>(tri: [Vec3<T>; 3], face: usize) -> Result<Mat3<T>> {
    let [v0, v1, v2] = tri;
    let n = geom::cross(geom::sub(v1, v0), geom::sub(v2, v0));
    let area = 0.5 * geom::norm(n).to_f64_lossless();
    if !(area > MIN_FACE_AREA) {
        return Err(Error::DegenerateFace { face, area });
    }
    let degenerate = || Error::DegenerateFace { face, area };
    let e1 = geom::normalize(geom::sub(v1, v0)).ok_or_else(degenerate)?;
    let e2 = geom::normalize(geom::sub(v2, v1)).ok_or_else(degenerate)?;
    let e3 = geom::normalize(geom::cross(e1, e2)).ok_or_else(degenerate)?;
    Ok(geom::from_columns(e1, e2, e3))
}

/// Local frame `T_k` of every chart entry.
pub fn local_frames<T: Real>(verts: &[Vec3<T>], template: &BodyTemplate<T>) -> Result<Vec<Mat3<T>>> {
    template
        .uv_chart
        .iter()
        .map(|e| triangle_frame(face_vertices(verts, template.faces[e.face]), e.face))
        .collect()
}

/// Root-normalized positional map `[3, H, W]` and its validity mask (row-major pixels).
pub fn positional_map<T: Real>(
    verts: &[Vec3<T>],
    template: &BodyTemplate<T>,
    pose: &Pose<T>,
) -> (Tensor<T>, Vec<bool>) {
    let points = chart_points(verts, template);
    map_from_points(&points, template, pose)
}

fn map_from_points<T: Real>(points: &[Vec3<T>], template: &BodyTemplate<T>, pose: &Pose<T>) -> (Tensor<T>, Vec<bool>) {
    let (h, w) = template.uv_resolution;
    let mut map = Tensor::zeros([3, h, w]);
    let mut mask = vec![false; h * w];
    let data = map.data_mut();
    for (e, &t) in template.uv_chart.iter().zip(points) {
        let px = e.pixel.0 * w + e.pixel.1;
        // R^-1 = R^T for a rotation
        let local = geom::mat_t_vec(&pose.root_rotation, geom::sub(t, pose.root_translation));
        for (c, &v) in local.iter().enumerate() {
            data[c * h * w + px] = v;
        }
        mask[px] = true;
    }
    (map, mask)
}

/// Everything the codec needs from one posed frame.
#[derive(Clone, Debug)]
pub struct PosedBody<T> {
    pub vertices: Vec<Vec3<T>>,
    /// `t_k`
    pub points: Vec<Vec3<T>>,
    /// `T_k`, columns `e1 e2 e3`
    pub frames: Vec<Mat3<T>>,
    pub map: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> PosedBody<T> {
    pub fn new(template: &BodyTemplate<T>, pose: &Pose<T>) -> Result<Self> {
        let vertices = pose_body(template, pose)?;
        let points = chart_points(&vertices, template);
        let frames = local_frames(&vertices, template)?;
        let (map, mask) = map_from_points(&points, template, pose);
        Ok(PosedBody {
            vertices,
            points,
            frames,
            map,
            mask,
        })
    }

    pub fn chart_len(&self) -> usize {
        self.points.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Mat3<f64> {
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        geom::axis_angle(axis, rng.random_range(-3.0..3.0))
    }

    fn random_pose(template: &BodyTemplate<f64>, rng: &mut impl Rng) -> Pose<f64> {
        Pose {
            joint_rotations: (0..template.joint_count()).map(|_| geom::axis_angle([1.0, 0.3, 0.2], rng.random_range(-0.5..0.5))).collect(),
            root_rotation: random_rotation(rng),
            root_translation: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        }
    }

    fn body() -> BodyTemplate<f64> {
        make_procedural_body(&BodyConfig::default(), 3).unwrap()
    }

    fn single_triangle(weights: Vec<f64>, joints: Vec<Vec3<f64>>, parent: Vec<Option<usize>>) -> BodyTemplate<f64> {
        BodyTemplate {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
            joint_names: (0..joints.len()).map(|i| format!("j{i}")).collect(),
            joints,
            parent,
            skin_weights: weights,
            uv_chart: vec![
                ChartEntry { pixel: (0, 0), face: 0, bary: [1.0, 0.0, 0.0] },
                ChartEntry { pixel: (0, 1), face: 0, bary: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0] },
            ],
            uv_resolution: (1, 2),
        }
    }

    #[test]
    fn identity_pose_reproduces_rest_surface() {
        let t = body();
        let posed = pose_body(&t, &Pose::identity(t.joint_count())).unwrap();
        assert_eq!(posed, t.vertices);
        let rest = chart_points(&t.vertices, &t);
        assert_eq!(chart_points(&posed, &t), rest);
    }

    #[test]
    fn rigid_attachment_rotates_with_its_joint() {
        let t = single_triangle(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], vec![[5.0, 0.0, 0.0], [0.0, 0.0, 0.0]], vec![None, Some(0)]);
        let mut pose = Pose::identity(2);
        pose.joint_rotations[1] = geom::axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let posed = pose_body(&t, &pose).unwrap();
        let expected = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
        for (p, e) in posed.iter().zip(expected) {
            assert!(geom::dist2(*p, e) < 1e-24, "{p:?} vs {e:?}");
        }
    }

    #[test]
    fn skinning_matches_explicit_sum() {
        let t = body();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = random_pose(&t, &mut rng);
        let posed = pose_body(&t, &pose).unwrap();
        // oracle: compose each joint's chain explicitly as 4x4-free nested maps
        let apply_chain = |j: usize, x: Vec3<f64>| {
            let mut chain = vec![j];
            while let Some(p) = t.parent[*chain.last().unwrap()] {
                chain.push(p);
            }
            chain.iter().fold(x, |x, &ji| {
                let c = t.joints[ji];
                geom::add(c, geom::mat_vec(&pose.joint_rotations[ji], geom::sub(x, c)))
            })
        };
        for (vi, &v) in t.vertices.iter().enumerate().step_by(7) {
            let mut acc = [0.0; 3];
            for ji in 0..t.joint_count() {
                acc = geom::add(acc, geom::scale(apply_chain(ji, v), t.weights(vi)[ji]));
            }
            let want = geom::add(geom::mat_vec(&pose.root_rotation, acc), pose.root_translation);
            assert!(geom::dist2(posed[vi], want).sqrt() < 1e-10);
        }
    }

    #[test]
    fn cycles_and_bad_rotations_are_rejected() {
        let mut t = single_triangle(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], vec![[0.0; 3]; 2], vec![Some(1), Some(0)]);
        assert!(matches!(pose_body(&t, &Pose::identity(2)), Err(Error::Validation(_))));
        t.parent = vec![None, Some(0)];
        let mut pose = Pose::identity(2);
        pose.joint_rotations[0][0][0] = 2.0;
        assert!(pose_body(&t, &pose).is_err());
    }

    #[test]
    fn chart_barycentric_cases() {
        let t = single_triangle(vec![1.0, 1.0, 1.0], vec![[0.0; 3]], vec![None]);
        let p = chart_points(&t.vertices, &t);
        assert_eq!(p[0], [0.0, 0.0, 0.0]);
        assert!(geom::dist2(p[1], [2.0 / 3.0, 1.0 / 3.0, 0.0]) < 1e-30);
    }

    #[test]
    fn axis_aligned_triangle_has_identity_frame() {
        let t = single_triangle(vec![1.0, 1.0, 1.0], vec![[0.0; 3]], vec![None]);
        let f = local_frames(&t.vertices, &t).unwrap();
        assert_eq!(f[0], geom::identity::<f64>());
    }

    #[test]
    fn degenerate_triangle_names_the_face() {
        let mut t = single_triangle(vec![1.0, 1.0, 1.0], vec![[0.0; 3]], vec![None]);
        t.vertices[2] = [2.0, 0.0, 0.0];
        match local_frames(&t.vertices, &t) {
            Err(Error::DegenerateFace { face: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_triangle_frames_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let tri: [Vec3<f64>; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
            let f = triangle_frame(tri, 0).unwrap();
            assert!(geom::det(&f) > 0.0);
            let e1 = geom::scale(geom::sub(tri[1], tri[0]), 1.0 / geom::norm(geom::sub(tri[1], tri[0])));
            let e2 = geom::scale(geom::sub(tri[2], tri[1]), 1.0 / geom::norm(geom::sub(tri[2], tri[1])));
            let c = geom::cross(e1, e2);
            let e3 = geom::scale(c, 1.0 / geom::norm(c));
            for (col, e) in [e1, e2, e3].into_iter().enumerate() {
                let got = geom::column(&f, col);
                assert!((geom::norm(got) - 1.0).abs() < 1e-12);
                assert!(geom::dist2(got, e).sqrt() < 1e-12);
            }
        }
    }

    #[test]
    fn rigid_root_motion_equivariance() {
        let t = body();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&t, &mut rng);
        let a = PosedBody::new(&t, &pose).unwrap();
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let d = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let b = PosedBody::new(&t, &pose.with_root_motion(&r, d)).unwrap();
            assert!(a.map.max_abs_diff(&b.map) < 1e-9);
            assert_eq!(a.mask, b.mask);
            for k in 0..t.chart_len() {
                let moved = geom::add(geom::mat_vec(&r, a.points[k]), d);
                assert!(geom::dist2(moved, b.points[k]).sqrt() < 1e-9);
                let rf = geom::mat_mul(&r, &a.frames[k]);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((rf[i][j] - b.frames[k][i][j]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn map_with_identity_root_holds_chart_points() {
        let t = body();
        let pb = PosedBody::new(&t, &Pose::identity(t.joint_count())).unwrap();
        let (h, w) = t.uv_resolution;
        for (k, e) in t.uv_chart.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(pb.map.data()[c * h * w + e.pixel.0 * w + e.pixel.1], pb.points[k][c]);
            }
        }
        assert_eq!(pb.mask.iter().filter(|&&m| m).count(), t.chart_len());
    }
}
