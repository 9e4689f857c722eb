//! Procedural capsule-limb humanoid with a packed per-limb UV chart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodyTemplate, ChartEntry};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::scalar::Real;

pub const JOINT_NAMES: [&str; 11] = [
    "pelvis",
    "spine",
    "neck",
    "l_shoulder",
    "l_elbow",
    "r_shoulder",
    "r_elbow",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
];
const PARENT: [Option<usize>; 11] = [None, Some(0), Some(1), Some(1), Some(3), Some(1), Some(5), Some(0), Some(7), Some(0), Some(9)];

const PELVIS: usize = 0;
const SPINE: usize = 1;
const NECK: usize = 2;
const L_SHOULDER: usize = 3;
const L_ELBOW: usize = 4;
const R_SHOULDER: usize = 5;
const R_ELBOW: usize = 6;
const L_HIP: usize = 7;
const L_KNEE: usize = 8;
const R_HIP: usize = 9;
const R_KNEE: usize = 10;

/// Chart size at the base 32x32 resolution.
pub const BASE_CHART_POINTS: usize = 798;
const BASE_RES: usize = 32;

/// Half-width (in the part's axial parameter) of a skinning transition.
const BLEND: f64 = 0.06;
/// Smallest ring radius of a rounded end, relative to the nominal radius.
const END_FLOOR: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyConfig {
    /// Square UV chart side; a positive multiple of 32.
    pub uv_resolution: usize,
    /// Vertices around each limb ring.
    pub segments: usize,
    /// Rings along each limb.
    pub rings: usize,
    /// Relative proportion jitter drawn from the seed.
    pub jitter: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig {
            uv_resolution: 32,
            segments: 24,
            rings: 16,
            jitter: 0.03,
        }
    }
}

impl BodyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.uv_resolution == 0 || self.uv_resolution % BASE_RES != 0 {
            return Err(Error::invalid(format!(
                "body.uv_resolution must be a positive multiple of {BASE_RES}, got {}",
                self.uv_resolution
            )));
        }
        if self.segments < 3 {
            return Err(Error::invalid(format!("body.segments must be at least 3, got {}", self.segments)));
        }
        if self.rings < 2 {
            return Err(Error::invalid(format!("body.rings must be at least 2, got {}", self.rings)));
        }
        if !(0.0..=0.3).contains(&self.jitter) {
            return Err(Error::invalid(format!("body.jitter must lie in [0, 0.3], got {}", self.jitter)));
        }
        Ok(())
    }
}

/// A capsule-like tube along a straight axis.
struct Part {
    /// Chart rectangle at base resolution: rows r0..r1, cols c0..c1.
    rect: [usize; 4],
    start: Vec3<f64>,
    end: Vec3<f64>,
    /// Radii along the two cross-section axes at the start and end.
    radius_a: [f64; 2],
    radius_b: [f64; 2],
    /// Axial fraction rounded off at each end.
    round: [f64; 2],
    /// Skinning chain: joint and the axial position where it takes over.
    chain: Vec<(usize, f64)>,
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl Part {
    fn profile(&self, s: f64) -> f64 {
        let mut f: f64 = 1.0;
        let [c0, c1] = self.round;
        if c0 > 0.0 && s < c0 {
            f = f.min((1.0 - ((c0 - s) / c0).powi(2)).max(0.0).sqrt());
        }
        if c1 > 0.0 && s > 1.0 - c1 {
            f = f.min((1.0 - ((s - (1.0 - c1)) / c1).powi(2)).max(0.0).sqrt());
        }
        f.max(END_FLOOR)
    }

    fn weights(&self, s: f64, joints: usize) -> Vec<f64> {
        let mut w = vec![0.0; joints];
        let n = self.chain.len();
        // sigma_m rises from 0 to 1 across boundary m; joint m gets sigma_m - sigma_{m+1}
        let sigma = |m: usize| -> f64 {
            if m == 0 {
                1.0
            } else if m >= n {
                0.0
            } else {
                smoothstep((s - (self.chain[m].1 - BLEND)) / (2.0 * BLEND))
            }
        };
        for m in 0..n {
            w[self.chain[m].0] += sigma(m) - sigma(m + 1);
        }
        w
    }
}

struct Skeleton {
    joints: Vec<Vec3<f64>>,
    parts: Vec<Part>,
}

fn skeleton(seed: u64, jitter: f64) -> Skeleton {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || 1.0 + jitter * rng.random_range(-1.0..1.0);
    let (sh, sg, sa) = (draw(), draw(), draw());
    let p = |x: f64, y: f64| [x * sg, y * sh, 0.0];
    let arm = |x0: f64, x: f64, y: f64| [(x0 + (x - x0) * sa) * sg, y * sh, 0.0];

    let mut joints = vec![[0.0; 3]; JOINT_NAMES.len()];
    joints[PELVIS] = p(0.0, 0.95);
    joints[SPINE] = p(0.0, 1.20);
    joints[NECK] = p(0.0, 1.50);
    for (side, sh_j, el_j) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
        joints[sh_j] = arm(0.19 * side, 0.19 * side, 1.44);
        joints[el_j] = arm(0.19 * side, 0.46 * side, 1.44);
    }
    for (side, hip, knee) in [(1.0, L_HIP, L_KNEE), (-1.0, R_HIP, R_KNEE)] {
        joints[hip] = p(0.095 * side, 0.90);
        joints[knee] = p(0.095 * side, 0.50);
    }

    let axial = |a: Vec3<f64>, b: Vec3<f64>, j: Vec3<f64>| {
        let d = geom::sub(b, a);
        geom::dot(geom::sub(j, a), d) / geom::dot(d, d)
    };
    let r = |x: f64| x * sg;

    // chart rectangles hold pixels in proportion to each part's lateral area,
    // with rows:cols close to length:perimeter so samples are evenly spaced
    let torso_a = p(0.0, 0.80);
    let torso_b = p(0.0, 1.53);
    let mut parts = vec![
        Part {
            rect: [0, 15, 0, 19],
            start: torso_a,
            end: torso_b,
            radius_a: [r(0.11), r(0.10)],
            radius_b: [r(0.17), r(0.19)],
            round: [0.12, 0.15],
            chain: vec![(PELVIS, 0.0), (SPINE, axial(torso_a, torso_b, joints[SPINE]))],
        },
        Part {
            rect: [0, 7, 19, 28],
            start: p(0.0, 1.48),
            end: p(0.0, 1.80),
            radius_a: [r(0.055), r(0.095)],
            radius_b: [r(0.05), r(0.085)],
            round: [0.0, 0.45],
            chain: vec![(SPINE, 0.0), (NECK, 0.12)],
        },
    ];
    for (side, hip, knee) in [(1.0, L_HIP, L_KNEE), (-1.0, R_HIP, R_KNEE)] {
        let c = if side > 0.0 { 0 } else { 9 };
        let (a, b) = (p(0.095 * side, 0.92), p(0.095 * side, 0.05));
        parts.push(Part {
            rect: [15, 32, c, c + 9],
            start: a,
            end: b,
            radius_a: [r(0.08), r(0.05)],
            radius_b: [r(0.08), r(0.05)],
            round: [0.06, 0.08],
            chain: vec![(PELVIS, 0.0), (hip, 0.08), (knee, axial(a, b, joints[knee]))],
        });
    }
    for (side, sh_j, el_j) in [(1.0, L_SHOULDER, L_ELBOW), (-1.0, R_SHOULDER, R_ELBOW)] {
        let c = if side > 0.0 { 18 } else { 24 };
        let (a, b) = (arm(0.19 * side, 0.15 * side, 1.44), arm(0.19 * side, 0.74 * side, 1.44));
        parts.push(Part {
            rect: [15, 27, c, c + 6],
            start: a,
            end: b,
            radius_a: [r(0.05), r(0.035)],
            radius_b: [r(0.05), r(0.035)],
            round: [0.06, 0.08],
            chain: vec![(SPINE, 0.0), (sh_j, 0.1), (el_j, axial(a, b, joints[el_j]))],
        });
    }
    Skeleton { joints, parts }
}

/// Deterministic humanoid template; at 32x32 the chart has exactly 798 entries.
pub fn make_procedural_body<T: Real>(config: &BodyConfig, seed: u64) -> Result<BodyTemplate<T>> {
    config.validate()?;
    let sk = skeleton(seed, config.jitter);
    let (segs, rings) = (config.segments, config.rings);
    let scale = config.uv_resolution / BASE_RES;
    let nj = sk.joints.len();

    let mut vertices: Vec<Vec3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let res = config.uv_resolution;
    let mut chart: Vec<Option<ChartEntry<f64>>> = vec![None; res * res];

    for part in &sk.parts {
        let d = geom::normalize(geom::sub(part.end, part.start)).expect("part axis");
        let reference = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
        let ea = geom::normalize(geom::sub(reference, geom::scale(d, geom::dot(reference, d)))).unwrap();
        // e_a x e_b = d, so increasing angle runs e_a -> e_b and (tangent x axis) points outward
        let eb = geom::cross(d, ea);

        let vbase = vertices.len();
        for i in 0..rings {
            let s = i as f64 / (rings - 1) as f64;
            let center = geom::lerp(part.start, part.end, s);
            let f = part.profile(s);
            let ra = f * (part.radius_a[0] + (part.radius_a[1] - part.radius_a[0]) * s);
            let rb = f * (part.radius_b[0] + (part.radius_b[1] - part.radius_b[0]) * s);
            for j in 0..segs {
                let th = std::f64::consts::TAU * j as f64 / segs as f64;
                let off = geom::add(geom::scale(ea, ra * th.cos()), geom::scale(eb, rb * th.sin()));
                vertices.push(geom::add(center, off));
                weights.extend(part.weights(s, nj));
            }
        }
        let end_r = |k: usize| END_FLOOR * 0.5 * (part.radius_a[k] + part.radius_b[k]);
        let poles = [
            geom::sub(part.start, geom::scale(d, 0.6 * end_r(0))),
            geom::add(part.end, geom::scale(d, 0.6 * end_r(1))),
        ];
        for (k, &pole) in poles.iter().enumerate() {
            vertices.push(pole);
            weights.extend(part.weights(k as f64, nj));
        }
        let idx = |i: usize, j: usize| vbase + i * segs + (j % segs);

        let fbase = faces.len();
        for i in 0..rings - 1 {
            for j in 0..segs {
                let (a, b, c, dd) = (idx(i, j), idx(i, j + 1), idx(i + 1, j + 1), idx(i + 1, j));
                faces.push([a, b, c]);
                faces.push([c, dd, a]);
            }
        }
        for (k, ring) in [(0usize, 0usize), (1, rings - 1)] {
            let pole = vbase + rings * segs + k;
            let outward = if k == 0 { geom::scale(d, -1.0) } else { d };
            for j in 0..segs {
                let mut tri = [pole, idx(ring, j), idx(ring, j + 1)];
                let [p0, p1, p2] = tri.map(|v| vertices[v]);
                if geom::dot(geom::cross(geom::sub(p1, p0), geom::sub(p2, p0)), outward) < 0.0 {
                    tri.swap(1, 2);
                }
                faces.push(tri);
            }
        }

        let [r0, r1, c0, c1] = part.rect.map(|x| x * scale);
        let (nr, nc) = (r1 - r0, c1 - c0);
        for pr in 0..nr {
            let s = (pr as f64 + 0.5) / nr as f64 * (rings - 1) as f64;
            let i = (s.floor() as usize).min(rings - 2);
            let t = s - i as f64;
            for pc in 0..nc {
                let g = (pc as f64 + 0.5) / nc as f64 * segs as f64;
                let j = (g.floor() as usize).min(segs - 1);
                let phi = g - j as f64;
                let quad = fbase + 2 * (i * segs + j);
                // quad corners a=(0,0) b=(1,0) c=(1,1) d=(0,1) in (phi, t)
                let (face, bary) = if phi >= t {
                    (quad, [1.0 - phi, phi - t, t])
                } else {
                    (quad + 1, [phi, t - phi, 1.0 - t])
                };
                chart[(r0 + pr) * res + c0 + pc] = Some(ChartEntry {
                    pixel: (r0 + pr, c0 + pc),
                    face,
                    bary,
                });
            }
        }
    }

    let template = BodyTemplate {
        vertices,
        faces,
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        joints: sk.joints,
        parent: PARENT.to_vec(),
        skin_weights: weights,
        uv_chart: chart.into_iter().flatten().collect(),
        uv_resolution: (res, res),
    };
    template.validate()?;
    Ok(template.cast())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{local_frames, Pose, PosedBody};

    #[test]
    fn default_chart_has_798_points() {
        let t = make_procedural_body::<f64>(&BodyConfig::default(), 0).unwrap();
        assert_eq!(t.chart_len(), BASE_CHART_POINTS);
        assert!(t.joint_count() >= 5);
        let dense = make_procedural_body::<f64>(&BodyConfig { uv_resolution: 64, ..Default::default() }, 0).unwrap();
        assert_eq!(dense.chart_len(), 4 * BASE_CHART_POINTS);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = BodyConfig::default();
        let a = make_procedural_body::<f64>(&c, 7).unwrap();
        assert_eq!(a, make_procedural_body::<f64>(&c, 7).unwrap());
        assert_ne!(a.vertices, make_procedural_body::<f64>(&c, 8).unwrap().vertices);
    }

    #[test]
    fn skin_weight_rows_sum_to_one() {
        let t = make_procedural_body::<f64>(&BodyConfig::default(), 1).unwrap();
        for v in 0..t.vertices.len() {
            let s: f64 = t.weights(v).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            BodyConfig { segments: 0, ..Default::default() },
            BodyConfig { rings: 0, ..Default::default() },
            BodyConfig { uv_resolution: 48, ..Default::default() },
        ] {
            assert!(matches!(make_procedural_body::<f64>(&c, 0), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn frames_point_outward_and_are_well_formed() {
        let t = make_procedural_body::<f64>(&BodyConfig::default(), 2).unwrap();
        let frames = local_frames(&t.vertices, &t).unwrap();
        let body = PosedBody::new(&t, &Pose::identity(t.joint_count())).unwrap();
        for (k, f) in frames.iter().enumerate() {
            let cols = [0, 1, 2].map(|c| geom::column(f, c));
            for c in cols {
                assert!((geom::norm(c) - 1.0).abs() < 1e-9);
            }
            assert!(geom::dot(cols[2], cols[0]).abs() < 1e-9 && geom::dot(cols[2], cols[1]).abs() < 1e-9);
            assert!(geom::det(f) > 0.0, "chart entry {k}");
            // e3 should point away from the vertical body axis for the torso
            let e = &t.uv_chart[k];
            if e.pixel.0 < 14 && e.pixel.1 < 15 && (3..11).contains(&e.pixel.0) {
                let p = body.points[k];
                assert!(p[0] * cols[2][0] + p[2] * cols[2][2] > 0.0);
            }
        }
    }
}
