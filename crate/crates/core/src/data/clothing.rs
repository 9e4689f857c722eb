//! Procedural garment: a pose-modulated wrinkle field displaced along the
//! body's smooth normal, plus an optional drooping hem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scan;
use crate::body::{pose_body, BodyTemplate, Pose};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HemConfig {
    /// Rest-pose height (m) below which the hem starts to droop.
    pub level: f64,
    /// Height band (m) over which the droop ramps to full strength.
    pub width: f64,
    /// Extra outward offset (m) at full strength.
    pub droop: f64,
}

impl Default for HemConfig {
    fn default() -> Self {
        HemConfig { level: 0.85, width: 0.25, droop: 0.03 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClothingConfig {
    /// Constant offset along the surface normal (m).
    pub base_offset: f64,
    /// Wrinkle amplitude (m).
    pub amplitude: f64,
    /// Wrinkle frequency (rad/m) along the rest-space wave direction.
    pub frequency: f64,
    /// Per-joint gains on the joint's rotation angle; missing joints get 0.
    pub coupling: Vec<f64>,
    pub hem: Option<HemConfig>,
    /// Fixes the wave direction and phase.
    pub seed: u64,
}

impl Default for ClothingConfig {
    fn default() -> Self {
        ClothingConfig {
            base_offset: 0.012,
            amplitude: 0.008,
            frequency: 45.0,
            // pelvis spine neck l_sh l_el r_sh r_el l_hip l_knee r_hip r_knee
            coupling: vec![0.0, 1.0, 0.5, 1.0, 1.5, 1.0, 1.5, 1.0, 1.5, 1.0, 1.5],
            hem: None,
            seed: 0,
        }
    }
}

impl ClothingConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.base_offset, self.amplitude, self.frequency].iter().all(|v| v.is_finite())
            && self.coupling.iter().all(|g| g.is_finite());
        if !finite {
            return Err(Error::invalid("clothing parameters must be finite"));
        }
        if self.base_offset < 0.0 || self.amplitude < 0.0 {
            return Err(Error::invalid("clothing.base_offset and clothing.amplitude must be nonnegative"));
        }
        if let Some(h) = &self.hem {
            if !(h.droop >= 0.0 && h.width > 0.0 && h.level.is_finite()) {
                return Err(Error::invalid("clothing.hem needs droop >= 0 and width > 0"));
            }
        }
        Ok(())
    }
}

/// Rotation angle (rad) of a rotation matrix.
pub fn rotation_angle(r: &geom::Mat3<f64>) -> f64 {
    ((r[0][0] + r[1][1] + r[2][2] - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

fn smoothstep(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
    }
}

/// Garment displacement field bound to one template and pose.
pub struct Garment<'a> {
    template: &'a BodyTemplate<f64>,
    config: &'a ClothingConfig,
    direction: Vec3<f64>,
    phase: f64,
    /// Posed vertices and their area-weighted normals.
    posed: Vec<Vec3<f64>>,
    vertex_normals: Vec<Vec3<f64>>,
    /// Per-vertex wave coordinate and pose-coupling factor.
    wave: Vec<f64>,
    coupling: Vec<f64>,
}

/// Point on the garment with its outward unit normal.
#[derive(Clone, Copy, Debug)]
pub struct GarmentSample {
    pub point: Vec3<f64>,
    pub normal: Vec3<f64>,
    /// Offset along the body normal.
    pub height: f64,
    pub body_point: Vec3<f64>,
}

impl<'a> Garment<'a> {
    pub fn new(template: &'a BodyTemplate<f64>, pose: &Pose<f64>, config: &'a ClothingConfig) -> Result<Self> {
        config.validate()?;
        let posed = pose_body(template, pose)?;
        let mut vertex_normals = vec![[0.0; 3]; posed.len()];
        for (f, face) in template.faces.iter().enumerate() {
            let [a, b, c] = face.map(|v| posed[v]);
            let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
            if geom::norm(n) * 0.5 <= crate::body::MIN_FACE_AREA {
                return Err(Error::DegenerateFace { face: f, area: geom::norm(n) * 0.5 });
            }
            for &v in face {
                vertex_normals[v] = geom::add(vertex_normals[v], n);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tilt: f64 = rng.random_range(-0.6..0.6);
        let direction = geom::normalize([tilt.sin(), tilt.cos(), 0.3 * rng.random_range(-1.0..1.0)]).unwrap();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let joint_terms: Vec<f64> = (0..template.joint_count())
            .map(|j| config.coupling.get(j).copied().unwrap_or(0.0) * rotation_angle(&pose.joint_rotations[j]).abs())
            .collect();
        let wave = template.vertices.iter().map(|v| geom::dot(*v, direction)).collect();
        let coupling = (0..template.vertices.len())
            .map(|v| template.weights(v).iter().zip(&joint_terms).map(|(w, g)| w * g).sum())
            .collect();
        Ok(Garment { template, config, direction, phase, posed, vertex_normals, wave, coupling })
    }

    pub fn wave_direction(&self) -> Vec3<f64> {
        self.direction
    }

    pub fn posed_vertices(&self) -> &[Vec3<f64>] {
        &self.posed
    }

    /// Offset along the normal and its derivatives in the face parameters
    /// `(u, v)`, where the barycentric weights are `(1 - u - v, u, v)`.
    fn height(&self, face: [usize; 3], bary: [f64; 3]) -> (f64, f64, f64) {
        let c = self.config;
        let lin = |vals: &[f64]| {
            let f = face.map(|v| vals[v]);
            (bary[0] * f[0] + bary[1] * f[1] + bary[2] * f[2], f[1] - f[0], f[2] - f[0])
        };
        let (s, s_u, s_v) = lin(&self.wave);
        let (g, g_u, g_v) = lin(&self.coupling);
        let arg = c.frequency * s + self.phase;
        let (sin, cos) = arg.sin_cos();
        let mut h = c.base_offset + c.amplitude * (1.0 + g) * sin;
        let mut h_u = c.amplitude * (g_u * sin + (1.0 + g) * cos * c.frequency * s_u);
        let mut h_v = c.amplitude * (g_v * sin + (1.0 + g) * cos * c.frequency * s_v);
        if let Some(hem) = &c.hem {
            let ys = face.map(|v| self.template.vertices[v][1]);
            let y = bary[0] * ys[0] + bary[1] * ys[1] + bary[2] * ys[2];
            let (r, dr) = smoothstep((hem.level - y) / hem.width);
            let k = -hem.droop * dr / hem.width;
            h += hem.droop * r;
            h_u += k * (ys[1] - ys[0]);
            h_v += k * (ys[2] - ys[0]);
        }
        (h, h_u, h_v)
    }

    /// Garment point over barycentric `bary` of `face` (posed mesh).
    pub fn sample(&self, face: usize, bary: [f64; 3]) -> GarmentSample {
        let f = self.template.faces[face];
        let x = f.map(|v| self.posed[v]);
        let nv = f.map(|v| self.vertex_normals[v]);
        let combine = |p: [Vec3<f64>; 3]| {
            geom::add(geom::add(geom::scale(p[0], bary[0]), geom::scale(p[1], bary[1])), geom::scale(p[2], bary[2]))
        };
        let body_point = combine(x);
        let n = combine(nv);
        let len = geom::norm(n);
        let nn = geom::scale(n, 1.0 / len);
        let (h, h_u, h_v) = self.height(f, bary);

        // P = X + h N, N = n / |n|
        let dn = |d: Vec3<f64>| geom::scale(geom::sub(d, geom::scale(nn, geom::dot(nn, d))), 1.0 / len);
        let tangent = |dx: Vec3<f64>, dh: f64, dnv: Vec3<f64>| geom::add(geom::add(dx, geom::scale(nn, dh)), geom::scale(dn(dnv), h));
        let p_u = tangent(geom::sub(x[1], x[0]), h_u, geom::sub(nv[1], nv[0]));
        let p_v = tangent(geom::sub(x[2], x[0]), h_v, geom::sub(nv[2], nv[0]));
        let mut normal = geom::normalize(geom::cross(p_u, p_v)).unwrap_or(nn);
        if geom::dot(normal, nn) < 0.0 {
            normal = geom::scale(normal, -1.0);
        }
        GarmentSample { point: geom::add(body_point, geom::scale(nn, h)), normal, height: h, body_point }
    }

    /// Checker color in rest space, quantized to 8-bit steps.
    pub fn color(&self, face: usize, bary: [f64; 3]) -> Vec3<f64> {
        let f = self.template.faces[face];
        let rest = f.map(|v| self.template.vertices[v]);
        let p: Vec3<f64> = std::array::from_fn(|a| bary[0] * rest[0][a] + bary[1] * rest[1][a] + bary[2] * rest[2][a]);
        let cell = 0.1;
        let parity = p.iter().map(|c| (c / cell).floor() as i64).sum::<i64>().rem_euclid(2);
        let rgb: [u8; 3] = if parity == 0 { [200, 64, 40] } else { [232, 220, 196] };
        rgb.map(|c| f64::from(c) / 255.0)
    }
}

/// Area-uniform sampler over a triangle mesh.
pub struct AreaSampler {
    cumulative: Vec<f64>,
}

impl AreaSampler {
    pub fn new(vertices: &[Vec3<f64>], faces: &[[usize; 3]]) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::invalid("mesh has no faces"));
        }
        let mut total = 0.0;
        let mut cumulative = Vec::with_capacity(faces.len());
        for (f, face) in faces.iter().enumerate() {
            let [a, b, c] = face.map(|v| vertices[v]);
            let area = 0.5 * geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a)));
            if !(area > crate::body::MIN_FACE_AREA) {
                return Err(Error::DegenerateFace { face: f, area });
            }
            total += area;
            cumulative.push(total);
        }
        Ok(AreaSampler { cumulative })
    }

    pub fn total_area(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Face chosen with probability proportional to area, and uniform barycentrics.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, [f64; 3]) {
        let t = rng.random::<f64>() * self.total_area();
        let face = self.cumulative.partition_point(|&c| c <= t).min(self.cumulative.len() - 1);
        let r1 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        (face, [1.0 - r1, r1 * (1.0 - r2), r1 * r2])
    }
}

/// Clothed scan of `pose`: `n` garment points sampled uniformly by body area.
pub fn synth_clothed_scan<T: Real>(
    template: &BodyTemplate<f64>,
    pose: &Pose<f64>,
    clothing: &ClothingConfig,
    n: usize,
    seed: u64,
) -> Result<Scan<T>> {
    if n == 0 {
        return Err(Error::invalid("a scan needs at least one point"));
    }
    let garment = Garment::new(template, pose, clothing)?;
    let sampler = AreaSampler::new(garment.posed_vertices(), &template.faces)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scan = Scan {
        points: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        colors: Some(Vec::with_capacity(n)),
        frame: String::new(),
        pose_index: None,
    };
    for _ in 0..n {
        let (face, bary) = sampler.draw(&mut rng);
        let s = garment.sample(face, bary);
        scan.points.push(geom::cast3(s.point));
        scan.normals.push(geom::cast3(s.normal));
        scan.colors.as_mut().unwrap().push(geom::cast3(garment.color(face, bary)));
    }
    Ok(scan)
}
