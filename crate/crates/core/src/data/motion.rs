//! Built-in procedural motion: smooth per-joint swings with a random root
//! heading and placement per sequence.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::{BodyTemplate, Pose};
use crate::error::{Error, Result};
use crate::geom::{self, Mat3};
use crate::seed::{derive_rng, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// Multiplies every joint's swing range.
    pub amplitude: f64,
    /// Random heading about the vertical axis per sequence.
    pub random_heading: bool,
    /// Half-width (m) of the random horizontal root placement.
    pub translation_range: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            sequences: 13,
            frames_per_sequence: 20,
            amplitude: 1.0,
            random_heading: true,
            translation_range: 0.5,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::invalid("motion.sequences and motion.frames_per_sequence must be positive"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) || !(self.translation_range >= 0.0 && self.translation_range.is_finite()) {
            return Err(Error::invalid("motion.amplitude and motion.translation_range must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Swing of one named joint: rotation axes with (center, half-range) angles.
fn joint_dofs(name: &str) -> &'static [([f64; 3], f64, f64)] {
    match name {
        "spine" => &[([0.0, 1.0, 0.0], 0.0, 0.35), ([1.0, 0.0, 0.0], 0.1, 0.2)],
        "neck" => &[([0.0, 1.0, 0.0], 0.0, 0.5), ([1.0, 0.0, 0.0], 0.0, 0.25)],
        "l_shoulder" => &[([0.0, 0.0, 1.0], -0.6, 0.6), ([0.0, 1.0, 0.0], 0.0, 0.5)],
        "r_shoulder" => &[([0.0, 0.0, 1.0], 0.6, 0.6), ([0.0, 1.0, 0.0], 0.0, 0.5)],
        "l_elbow" => &[([0.0, 1.0, 0.0], -0.9, 0.9)],
        "r_elbow" => &[([0.0, 1.0, 0.0], 0.9, 0.9)],
        "l_hip" | "r_hip" => &[([1.0, 0.0, 0.0], -0.2, 0.5), ([0.0, 0.0, 1.0], 0.0, 0.12)],
        "l_knee" | "r_knee" => &[([1.0, 0.0, 0.0], 0.6, 0.6)],
        _ => &[],
    }
}

/// One pose sequence per `config.sequences`, frames evenly spaced over one
/// motion cycle. Joints are recognized by name; unknown joints stay at rest.
pub fn generate_motion(config: &MotionConfig, template: &BodyTemplate<f64>, seed: u64) -> Result<Vec<Vec<Pose<f64>>>> {
    config.validate()?;
    let joints = template.joint_count();
    let mut out = Vec::with_capacity(config.sequences);
    for s in 0..config.sequences {
        let mut rng = derive_rng(seed, stream::MOTION, s as u64);
        // (frequency in cycles per sequence, phase) per joint dof
        let waves: Vec<Vec<(f64, f64, f64)>> = template
            .joint_names
            .iter()
            .map(|name| {
                joint_dofs(name)
                    .iter()
                    .map(|_| (rng.random_range(1..=2) as f64, rng.random_range(0.0..TAU), rng.random_range(0.5..1.0)))
                    .collect()
            })
            .collect();
        let heading = if config.random_heading { rng.random_range(-PI..PI) } else { 0.0 };
        let tr = config.translation_range;
        let (dx, dz) = if tr > 0.0 { (rng.random_range(-tr..=tr), rng.random_range(-tr..=tr)) } else { (0.0, 0.0) };
        let turn = rng.random_range(-0.4..0.4);

        let n = config.frames_per_sequence;
        let frames = (0..n)
            .map(|f| {
                let t = f as f64 / n as f64;
                let joint_rotations = (0..joints)
                    .map(|j| {
                        let dofs = joint_dofs(&template.joint_names[j]);
                        dofs.iter().zip(&waves[j]).fold(geom::identity::<f64>(), |acc: Mat3<f64>, (&(axis, c, a), &(freq, phase, gain))| {
                            let angle = config.amplitude * (c + a * gain * (TAU * freq * t + phase).sin());
                            geom::mat_mul(&acc, &geom::axis_angle(axis, angle))
                        })
                    })
                    .collect();
                Pose {
                    joint_rotations,
                    root_rotation: geom::axis_angle([0.0, 1.0, 0.0], heading + turn * t),
                    root_translation: [dx, 0.0, dz],
                }
            })
            .collect();
        out.push(frames);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{make_procedural_body, BodyConfig};

    #[test]
    fn motion_is_seeded_and_valid() {
        let tpl = make_procedural_body::<f64>(&BodyConfig::default(), 0).unwrap();
        let cfg = MotionConfig { sequences: 3, frames_per_sequence: 5, ..MotionConfig::default() };
        let a = generate_motion(&cfg, &tpl, 11).unwrap();
        assert_eq!(a, generate_motion(&cfg, &tpl, 11).unwrap());
        assert_ne!(a, generate_motion(&cfg, &tpl, 12).unwrap());
        assert_eq!((a.len(), a[0].len()), (3, 5));
        for p in a.iter().flatten() {
            p.validate(tpl.joint_count()).unwrap();
        }
        assert_ne!(a[0][0].joint_rotations, a[0][1].joint_rotations);
        assert!(generate_motion(&MotionConfig { sequences: 0, ..cfg }, &tpl, 0).is_err());
    }
}
