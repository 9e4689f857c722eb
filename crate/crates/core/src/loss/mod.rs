//! Chamfer, normal, residual and color losses, in plain form and recorded on a tape.
//!
//! Matching is nearest-point: each predicted point is paired with its nearest
//! target (one search shared by the Chamfer, normal and color terms), and each
//! target with its nearest prediction. Matches are constants for backward.

mod nn;

pub use nn::{nearest_neighbor, NnIndex};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::Real;
use crate::tensor::{Tape, Var};

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub chamfer: f64,
    pub normal: f64,
    pub residual: f64,
    pub color: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.chamfer, self.normal, self.residual, self.color];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss values; absent heads are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<T> {
    pub chamfer: T,
    pub normal: Option<T>,
    pub residual: T,
    pub color: Option<T>,
}

impl<T: Real> LossParts<T> {
    /// Each term multiplied by its weight, absent heads contributing zero:
    /// `(chamfer, normal, residual, color)`.
    pub fn weighted(&self, w: &LossWeights) -> [T; 4] {
        [
            T::lit(w.chamfer) * self.chamfer,
            T::lit(w.normal) * self.normal.unwrap_or_else(T::zero),
            T::lit(w.residual) * self.residual,
            T::lit(w.color) * self.color.unwrap_or_else(T::zero),
        ]
    }
}

pub fn total_loss<T: Real>(parts: &LossParts<T>, weights: &LossWeights) -> T {
    parts.weighted(weights).into_iter().fold(T::zero(), |a, b| a + b)
}

fn nonempty<T>(points: &[T], what: &str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid(format!("{what} point set is empty")));
    }
    Ok(())
}

fn mean<T: Real>(values: impl Iterator<Item = T>, n: usize) -> T {
    values.fold(T::zero(), |a, b| a + b) / T::from_usize(n).unwrap()
}

/// Symmetric Chamfer distance: mean squared nearest distance X->Y plus Y->X.
pub fn chamfer<T: Real>(x: &[Vec3<T>], y: &[Vec3<T>]) -> Result<T> {
    nonempty(x, "predicted")?;
    nonempty(y, "target")?;
    let (_, dxy) = NnIndex::build(y)?.nearest_all(x);
    let (_, dyx) = NnIndex::build(x)?.nearest_all(y);
    Ok(mean(dxy.into_iter(), x.len()) + mean(dyx.into_iter(), y.len()))
}

fn l1<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Mean L1 difference between attributes of each predicted point and its
/// nearest target point.
fn matched_l1<T: Real>(x: &[Vec3<T>], ax: &[Vec3<T>], y: &[Vec3<T>], ay: &[Vec3<T>], what: &str) -> Result<T> {
    nonempty(x, "predicted")?;
    nonempty(y, "target")?;
    if ax.len() != x.len() || ay.len() != y.len() {
        return Err(Error::dim(format!("{what}: attribute count differs from point count")));
    }
    let (idx, _) = NnIndex::build(y)?.nearest_all(x);
    Ok(mean(idx.iter().zip(ax).map(|(&j, a)| l1(a, &ay[j])), x.len()))
}

pub fn normal_loss<T: Real>(x: &[Vec3<T>], nx: &[Vec3<T>], y: &[Vec3<T>], ny: &[Vec3<T>]) -> Result<T> {
    matched_l1(x, nx, y, ny, "normal loss")
}

pub fn color_loss<T: Real>(x: &[Vec3<T>], cx: &[Vec3<T>], y: &[Vec3<T>], cy: &[Vec3<T>]) -> Result<T> {
    matched_l1(x, cx, y, cy, "color loss")
}

/// Mean squared residual norm.
pub fn residual_reg<T: Real>(r: &[Vec3<T>]) -> T {
    if r.is_empty() {
        return T::zero();
    }
    mean(r.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]), r.len())
}

/// Target data of one frame, with a prebuilt index over its points.
pub struct Target<'a, T> {
    pub points: &'a [Vec3<T>],
    pub normals: Option<&'a [Vec3<T>]>,
    pub colors: Option<&'a [Vec3<T>]>,
    pub index: &'a NnIndex<T>,
}

/// Predicted quantities of one frame as tape variables (`[n, 3]` each).
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub points: Var,
    pub normals: Option<Var>,
    pub colors: Option<Var>,
    pub residuals: Var,
}

/// Unweighted per-frame loss terms as scalar tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub chamfer: Var,
    pub normal: Option<Var>,
    pub residual: Var,
    pub color: Option<Var>,
}

impl LossVars {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts<T> {
        let v = |x: Var| tape.value(x).data()[0];
        LossParts {
            chamfer: v(self.chamfer),
            normal: self.normal.map(v),
            residual: v(self.residual),
            color: self.color.map(v),
        }
    }
}

fn rows3<T: Real>(t: &crate::tensor::Tensor<T>) -> Vec<Vec3<T>> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn gather_flat<T: Real>(src: &[Vec3<T>], idx: &[usize]) -> Arc<Vec<T>> {
    Arc::new(idx.iter().flat_map(|&j| src[j]).collect())
}

/// Records one frame's losses. Heads missing from either side are skipped.
pub fn record_frame_losses<T: Real>(tape: &mut Tape<T>, pred: &PredictionVars, target: &Target<'_, T>) -> Result<LossVars> {
    nonempty(target.points, "target")?;
    let x = rows3(tape.value(pred.points));
    nonempty(&x, "predicted")?;
    let (n, m) = (T::from_usize(x.len()).unwrap(), T::from_usize(target.points.len()).unwrap());

    let (xy, _) = target.index.nearest_all(&x);
    let (yx, _) = NnIndex::build(&x)?.nearest_all(target.points);

    let to_y = tape.sq_dist_const(pred.points, gather_flat(target.points, &xy))?;
    let gathered = tape.gather_rows(pred.points, Arc::new(yx))?;
    let y_flat = Arc::new(target.points.iter().flatten().copied().collect());
    let to_x = tape.sq_dist_const(gathered, y_flat)?;
    let chamfer = tape.weighted_sum(&[(to_y, T::one() / n), (to_x, T::one() / m)])?;

    let mut matched = |v: Option<Var>, attr: Option<&[Vec3<T>]>| -> Result<Option<Var>> {
        match (v, attr) {
            (Some(v), Some(a)) => {
                let s = tape.l1_dist_const(v, gather_flat(a, &xy))?;
                Ok(Some(tape.scale(s, T::one() / n)))
            }
            _ => Ok(None),
        }
    };
    let normal = matched(pred.normals, target.normals)?;
    let color = matched(pred.colors, target.colors)?;

    let r = tape.sum_sq(pred.residuals);
    let rn = T::from_usize(tape.value(pred.residuals).len() / 3).unwrap();
    let residual = tape.scale(r, T::one() / rn);
    Ok(LossVars { chamfer, normal, residual, color })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut impl Rng) -> Vec<Vec3<f64>> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
    }

    fn nearest(q: &Vec3<f64>, t: &[Vec3<f64>]) -> usize {
        let d = |p: &Vec3<f64>| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
        (0..t.len()).fold(0, |b, i| if d(&t[i]) < d(&t[b]) { i } else { b })
    }

    #[test]
    fn chamfer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = cloud(30, &mut rng);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert_eq!(chamfer(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer::<f64>(&[], &x).is_err());

        let (x, y) = (cloud(50, &mut rng), cloud(80, &mut rng));
        let d = |a: &Vec3<f64>, b: &Vec3<f64>| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let oracle = x.iter().map(|a| y.iter().map(|b| d(a, b)).fold(f64::INFINITY, f64::min)).sum::<f64>() / 50.0
            + y.iter().map(|b| x.iter().map(|a| d(a, b)).fold(f64::INFINITY, f64::min)).sum::<f64>() / 80.0;
        assert!((chamfer(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn normal_and_color_cases() {
        let p = vec![[0.0, 0.0, 0.0]];
        assert_eq!(normal_loss(&p, &[[1.0, 0.0, 0.0]], &p, &[[-1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(normal_loss(&p, &[[1.0, 0.0, 0.0]], &p, &[[1.0, 0.0, 0.0]]).unwrap(), 0.0);
        assert_eq!(color_loss(&p, &[[1.0, 1.0, 1.0]], &p, &[[0.0, 0.0, 0.0]]).unwrap(), 3.0);
        assert!(normal_loss(&p, &[], &p, &p).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y, nx, ny) = (cloud(40, &mut rng), cloud(60, &mut rng), cloud(40, &mut rng), cloud(60, &mut rng));
        let oracle: f64 = x
            .iter()
            .zip(&nx)
            .map(|(q, a)| {
                let b = ny[nearest(q, &y)];
                (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>()
            })
            .sum::<f64>()
            / 40.0;
        assert!((normal_loss(&x, &nx, &y, &ny).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn residual_and_total() {
        assert_eq!(residual_reg(&[[0.0f64; 3]; 4]), 0.0);
        assert_eq!(residual_reg(&[[1.0f64, 0.0, 0.0]; 5]), 1.0);
        let parts = LossParts { chamfer: 0.5f64, normal: Some(0.25), residual: 0.125, color: None };
        let zero = LossWeights { chamfer: 0.0, normal: 0.0, residual: 0.0, color: 0.0 };
        assert_eq!(total_loss(&parts, &zero), 0.0);
        let w = LossWeights { chamfer: 2e4, normal: 0.0, residual: 2e3, color: 0.0 };
        assert_eq!(total_loss(&parts, &w), 2e4 * 0.5 + 2e3 * 0.125);
        assert!(LossWeights { chamfer: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn tape_losses_match_plain_values_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, y, nx, ny) = (cloud(25, &mut rng), cloud(35, &mut rng), cloud(25, &mut rng), cloud(35, &mut rng));
        let index = NnIndex::build(&y).unwrap();
        let target = Target { points: &y, normals: Some(&ny), colors: None, index: &index };
        let flat = |v: &[Vec3<f64>]| Tensor::new([v.len(), 3], v.iter().flatten().copied().collect()).unwrap();
        let mut tape = Tape::new();
        let px = tape.leaf(flat(&x), true);
        let pn = tape.leaf(flat(&nx), true);
        let pred = PredictionVars { points: px, normals: Some(pn), colors: None, residuals: px };
        let l = record_frame_losses(&mut tape, &pred, &target).unwrap();
        let vals = l.values(&tape);
        assert!((vals.chamfer - chamfer(&x, &y).unwrap()).abs() < 1e-12);
        assert!((vals.normal.unwrap() - normal_loss(&x, &nx, &y, &ny).unwrap()).abs() < 1e-12);
        assert!(vals.color.is_none());
        assert!((vals.residual - residual_reg(&x)).abs() < 1e-12);

        // d chamfer / dx with frozen matches
        let g = tape.backward(l.chamfer).unwrap();
        let gx = g.get(px).unwrap();
        for (i, q) in x.iter().enumerate() {
            let j = nearest(q, &y);
            let mut want = [0.0; 3];
            for a in 0..3 {
                want[a] += 2.0 * (q[a] - y[j][a]) / 25.0;
            }
            for p in &y {
                if nearest(p, &x) == i {
                    for a in 0..3 {
                        want[a] += 2.0 * (q[a] - p[a]) / 35.0;
                    }
                }
            }
            for a in 0..3 {
                assert!((gx.data()[i * 3 + a] - want[a]).abs() < 1e-12);
            }
        }
    }
}
