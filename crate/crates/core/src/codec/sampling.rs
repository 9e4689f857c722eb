//! Local parameter grids and area-proportional resampling.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::scalar::Real;

/// Side length of a perfect-square sample count.
pub fn grid_side(m: usize) -> Result<usize> {
    let s = (m as f64).sqrt().round() as usize;
    if m == 0 || s * s != m {
        return Err(Error::invalid(format!("patch sample count {m} is not a positive perfect square")));
    }
    Ok(s)
}

/// `sqrt(M) x sqrt(M)` lattice on the unit square including both endpoints,
/// row-major in `q` then `p`; `M = 1` gives the patch center.
pub fn sample_local_grid<T: Real>(m: usize) -> Result<Vec<[T; 2]>> {
    let s = grid_side(m)?;
    if s == 1 {
        return Ok(vec![[T::lit(0.5), T::lit(0.5)]]);
    }
    let step = 1.0 / (s - 1) as f64;
    Ok((0..s)
        .flat_map(|qi| (0..s).map(move |pi| [T::lit(pi as f64 * step), T::lit(qi as f64 * step)]))
        .collect())
}

/// Surface area of each patch, from the `2 (sqrt(M) - 1)^2` triangles of its
/// decoded lattice. `points` holds `M` consecutive lattice points per patch,
/// in [`sample_local_grid`] order.
pub fn lattice_areas<T: Real>(points: &[Vec3<T>], m: usize) -> Result<Vec<T>> {
    let s = grid_side(m)?;
    if points.len() % m != 0 {
        return Err(Error::dim(format!("{} points is not a multiple of {m}", points.len())));
    }
    let half = T::lit(0.5);
    let tri = |a: Vec3<T>, b: Vec3<T>, c: Vec3<T>| geom::norm(geom::cross(geom::sub(b, a), geom::sub(c, a))) * half;
    Ok(points
        .chunks_exact(m)
        .map(|patch| {
            let at = |pi: usize, qi: usize| patch[qi * s + pi];
            let mut area = T::zero();
            for qi in 0..s.saturating_sub(1) {
                for pi in 0..s - 1 {
                    let (a, b, c, d) = (at(pi, qi), at(pi + 1, qi), at(pi + 1, qi + 1), at(pi, qi + 1));
                    area += tri(a, b, c) + tri(a, c, d);
                }
            }
            area
        })
        .collect())
}

/// Points per patch for a target density (points per m^2): `max(1, round(rho * area))`.
pub fn patch_counts<T: Real>(areas: &[T], density: f64) -> Vec<usize> {
    areas
        .iter()
        .map(|a| ((density * a.to_f64_lossless()).round() as usize).max(1))
        .collect()
}

/// `n` stratified samples: `n` distinct cells of a `ceil(sqrt n)`-square grid,
/// chosen by a seeded permutation, with a uniform jitter inside each cell.
pub fn stratified_samples<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[T; 2]> {
    let g = (n as f64).sqrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..g * g).collect();
    cells.shuffle(rng);
    let inv = 1.0 / g as f64;
    cells[..n]
        .iter()
        .map(|&c| {
            let (qi, pi) = (c / g, c % g);
            let p = (pi as f64 + rng.random::<f64>()) * inv;
            let q = (qi as f64 + rng.random::<f64>()) * inv;
            [T::lit(p.min(1.0)), T::lit(q.min(1.0))]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_cases() {
        let g4 = sample_local_grid::<f64>(4).unwrap();
        assert_eq!(g4, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let g16 = sample_local_grid::<f64>(16).unwrap();
        assert_eq!(g16.len(), 16);
        assert!((g16[1][0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(sample_local_grid::<f64>(1).unwrap(), vec![[0.5, 0.5]]);
        assert!(sample_local_grid::<f64>(5).is_err());
        assert!(sample_local_grid::<f64>(0).is_err());
    }

    #[test]
    fn flat_unit_lattice_has_unit_area_and_counts_round() {
        let pts: Vec<Vec3<f64>> = sample_local_grid::<f64>(16).unwrap().iter().map(|p| [p[0], p[1], 0.0]).collect();
        let a = lattice_areas(&pts, 16).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert_eq!(patch_counts(&[0.5, 1e-6], 3.0), vec![2, 1]);
    }

    #[test]
    fn stratified_samples_are_distinct_cells_in_unit_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 2, 5, 9, 10] {
            let s = stratified_samples::<f64, _>(n, &mut rng);
            assert_eq!(s.len(), n);
            let g = (n as f64).sqrt().ceil();
            let mut cells: Vec<(usize, usize)> = s.iter().map(|p| ((p[0] * g) as usize, (p[1] * g) as usize)).collect();
            assert!(s.iter().all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])));
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), n);
        }
    }
}
