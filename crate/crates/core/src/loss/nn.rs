//! Exact nearest-neighbor search on a uniform grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::Real;

/// Grid cells allowed per indexed point before the cell size is enlarged.
const MAX_CELLS_PER_POINT: usize = 32;

/// Uniform grid over a fixed target set, bucketed in CSR form.
///
/// Cell size defaults to `diag / ceil(sqrt(N) / 2)`, which keeps a handful of
/// points per occupied cell for surface-like data; [`NnIndex::with_cell_size`] accepts any
/// other choice. Queries expand ring by ring until no unvisited cell can hold
/// a closer point, so results are exact for every cell size.
#[derive(Clone, Debug)]
pub struct NnIndex<T> {
    points: Vec<Vec3<T>>,
    lo: Vec3<T>,
    cell: T,
    dims: [usize; 3],
    /// Absolute shrink of the pruning bound covering rounding in cell edges.
    margin: T,
    /// `cell_start[c]..cell_start[c + 1]` indexes `order` for cell `c`.
    cell_start: Vec<u32>,
    order: Vec<u32>,
    /// `points` permuted into bucket order for contiguous scans.
    sorted: Vec<Vec3<T>>,
}

impl<T: Real> NnIndex<T> {
    pub fn build(points: &[Vec3<T>]) -> Result<Self> {
        let (lo, hi) = bounds(points)?;
        let diag = (0..3).map(|a| (hi[a] - lo[a]) * (hi[a] - lo[a])).fold(T::zero(), |s, x| s + x).sqrt();
        let per_diag = (0.5 * (points.len() as f64).sqrt()).ceil().max(1.0);
        Self::with_cell_size(points, diag / T::lit(per_diag))
    }

    /// Index with a requested cell edge length (enlarged if the grid would be huge).
    pub fn with_cell_size(points: &[Vec3<T>], cell: T) -> Result<Self> {
        let (lo, hi) = bounds(points)?;
        if !(cell > T::zero()) || !cell.is_finite() {
            // all points coincide (or a bad request): a single cell holds everything
            return Ok(Self::assemble(points, lo, T::one(), [1, 1, 1]));
        }
        let mut cell = cell;
        let max_cells = MAX_CELLS_PER_POINT * points.len() + 1024;
        loop {
            let dims = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor().to_usize().unwrap_or(usize::MAX / 4) + 1).max(1));
            let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            match total {
                Some(t) if t <= max_cells => return Ok(Self::assemble(points, lo, cell, dims)),
                _ => cell = cell * T::lit(1.5),
            }
        }
    }

    fn assemble(points: &[Vec3<T>], lo: Vec3<T>, cell: T, dims: [usize; 3]) -> Self {
        let mut idx = NnIndex {
            points: points.to_vec(),
            lo,
            cell,
            dims,
            margin: T::zero(),
            cell_start: Vec::new(),
            order: Vec::new(),
            sorted: Vec::new(),
        };
        let ncells = dims[0] * dims[1] * dims[2];
        let cells: Vec<usize> = points.iter().map(|p| idx.flat(idx.cell_of(p))).collect();
        let mut start = vec![0u32; ncells + 1];
        for &c in &cells {
            start[c + 1] += 1;
        }
        for c in 0..ncells {
            start[c + 1] += start[c];
        }
        let mut fill = start.clone();
        let mut order = vec![0u32; points.len()];
        // ascending point order inside each bucket
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        idx.sorted = order.iter().map(|&i| points[i as usize]).collect();
        idx.cell_start = start;
        idx.order = order;
        let extent = (0..3).fold(T::zero(), |m, a| m.max(lo[a].abs() + cell * T::from_usize(dims[a]).unwrap()));
        idx.margin = T::epsilon() * T::lit(64.0) * extent;
        idx
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    pub fn cell_size(&self) -> T {
        self.cell
    }

    /// Cell coordinates of `p`, clamped into the grid.
    fn cell_of(&self, p: &Vec3<T>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let f = ((p[a] - self.lo[a]) / self.cell).floor();
            if f.is_nan() || f < T::zero() {
                0
            } else {
                f.to_usize().unwrap_or(usize::MAX).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Exact nearest target and its squared distance; ties go to the lower index.
    pub fn nearest(&self, q: &Vec3<T>) -> (usize, T) {
        let c = self.cell_of(q);
        let mut best = (usize::MAX, T::infinity());
        let off = self.offsets(q, c);
        let max_ring = self.dims.iter().copied().max().unwrap();
        for ring in 0..=max_ring {
            self.scan_ring(q, c, &off, ring, &mut best);
            if self.ring_settles(q, c, ring, best.1) {
                break;
            }
        }
        best
    }

    fn scan_ring(&self, q: &Vec3<T>, c: [usize; 3], off: &Vec3<T>, ring: usize, best: &mut (usize, T)) {
        if ring == 0 {
            self.scan_run(self.flat(c), self.flat(c), q, best);
            return;
        }
        let r = ring as isize;
        let range = |a: usize| (c[a].saturating_sub(ring), (c[a] + ring).min(self.dims[a] - 1));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let gx = self.gap(off, c, 0, x);
            if gx > best.1 {
                continue;
            }
            let x_shell = (x as isize - c[0] as isize).abs() == r;
            for y in y0..=y1 {
                let gxy = gx + self.gap(off, c, 1, y);
                if gxy > best.1 {
                    continue;
                }
                let row = (x * self.dims[1] + y) * self.dims[2];
                if x_shell || (y as isize - c[1] as isize).abs() == r {
                    // the whole z column is new and contiguous in bucket order;
                    // trim its ends to the slabs that can still beat `best`
                    let (mut lo, mut hi) = (z0, z1);
                    while lo < c[2] && gxy + self.gap(off, c, 2, lo) > best.1 {
                        lo += 1;
                    }
                    while hi > c[2] && gxy + self.gap(off, c, 2, hi) > best.1 {
                        hi -= 1;
                    }
                    self.scan_run(row + lo, row + hi, q, best);
                } else {
                    // inside the x/y square only the two z faces are new
                    for z in [c[2] as isize - r, c[2] as isize + r] {
                        if z >= 0 && (z as usize) < self.dims[2] && gxy + self.gap(off, c, 2, z as usize) <= best.1 {
                            self.scan_run(row + z as usize, row + z as usize, q, best);
                        }
                    }
                }
            }
        }
    }

    /// Position of `q` relative to the low corner of its cell `c`, per axis.
    #[inline]
    fn offsets(&self, q: &Vec3<T>, c: [usize; 3]) -> Vec3<T> {
        [0, 1, 2].map(|a| q[a] - (self.lo[a] + T::from_usize(c[a]).unwrap() * self.cell))
    }

    /// Squared lower bound on the axis-`a` distance from a query (at offset
    /// `off` inside cell `c`) to grid slab `i`, shrunk by the rounding margin.
    #[inline]
    fn gap(&self, off: &Vec3<T>, c: [usize; 3], a: usize, i: usize) -> T {
        let d = if i < c[a] {
            off[a] + T::lit((c[a] - 1 - i) as f64) * self.cell
        } else if i > c[a] {
            T::lit((i - c[a]) as f64) * self.cell - off[a]
        } else {
            return T::zero();
        };
        let d = (d - self.margin).max(T::zero());
        d * d
    }

    /// Scans the buckets of flat cells `first..=last`, which are contiguous.
    #[inline]
    fn scan_run(&self, first: usize, last: usize, q: &Vec3<T>, best: &mut (usize, T)) {
        let (s, e) = (self.cell_start[first] as usize, self.cell_start[last + 1] as usize);
        for (p, &i) in self.sorted[s..e].iter().zip(&self.order[s..e]) {
            let d = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
            let i = i as usize;
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        }
    }

    /// Whether every point outside the searched box is provably farther than `best`.
    fn ring_settles(&self, q: &Vec3<T>, c: [usize; 3], ring: usize, best: T) -> bool {
        let mut bound = T::infinity();
        for a in 0..3 {
            if c[a] > ring {
                let edge = self.lo[a] + T::from_usize(c[a] - ring).unwrap() * self.cell;
                bound = bound.min(q[a] - edge);
            }
            if c[a] + ring + 1 < self.dims[a] {
                let edge = self.lo[a] + T::from_usize(c[a] + ring + 1).unwrap() * self.cell;
                bound = bound.min(edge - q[a]);
            }
        }
        if bound == T::infinity() {
            return true;
        }
        let bound = bound - self.margin;
        bound > T::zero() && best < bound * bound
    }

    /// Nearest target for every query, in query order.
    pub fn nearest_all(&self, queries: &[Vec3<T>]) -> (Vec<usize>, Vec<T>) {
        // visiting queries cell by cell keeps the scanned buckets in cache
        let mut visit: Vec<(usize, u32)> = queries.iter().enumerate().map(|(i, q)| (self.flat(self.cell_of(q)), i as u32)).collect();
        visit.sort_unstable();
        let res: Vec<(usize, T)> = if queries.len() >= 4096 {
            visit.par_iter().with_min_len(1024).map(|&(_, i)| self.nearest(&queries[i as usize])).collect()
        } else {
            visit.iter().map(|&(_, i)| self.nearest(&queries[i as usize])).collect()
        };
        let mut idx = vec![0; queries.len()];
        let mut dist = vec![T::zero(); queries.len()];
        for (&(_, i), (j, d)) in visit.iter().zip(res) {
            idx[i as usize] = j;
            dist[i as usize] = d;
        }
        (idx, dist)
    }
}

fn bounds<T: Real>(points: &[Vec3<T>]) -> Result<(Vec3<T>, Vec3<T>)> {
    if points.is_empty() {
        return Err(Error::invalid("nearest-neighbor target set is empty"));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("nearest-neighbor target contains a non-finite point"));
        }
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    Ok((lo, hi))
}

/// One-shot query helper: builds an index over `targets`.
pub fn nearest_neighbor<T: Real>(queries: &[Vec3<T>], targets: &[Vec3<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    Ok(NnIndex::build(targets)?.nearest_all(queries))
}
