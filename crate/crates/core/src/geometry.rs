//! Spot coordinates, off-grid pseudo-spot placement, neighbor lists and the
//! distance bias fed to attention.
//!
//! All distances here are measured in grid units: one unit is the spacing
//! between adjacent original spots, so slides scanned at different
//! magnifications share one bias scale.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result, Violation};
use crate::numerics::{Mask, Matrix, NeighborTable};

/// `(row, col)` in grid units, or `(x, y)` in pixels for physical positions.
pub type Point = [f64; 2];

#[inline]
fn dist_sq(a: Point, b: Point) -> f64 {
    let (dr, dc) = (a[0] - b[0], a[1] - b[1]);
    dr * dr + dc * dc
}

#[inline]
pub fn grid_distance(a: Point, b: Point) -> f64 {
    dist_sq(a, b).sqrt()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpotCoords {
    pub grid: Vec<Point>,
    pub phys: Vec<Point>,
    pub is_pseudo: Vec<bool>,
}

impl SpotCoords {
    pub fn new(grid: Vec<Point>, phys: Vec<Point>, is_pseudo: Vec<bool>) -> Self {
        Self {
            grid,
            phys,
            is_pseudo,
        }
    }

    /// Original spots with identical grid and physical positions.
    pub fn originals_at(grid: Vec<Point>) -> Self {
        let n = grid.len();
        Self {
            phys: grid.clone(),
            grid,
            is_pseudo: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn n_original(&self) -> usize {
        self.is_pseudo.iter().filter(|p| !**p).count()
    }

    pub fn n_pseudo(&self) -> usize {
        self.is_pseudo.iter().filter(|p| **p).count()
    }

    /// The subset of spots with `is_pseudo == false`, in order.
    pub fn originals(&self) -> SpotCoords {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !self.is_pseudo[i]).collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> SpotCoords {
        SpotCoords {
            grid: indices.iter().map(|&i| self.grid[i]).collect(),
            phys: indices.iter().map(|&i| self.phys[i]).collect(),
            is_pseudo: indices.iter().map(|&i| self.is_pseudo[i]).collect(),
        }
    }

    /// First `n` spots.
    pub fn prefix(&self, n: usize) -> SpotCoords {
        SpotCoords {
            grid: self.grid[..n].to_vec(),
            phys: self.phys[..n].to_vec(),
            is_pseudo: self.is_pseudo[..n].to_vec(),
        }
    }

    pub fn extend(&mut self, other: &SpotCoords) {
        self.grid.extend_from_slice(&other.grid);
        self.phys.extend_from_slice(&other.phys);
        self.is_pseudo.extend_from_slice(&other.is_pseudo);
    }

    /// Every broken coordinate invariant.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.grid.len() != self.phys.len() || self.grid.len() != self.is_pseudo.len() {
            out.push(Violation::CoordLength {
                grid: self.grid.len(),
                phys: self.phys.len(),
                flags: self.is_pseudo.len(),
            });
            return out;
        }
        for (section, points) in [("grid", &self.grid), ("phys", &self.phys)] {
            for (i, p) in points.iter().enumerate() {
                for (c, v) in p.iter().enumerate() {
                    if !v.is_finite() {
                        out.push(Violation::NonFinite {
                            section,
                            row: i,
                            col: c,
                        });
                    }
                }
            }
        }
        for (i, g) in self.grid.iter().enumerate() {
            if !self.is_pseudo[i]
                && (g[0].fract() != 0.0 || g[1].fract() != 0.0)
                && g.iter().all(|v| v.is_finite())
            {
                out.push(Violation::NonIntegerOriginal {
                    index: i,
                    row: g[0],
                    col: g[1],
                });
            }
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ga, gb) = (self.grid[a], self.grid[b]);
            ga[0]
                .total_cmp(&gb[0])
                .then(ga[1].total_cmp(&gb[1]))
                .then(a.cmp(&b))
        });
        for w in order.windows(2) {
            if self.grid[w[0]] == self.grid[w[1]] {
                out.push(Violation::DuplicateGrid {
                    first: w[0].min(w[1]),
                    second: w[0].max(w[1]),
                });
            }
        }
        out
    }
}

/// Grid `(row, col)` → physical `(x, y)`: `phys = linear · grid + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 2]; 2],
    pub offset: [f64; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            offset: [0.0, 0.0],
        }
    }

    pub fn apply(&self, g: Point) -> Point {
        let l = &self.linear;
        [
            l[0][0] * g[0] + l[0][1] * g[1] + self.offset[0],
            l[1][0] * g[0] + l[1][1] * g[1] + self.offset[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.linear[0][0] * self.linear[1][1] - self.linear[0][1] * self.linear[1][0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub transform: AffineTransform,
    /// Largest Euclidean residual over the fitted points, in physical units.
    pub max_residual: f64,
}

/// Least-squares affine map from grid to physical coordinates.
pub fn fit_affine(grid: &[Point], phys: &[Point]) -> Result<AffineFit> {
    if grid.len() != phys.len() {
        return Err(Error::shape("fit_affine", (grid.len(), 2), (phys.len(), 2)));
    }
    if grid.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} points cannot determine an affine map",
            grid.len()
        )));
    }
    let n = grid.len() as f64;
    let mean = |pts: &[Point]| {
        let s = pts
            .iter()
            .fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (gm, pm) = (mean(grid), mean(phys));

    // scatter = Σ g̃ g̃ᵀ, cross = Σ p̃ g̃ᵀ
    let mut scatter = [[0.0; 2]; 2];
    let mut cross = [[0.0; 2]; 2];
    for (g, p) in grid.iter().zip(phys) {
        let gc = [g[0] - gm[0], g[1] - gm[1]];
        let pc = [p[0] - pm[0], p[1] - pm[1]];
        for a in 0..2 {
            for b in 0..2 {
                scatter[a][b] += gc[a] * gc[b];
                cross[a][b] += pc[a] * gc[b];
            }
        }
    }
    let det = scatter[0][0] * scatter[1][1] - scatter[0][1] * scatter[1][0];
    let trace = scatter[0][0] + scatter[1][1];
    if trace <= 0.0 || det <= 1e-12 * trace * trace {
        return Err(Error::RankDeficient(
            "grid points are collinear or coincident".into(),
        ));
    }
    let inv = [
        [scatter[1][1] / det, -scatter[0][1] / det],
        [-scatter[1][0] / det, scatter[0][0] / det],
    ];
    let mut linear = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            linear[a][b] = cross[a][0] * inv[0][b] + cross[a][1] * inv[1][b];
        }
    }
    let offset = [
        pm[0] - linear[0][0] * gm[0] - linear[0][1] * gm[1],
        pm[1] - linear[1][0] * gm[0] - linear[1][1] * gm[1],
    ];
    let transform = AffineTransform { linear, offset };
    if transform.det().abs() <= 1e-9 {
        return Err(Error::RankDeficient(format!(
            "fitted linear part is singular (det {})",
            transform.det()
        )));
    }
    let max_residual = grid
        .iter()
        .zip(phys)
        .map(|(g, p)| grid_distance(transform.apply(*g), *p))
        .fold(0.0, f64::max);
    Ok(AffineFit {
        transform,
        max_residual,
    })
}

/// Half-integer lattice points inside the bounding box of the original grid
/// coordinates, excluding integer points. Row-major order.
pub fn gen_pseudo_candidates(coords: &SpotCoords) -> Vec<Point> {
    let originals: Vec<Point> = coords
        .grid
        .iter()
        .zip(&coords.is_pseudo)
        .filter(|(_, p)| !**p)
        .map(|(g, _)| *g)
        .collect();
    if originals.is_empty() {
        return Vec::new();
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for g in &originals {
        for a in 0..2 {
            lo[a] = lo[a].min(g[a]);
            hi[a] = hi[a].max(g[a]);
        }
    }
    let occupied: HashSet<(u64, u64)> = originals
        .iter()
        .map(|g| (g[0].to_bits(), g[1].to_bits()))
        .collect();
    // Work in doubled coordinates so the lattice is integral.
    let (r0, r1) = ((2.0 * lo[0]).ceil() as i64, (2.0 * hi[0]).floor() as i64);
    let (c0, c1) = ((2.0 * lo[1]).ceil() as i64, (2.0 * hi[1]).floor() as i64);
    let mut out = Vec::new();
    for r2 in r0..=r1 {
        for c2 in c0..=c1 {
            if r2 % 2 == 0 && c2 % 2 == 0 {
                continue;
            }
            let p = [r2 as f64 / 2.0, c2 as f64 / 2.0];
            if !occupied.contains(&(p[0].to_bits(), p[1].to_bits())) {
                out.push(p);
            }
        }
    }
    out
}

fn nearest_distance(p: Point, pool: &[Point], skip: Option<usize>) -> f64 {
    pool.iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, q)| dist_sq(p, *q))
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Mean grid distance from each original spot to its nearest other original.
pub fn avg_nn_distance(coords: &SpotCoords) -> Result<f64> {
    let originals = coords.originals().grid;
    if originals.len() < 2 {
        return Err(Error::InsufficientSpots {
            found: originals.len(),
        });
    }
    let total: f64 = (0..originals.len())
        .map(|i| nearest_distance(originals[i], &originals, Some(i)))
        .sum();
    Ok(total / originals.len() as f64)
}

/// Keeps candidates within `threshold` grid units of some original spot and
/// returns them as pseudo-spots with physical positions from `transform`.
pub fn filter_pseudo(
    candidates: &[Point],
    coords: &SpotCoords,
    threshold: f64,
    transform: &AffineTransform,
) -> Result<SpotCoords> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "pseudo-spot threshold must be > 0, got {threshold}"
        )));
    }
    let originals = coords.originals().grid;
    let grid: Vec<Point> = candidates
        .iter()
        .copied()
        .filter(|c| nearest_distance(*c, &originals, None) <= threshold)
        .collect();
    let n = grid.len();
    Ok(SpotCoords {
        phys: grid.iter().map(|g| transform.apply(*g)).collect(),
        grid,
        is_pseudo: vec![true; n],
    })
}

#[derive(Debug, Clone)]
pub struct OffGridSampling {
    pub fit: AffineFit,
    pub threshold: f64,
    pub candidates: usize,
    pub pseudo: SpotCoords,
}

/// The full off-grid procedure on the original spots of `coords`: fit the
/// grid→pixel map, enumerate candidates, derive the distance threshold from
/// the mean nearest-neighbor spacing, and filter.
pub fn off_grid_sampling(coords: &SpotCoords) -> Result<OffGridSampling> {
    let originals = coords.originals();
    let fit = fit_affine(&originals.grid, &originals.phys)?;
    let candidates = gen_pseudo_candidates(&originals);
    let threshold = avg_nn_distance(&originals)?;
    let pseudo = filter_pseudo(&candidates, &originals, threshold, &fit.transform)?;
    Ok(OffGridSampling {
        fit,
        threshold,
        candidates: candidates.len(),
        pseudo,
    })
}

/// Per-query neighbor lists, nearest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn n_queries(&self) -> usize {
        self.neighbors.len()
    }

    pub fn to_table(&self) -> Arc<NeighborTable> {
        Arc::new(NeighborTable {
            width: self.k,
            indices: self.neighbors.iter().flatten().copied().collect(),
        })
    }

    /// Dense boolean form: row `i` unmasks exactly its `k` neighbors.
    pub fn to_mask(&self, n_keys: usize) -> Mask {
        Mask::from_neighbor_lists(&self.neighbors, n_keys)
    }
}

/// The `k` nearest keys of every query by grid distance, ties broken by
/// ascending key index. With `exclude_self`, query `i` and key `i` are the
/// same spot and that key is skipped.
pub fn knn_indices(
    query: &[Point],
    keys: &[Point],
    k: usize,
    exclude_self: bool,
) -> Result<KnnGraph> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let available = if exclude_self {
        keys.len().saturating_sub(1)
    } else {
        keys.len()
    };
    if k > available {
        return Err(Error::Capacity { k, available });
    }
    let mut neighbors = Vec::with_capacity(query.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(keys.len());
    for (i, q) in query.iter().enumerate() {
        scratch.clear();
        scratch.extend(
            keys.iter()
                .enumerate()
                .filter(|(j, _)| !(exclude_self && *j == i))
                .map(|(j, key)| (dist_sq(*q, *key), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(cmp);
        neighbors.push(scratch.iter().map(|&(_, j)| j).collect());
    }
    Ok(KnnGraph { k, neighbors })
}

fn check_slope(slope: f64) -> Result<()> {
    if slope < 0.0 && slope.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "bias slope must be finite and negative, got {slope}"
        )))
    }
}

/// `B[i, j] = slope · ‖query_i − key_j‖` on grid coordinates.
pub fn bias_matrix(query: &[Point], keys: &[Point], slope: f64) -> Result<Matrix> {
    check_slope(slope)?;
    let mut b = Matrix::zeros(query.len(), keys.len());
    for (i, q) in query.iter().enumerate() {
        for (j, key) in keys.iter().enumerate() {
            b.set(i, j, slope * grid_distance(*q, *key));
        }
    }
    Ok(b)
}

/// Bias restricted to a neighbor graph: `B[i, j] = slope · ‖p_i − p_{nbr(i, j)}‖`.
pub fn neighbor_bias(
    query: &[Point],
    keys: &[Point],
    graph: &KnnGraph,
    slope: f64,
) -> Result<Matrix> {
    check_slope(slope)?;
    let mut b = Matrix::zeros(graph.n_queries(), graph.k);
    for (i, list) in graph.neighbors.iter().enumerate() {
        for (j, &n) in list.iter().enumerate() {
            b.set(i, j, slope * grid_distance(query[i], keys[n]));
        }
    }
    Ok(b)
}
