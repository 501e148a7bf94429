//! Synthetic slides with a known generating process.
//!
//! Each slide is a `grid_rows × grid_cols` lattice with a random fraction of
//! positions removed. Spots belong to one of two clusters laid out as
//! interleaved stripes `sin(ω(r cos θ + c sin θ) + φ) ≥ 0`, with stripe
//! period, angle and phase drawn per slide. Features are a cluster prototype
//! plus Gaussian noise, for originals and pseudo-spots alike. Targets for
//! each original spot are
//!
//! ```text
//! y = W₁ · mean(k nearest same-cluster spots) − s · W₂ · mean(k nearest other-cluster spots) + ε
//! ```
//!
//! where neighbors are drawn from all spots (pseudo-spots included, the spot
//! itself included when it qualifies) and ties break by index.

use serde::{Deserialize, Serialize};

use super::SlideRecord;
use crate::error::{Error, Result};
use crate::geometry::{grid_distance, off_grid_sampling, Point, SpotCoords};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training slides.
    pub n_slides: usize,
    /// Held-out slides, generated after the training slides.
    pub n_test: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dropout_rate: f64,
    pub d: usize,
    #[serde(rename = "G")]
    pub n_genes: usize,
    /// Feature noise around the cluster prototype.
    pub noise_std: f64,
    /// Additive noise on the targets.
    pub target_noise_std: f64,
    pub inhibition_strength: f64,
    /// Neighborhood size used by the target formula.
    pub neighbors: usize,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            n_slides: 4,
            n_test: 2,
            grid_rows: 12,
            grid_cols: 12,
            dropout_rate: 0.2,
            d: 32,
            n_genes: 8,
            noise_std: 0.5,
            target_noise_std: 0.05,
            inhibition_strength: 0.5,
            neighbors: 8,
            prototype_scale: 1.0,
            seed: 3927,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..0.5).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must be in [0, 0.5), got {}",
                self.dropout_rate
            ));
        }
        if self.grid_rows < 2 || self.grid_cols < 2 {
            return bad("grid needs at least 2 rows and 2 columns".into());
        }
        if self.d == 0 || self.n_genes == 0 || self.neighbors == 0 {
            return bad("d, G and neighbors must be positive".into());
        }
        if self.n_slides + self.n_test == 0 {
            return bad("no slides requested".into());
        }
        let kept = self.kept_spots();
        if kept < self.neighbors + 2 {
            return bad(format!(
                "only {kept} spots survive dropout; need at least neighbors + 2 = {}",
                self.neighbors + 2
            ));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("target_noise_std", self.target_noise_std),
            ("inhibition_strength", self.inhibition_strength),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    fn kept_spots(&self) -> usize {
        let n = self.grid_rows * self.grid_cols;
        n - (self.dropout_rate * n as f64).round() as usize
    }
}

/// Everything needed to regenerate targets from features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDescription {
    /// Two `d`-vectors.
    pub prototypes: Vec<Vec<f64>>,
    /// `G × d`, row-major.
    pub w_same: Vec<Vec<f64>>,
    /// `G × d`, row-major.
    pub w_other: Vec<Vec<f64>>,
    pub inhibition_strength: f64,
    pub neighbors: usize,
    /// Per slide (train then test), the cluster of every spot in row order.
    pub clusters: Vec<Vec<u8>>,
    /// Per slide: stripe period, angle and phase.
    pub stripes: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<SlideRecord>,
    pub test: Vec<SlideRecord>,
    pub generator: GeneratorDescription,
}

/// Pixel position of a grid point: 100 px spacing plus a per-slide offset.
fn to_phys(g: Point, offset: Point) -> Point {
    [offset[0] + 100.0 * g[1], offset[1] + 100.0 * g[0]]
}

fn stripe_cluster(g: Point, [period, angle, phase]: [f64; 3]) -> u8 {
    let omega = std::f64::consts::TAU / period;
    let t = omega * (g[0] * angle.cos() + g[1] * angle.sin()) + phase;
    u8::from(t.sin() < 0.0)
}

fn gaussian_rows(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.normal(std)).collect())
        .collect()
}

/// Mean feature of the `k` spots of `cluster` nearest to `at`.
fn neighborhood_mean(
    at: Point,
    grid: &[Point],
    clusters: &[u8],
    cluster: u8,
    features: &Matrix,
    k: usize,
) -> Vec<f64> {
    let mut cand: Vec<(f64, usize)> = grid
        .iter()
        .zip(clusters)
        .enumerate()
        .filter(|(_, (_, &c))| c == cluster)
        .map(|(j, (g, _))| (grid_distance(at, *g), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand.truncate(k);
    let mut mean = vec![0.0; features.cols()];
    if cand.is_empty() {
        return mean;
    }
    for &(_, j) in &cand {
        for (m, f) in mean.iter_mut().zip(features.row(j)) {
            *m += f;
        }
    }
    let n = cand.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn synth_slide(
    cfg: &SynthConfig,
    generator: &mut GeneratorDescription,
    rng: &mut Rng,
    slide_id: String,
) -> Result<SlideRecord> {
    let period = 4.0 + 3.0 * rng.uniform();
    let angle = std::f64::consts::PI * rng.uniform();
    let phase = std::f64::consts::TAU * rng.uniform();
    let stripes = [period, angle, phase];
    let offset = [500.0 * rng.uniform(), 500.0 * rng.uniform()];

    let mut lattice: Vec<Point> = (0..cfg.grid_rows)
        .flat_map(|r| (0..cfg.grid_cols).map(move |c| [r as f64, c as f64]))
        .collect();
    rng.shuffle(&mut lattice);
    lattice.truncate(cfg.kept_spots());
    lattice.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));

    let phys = lattice.iter().map(|&g| to_phys(g, offset)).collect();
    let mut coords = SpotCoords::new(lattice.clone(), phys, vec![false; lattice.len()]);
    let sampling = off_grid_sampling(&coords)?;
    coords.extend(&sampling.pseudo);

    let clusters: Vec<u8> = coords
        .grid
        .iter()
        .map(|&g| stripe_cluster(g, stripes))
        .collect();
    let n_total = coords.len();
    let mut features = Matrix::zeros(n_total, cfg.d);
    for (i, &c) in clusters.iter().enumerate() {
        let proto = &generator.prototypes[c as usize];
        for (j, p) in proto.iter().enumerate() {
            features.set(i, j, p + rng.normal(cfg.noise_std));
        }
    }

    let n_orig = coords.n_original();
    let mut targets = Matrix::zeros(n_orig, cfg.n_genes);
    for i in 0..n_orig {
        let same = neighborhood_mean(
            coords.grid[i],
            &coords.grid,
            &clusters,
            clusters[i],
            &features,
            cfg.neighbors,
        );
        let other = neighborhood_mean(
            coords.grid[i],
            &coords.grid,
            &clusters,
            1 - clusters[i],
            &features,
            cfg.neighbors,
        );
        let excite = matvec(&generator.w_same, &same);
        let inhibit = matvec(&generator.w_other, &other);
        for (g, (e, h)) in excite.into_iter().zip(inhibit).enumerate() {
            let y = e - cfg.inhibition_strength * h + rng.normal(cfg.target_noise_std);
            targets.set(i, g, y);
        }
    }

    generator.clusters.push(clusters);
    generator.stripes.push(stripes);
    let slide = SlideRecord {
        slide_id,
        coords,
        features,
        targets,
        gene_names: (0..cfg.n_genes).map(|g| format!("gene{g}")).collect(),
    };
    slide.check()?;
    Ok(slide)
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let w_std = (1.0 / cfg.d as f64).sqrt();
    let mut generator = GeneratorDescription {
        prototypes: gaussian_rows(&mut rng, 2, cfg.d, cfg.prototype_scale),
        w_same: gaussian_rows(&mut rng, cfg.n_genes, cfg.d, w_std),
        w_other: gaussian_rows(&mut rng, cfg.n_genes, cfg.d, w_std),
        inhibition_strength: cfg.inhibition_strength,
        neighbors: cfg.neighbors,
        clusters: Vec::new(),
        stripes: Vec::new(),
    };
    let mut slides = Vec::with_capacity(cfg.n_slides + cfg.n_test);
    for s in 0..cfg.n_slides + cfg.n_test {
        slides.push(synth_slide(
            cfg,
            &mut generator,
            &mut rng,
            format!("slide{s:03}"),
        )?);
    }
    let test = slides.split_off(cfg.n_slides);
    Ok(SynthDataset {
        train: slides,
        test,
        generator,
    })
}

/// A small fixed-layout slide: originals on a 2×4 grid followed by four
/// pseudo-spots, with standard normal features and targets.
pub fn toy_slide(seed: u64, d: usize, n_genes: usize) -> SlideRecord {
    let mut grid: Vec<Point> = (0..2)
        .flat_map(|r| (0..4).map(move |c| [r as f64, c as f64]))
        .collect();
    grid.extend([[0.5, 0.5], [0.5, 1.5], [0.5, 2.5], [0.0, 0.5]]);
    let phys = grid.iter().map(|&g| to_phys(g, [0.0, 0.0])).collect();
    let mut is_pseudo = vec![false; 8];
    is_pseudo.resize(12, true);
    let mut rng = Rng::new(seed);
    let features = rng.normal_matrix(12, d, 1.0);
    let targets = rng.normal_matrix(8, n_genes, 1.0);
    SlideRecord {
        slide_id: format!("toy{seed}"),
        coords: SpotCoords::new(grid, phys, is_pseudo),
        features,
        targets,
        gene_names: (0..n_genes).map(|g| format!("gene{g}")).collect(),
    }
}
