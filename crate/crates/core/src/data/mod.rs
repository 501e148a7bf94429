//! Slide records, their validation, on-disk containers and synthetic data.

mod format;
mod manifest;
mod synth;

pub use format::{
    decode_checkpoint, decode_slide, encode_checkpoint, encode_slide, read_checkpoint, read_slide,
    write_checkpoint, write_slide, CHECKPOINT_MAGIC, FORMAT_VERSION, SLIDE_MAGIC,
};
pub use manifest::Manifest;
pub use synth::{synth_dataset, toy_slide, GeneratorDescription, SynthConfig, SynthDataset};

use crate::error::{Error, Result, Violation};
use crate::geometry::{grid_distance, off_grid_sampling, SpotCoords};
use crate::numerics::Matrix;

/// One tissue section: spots (originals first, then pseudo-spots), their
/// features, and expression targets for the originals.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub coords: SpotCoords,
    /// `n_total × d`; row `i` belongs to spot `i`.
    pub features: Matrix,
    /// `n_orig × G`.
    pub targets: Matrix,
    pub gene_names: Vec<String>,
}

fn non_finite(section: &'static str, m: &Matrix, out: &mut Vec<Violation>) {
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFinite {
                    section,
                    row: r,
                    col: c,
                });
            }
        }
    }
}

impl SlideRecord {
    pub fn n_orig(&self) -> usize {
        self.coords.n_original()
    }

    pub fn n_pseudo(&self) -> usize {
        self.coords.n_pseudo()
    }

    pub fn n_total(&self) -> usize {
        self.coords.len()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn n_genes(&self) -> usize {
        self.targets.cols()
    }

    /// Every broken invariant; empty when the slide is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = self.coords.violations();
        let n_total = self.coords.grid.len();
        if let Some(first_pseudo) = self.coords.is_pseudo.iter().position(|&p| p) {
            for (i, &p) in self.coords.is_pseudo.iter().enumerate().skip(first_pseudo) {
                if !p {
                    out.push(Violation::OriginalAfterPseudo { index: i });
                }
            }
        }
        if self.features.rows() != n_total {
            out.push(Violation::FeatureRows {
                expected: n_total,
                found: self.features.rows(),
            });
        }
        let n_orig = self.n_orig();
        if self.targets.rows() != n_orig {
            out.push(Violation::TargetRows {
                expected: n_orig,
                found: self.targets.rows(),
            });
        }
        if self.gene_names.len() != self.targets.cols() {
            out.push(Violation::GeneNames {
                expected: self.targets.cols(),
                found: self.gene_names.len(),
            });
        }
        non_finite("features", &self.features, &mut out);
        non_finite("targets", &self.targets, &mut out);
        out
    }

    pub fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// The same slide with pseudo-spots removed.
    pub fn originals_only(&self) -> SlideRecord {
        let n = self.n_orig();
        SlideRecord {
            slide_id: self.slide_id.clone(),
            coords: self.coords.prefix(n),
            features: self.features.slice_rows(0, n),
            targets: self.targets.clone(),
            gene_names: self.gene_names.clone(),
        }
    }
}

/// How `append_pseudo_spots` fills feature rows for new pseudo-spots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoFeatures {
    /// Inverse-distance-weighted mean of the (up to) 4 nearest originals.
    NearestMean,
    Zero,
}

/// Replaces any existing pseudo-spots with the output of off-grid sampling.
///
/// There are no image patches to embed here, so pseudo-spot features are a
/// stand-in chosen by `fill`.
pub fn append_pseudo_spots(slide: &SlideRecord, fill: PseudoFeatures) -> Result<SlideRecord> {
    slide.check()?;
    let base = slide.originals_only();
    let sampling = off_grid_sampling(&base.coords)?;
    let d = base.d();
    let n_orig = base.n_total();
    let n_new = sampling.pseudo.len();

    let mut data = base.features.data().to_vec();
    data.reserve(n_new * d);
    for p in &sampling.pseudo.grid {
        let mut row = vec![0.0; d];
        if fill == PseudoFeatures::NearestMean {
            let mut nearest: Vec<(f64, usize)> = base
                .coords
                .grid
                .iter()
                .enumerate()
                .map(|(j, g)| (grid_distance(*g, *p), j))
                .collect();
            nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            nearest.truncate(4);
            let total: f64 = nearest.iter().map(|(dist, _)| 1.0 / dist).sum();
            for (dist, j) in nearest {
                let w = 1.0 / dist / total;
                for (o, f) in row.iter_mut().zip(base.features.row(j)) {
                    *o += w * f;
                }
            }
        }
        data.extend_from_slice(&row);
    }
    let mut coords = base.coords.clone();
    coords.extend(&sampling.pseudo);
    let out = SlideRecord {
        slide_id: base.slide_id,
        coords,
        features: Matrix::from_vec(n_orig + n_new, d, data)?,
        targets: base.targets,
        gene_names: base.gene_names,
    };
    out.check()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_slide_is_valid() {
        assert!(toy_slide(1, 16, 3).validate().is_empty());
    }

    #[test]
    fn duplicate_grid_names_both_indices() {
        let mut s = toy_slide(1, 4, 2);
        s.coords.grid[5] = s.coords.grid[2];
        let v = s.validate();
        assert_eq!(
            v,
            vec![Violation::DuplicateGrid {
                first: 2,
                second: 5
            }]
        );
    }

    #[test]
    fn nan_feature_reports_position() {
        let mut s = toy_slide(1, 4, 2);
        s.features.set(3, 1, f64::NAN);
        let v = s.validate();
        assert_eq!(
            v,
            vec![Violation::NonFinite {
                section: "features",
                row: 3,
                col: 1
            }]
        );
    }

    #[test]
    fn collects_every_violation() {
        let mut s = toy_slide(1, 4, 2);
        s.targets.set(0, 0, f64::INFINITY);
        s.gene_names.pop();
        s.coords.grid[0] = [0.25, 0.0];
        assert_eq!(s.validate().len(), 3);
    }

    #[test]
    fn pseudo_spots_with_nearest_mean_features() {
        let base = toy_slide(2, 4, 2).originals_only();
        let out = append_pseudo_spots(&base, PseudoFeatures::NearestMean).unwrap();
        assert_eq!(out.n_orig(), base.n_orig());
        assert!(out.n_pseudo() > 0);
        // (0, 0.5) on a 2×4 grid: nearest originals (0,0),(0,1) at 0.5 and
        // (1,0),(1,1) at √1.25.
        let i = out
            .coords
            .grid
            .iter()
            .position(|g| *g == [0.0, 0.5])
            .unwrap();
        let (near, far) = (1.0 / 0.5, 1.0 / 1.25f64.sqrt());
        let z = 2.0 * near + 2.0 * far;
        let idx = |p: [f64; 2]| base.coords.grid.iter().position(|g| *g == p).unwrap();
        for c in 0..4 {
            let want = (near
                * (base.features.get(idx([0.0, 0.0]), c) + base.features.get(idx([0.0, 1.0]), c))
                + far
                    * (base.features.get(idx([1.0, 0.0]), c)
                        + base.features.get(idx([1.0, 1.0]), c)))
                / z;
            assert!((out.features.get(i, c) - want).abs() < 1e-12);
        }
        let zero = append_pseudo_spots(&base, PseudoFeatures::Zero).unwrap();
        assert!(zero.features.row(i).iter().all(|&v| v == 0.0));
    }
}
