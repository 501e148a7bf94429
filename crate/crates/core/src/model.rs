//! The hierarchical network: `L` layers of (local k-NN stage over all spots →
//! dense stage over original spots), then an MLP regression head.
//!
//! Both stages are pre-norm residual blocks:
//!
//! ```text
//! x ← x + MHA(LN(x))
//! x ← x + FFN(LN(x))        FFN: d → 4d → d with GELU
//! ```
//!
//! The local stage lets every spot, original or pseudo, attend to its `k`
//! nearest other spots; self is carried by the residual. The global stage is
//! dense self-attention over the originals, self included. Refreshed original
//! rows are written back into the all-spot stream before the next layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_on, AttentionMaps, HeadProjections, KeySet, NegAttnParams};
use crate::data::SlideRecord;
use crate::error::{Error, Result};
use crate::geometry::{bias_matrix, knn_indices, neighbor_bias, KnnGraph, Point};
use crate::numerics::{GradTape, Matrix, NeighborTable, Rng, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub knn_k: usize,
    pub tau_neg: f64,
    pub beta: f64,
    pub n_genes: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    /// When false, pseudo-spots are dropped before the forward pass.
    pub use_pseudo_spots: bool,
}

impl Default for ModelConfig {
    /// Full-scale profile.
    fn default() -> Self {
        Self {
            d_model: 1536,
            n_heads: 8,
            n_layers: 3,
            knn_k: 32,
            tau_neg: 0.6,
            beta: 1.5,
            n_genes: 250,
            mlp_hidden: 3072,
            seed: 3927,
            use_pseudo_spots: true,
        }
    }
}

impl ModelConfig {
    /// Laptop-sized profile used by the synthetic benchmarks.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            knn_k: 8,
            n_genes: 8,
            mlp_hidden: 64,
            ..Self::default()
        }
    }

    /// Smallest profile; used for gradient checks.
    pub fn toy() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            knn_k: 4,
            n_genes: 3,
            mlp_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "n_heads = {} must divide d_model = {}",
                self.n_heads, self.d_model
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        if self.n_genes == 0 {
            return fail("n_genes must be at least 1".into());
        }
        if self.mlp_hidden == 0 {
            return fail("mlp_hidden must be at least 1".into());
        }
        self.attention()?;
        Ok(())
    }

    pub fn attention(&self) -> Result<NegAttnParams> {
        NegAttnParams::new(self.d_model, self.n_heads, self.tau_neg, self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormShift,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
}

/// One pre-norm attention + feed-forward block. `T` is a tensor slot: an
/// index into the flat parameter list, a tape handle, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub attn_norm_gain: T,
    pub attn_norm_shift: T,
    pub attn: HeadProjections<T>,
    pub ff_norm_gain: T,
    pub ff_norm_shift: T,
    pub ff_in: T,
    pub ff_in_bias: T,
    pub ff_out: T,
    pub ff_out_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeastLayerParams<T> {
    pub local: StageParams<T>,
    pub global: StageParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub hidden: T,
    pub hidden_bias: T,
    pub output: T,
    pub output_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub layers: Vec<FeastLayerParams<usize>>,
    pub head: MlpHead<usize>,
}

impl<T: Copy> StageParams<T> {
    fn map<U>(&self, f: &impl Fn(T) -> U) -> StageParams<U> {
        StageParams {
            attn_norm_gain: f(self.attn_norm_gain),
            attn_norm_shift: f(self.attn_norm_shift),
            attn: HeadProjections {
                query: self.attn.query.iter().map(|&t| f(t)).collect(),
                key: self.attn.key.iter().map(|&t| f(t)).collect(),
                value: self.attn.value.iter().map(|&t| f(t)).collect(),
                output: f(self.attn.output),
            },
            ff_norm_gain: f(self.ff_norm_gain),
            ff_norm_shift: f(self.ff_norm_shift),
            ff_in: f(self.ff_in),
            ff_in_bias: f(self.ff_in_bias),
            ff_out: f(self.ff_out),
            ff_out_bias: f(self.ff_out_bias),
        }
    }
}

impl<T: Copy> FeastLayerParams<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> FeastLayerParams<U> {
        FeastLayerParams {
            local: self.local.map(f),
            global: self.global.map(f),
        }
    }
}

impl<T: Copy> MlpHead<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> MlpHead<U> {
        MlpHead {
            hidden: f(self.hidden),
            hidden_bias: f(self.hidden_bias),
            output: f(self.output),
            output_bias: f(self.output_bias),
        }
    }
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, kind: ParamKind, rows: usize, cols: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            kind,
            rows,
            cols,
        });
        self.specs.len() - 1
    }

    fn stage(&mut self, prefix: &str, cfg: &ModelConfig) -> StageParams<usize> {
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dk = d / h;
        let heads = |role: &str, b: &mut Self| -> Vec<usize> {
            (0..h)
                .map(|i| {
                    b.add(
                        format!("{prefix}.attn.{role}.{i}"),
                        ParamKind::Weight,
                        d,
                        dk,
                    )
                })
                .collect()
        };
        let attn_norm_gain = self.add(
            format!("{prefix}.attn_norm.gain"),
            ParamKind::NormGain,
            1,
            d,
        );
        let attn_norm_shift = self.add(
            format!("{prefix}.attn_norm.shift"),
            ParamKind::NormShift,
            1,
            d,
        );
        let query = heads("query", self);
        let key = heads("key", self);
        let value = heads("value", self);
        let output = self.add(format!("{prefix}.attn.output"), ParamKind::Weight, d, d);
        StageParams {
            attn_norm_gain,
            attn_norm_shift,
            attn: HeadProjections {
                query,
                key,
                value,
                output,
            },
            ff_norm_gain: self.add(format!("{prefix}.ff_norm.gain"), ParamKind::NormGain, 1, d),
            ff_norm_shift: self.add(
                format!("{prefix}.ff_norm.shift"),
                ParamKind::NormShift,
                1,
                d,
            ),
            ff_in: self.add(format!("{prefix}.ff.in"), ParamKind::Weight, d, 4 * d),
            ff_in_bias: self.add(format!("{prefix}.ff.in_bias"), ParamKind::Bias, 1, 4 * d),
            ff_out: self.add(format!("{prefix}.ff.out"), ParamKind::Weight, 4 * d, d),
            ff_out_bias: self.add(format!("{prefix}.ff.out_bias"), ParamKind::Bias, 1, d),
        }
    }
}

/// Builds the tensor list and the structural index for `cfg`.
pub fn param_layout(cfg: &ModelConfig) -> (Vec<ParamSpec>, ParamLayout) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let layers = (0..cfg.n_layers)
        .map(|l| FeastLayerParams {
            local: b.stage(&format!("layer{l}.local"), cfg),
            global: b.stage(&format!("layer{l}.global"), cfg),
        })
        .collect();
    let (d, m, g) = (cfg.d_model, cfg.mlp_hidden, cfg.n_genes);
    let head = MlpHead {
        hidden: b.add("head.hidden".into(), ParamKind::Weight, d, m),
        hidden_bias: b.add("head.hidden_bias".into(), ParamKind::Bias, 1, m),
        output: b.add("head.output".into(), ParamKind::Weight, m, g),
        output_bias: b.add("head.output_bias".into(), ParamKind::Bias, 1, g),
    };
    (b.specs, ParamLayout { layers, head })
}

/// All trainable tensors of a model, flat, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeastParams {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Matrix>,
    pub layout: ParamLayout,
}

impl FeastParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Replaces every tensor, checking shapes against the layout.
    pub fn set_tensors(&mut self, tensors: Vec<Matrix>) -> Result<()> {
        if tensors.len() != self.specs.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                self.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in self.specs.iter().zip(&tensors) {
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::shape("parameter", (spec.rows, spec.cols), t.shape()));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Xavier-normal weights, unit norm gains, zero shifts and biases.
pub fn init_params(cfg: &ModelConfig) -> Result<FeastParams> {
    cfg.validate()?;
    let (specs, layout) = param_layout(cfg);
    let mut rng = Rng::new(cfg.seed);
    let tensors = specs
        .iter()
        .map(|s| match s.kind {
            ParamKind::Weight => {
                let std = (2.0 / (s.rows + s.cols) as f64).sqrt();
                rng.normal_matrix(s.rows, s.cols, std)
            }
            ParamKind::NormGain => Matrix::filled(s.rows, s.cols, 1.0),
            ParamKind::Bias | ParamKind::NormShift => Matrix::zeros(s.rows, s.cols),
        })
        .collect();
    Ok(FeastParams {
        specs,
        tensors,
        layout,
    })
}

/// Per-slide geometry computed once and reused across passes.
#[derive(Debug, Clone)]
pub struct PreparedSlide {
    pub n_orig: usize,
    pub n_total: usize,
    /// `n_total × d`, originals first.
    pub features: Matrix,
    pub targets: Matrix,
    pub grid: Vec<Point>,
    pub knn: KnnGraph,
    pub local_table: Arc<NeighborTable>,
    /// Per head, `n_total × k`.
    pub local_bias: Vec<Matrix>,
    /// Per head, `n_orig × n_orig`.
    pub global_bias: Vec<Matrix>,
}

impl PreparedSlide {
    pub fn new(slide: &SlideRecord, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let violations = slide.validate();
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        if slide.features.cols() != cfg.d_model {
            return Err(Error::shape(
                "slide features vs d_model",
                slide.features.shape(),
                (slide.features.rows(), cfg.d_model),
            ));
        }
        if slide.targets.cols() != cfg.n_genes {
            return Err(Error::shape(
                "slide targets vs n_genes",
                slide.targets.shape(),
                (slide.targets.rows(), cfg.n_genes),
            ));
        }
        let n_orig = slide.n_orig();
        let n_total = if cfg.use_pseudo_spots {
            slide.n_total()
        } else {
            n_orig
        };
        let grid = slide.coords.grid[..n_total].to_vec();
        let knn = knn_indices(&grid, &grid, cfg.knn_k, true)?;
        let orig = &grid[..n_orig];
        let local_bias = crate::attention::slopes(cfg.n_heads)
            .into_iter()
            .map(|m| neighbor_bias(&grid, &grid, &knn, m))
            .collect::<Result<Vec<_>>>()?;
        let global_bias = crate::attention::slopes(cfg.n_heads)
            .into_iter()
            .map(|m| bias_matrix(orig, orig, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_orig,
            n_total,
            features: slide.features.slice_rows(0, n_total),
            targets: slide.targets.clone(),
            local_table: knn.to_table(),
            grid,
            knn,
            local_bias,
            global_bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    /// Per head, `n_total × k`, keyed through the local neighbor table.
    pub local: Vec<AttentionMaps>,
    /// Per head, `n_orig × n_orig`.
    pub global: Vec<AttentionMaps>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub layers: Vec<LayerMaps>,
    /// Final original-spot representations fed to the head.
    pub embeddings: Matrix,
}

/// Handles produced by recording one forward pass.
#[derive(Debug, Clone)]
pub struct TapedForward {
    pub params: Vec<Var>,
    pub prediction: Var,
    pub cache: Option<ForwardCache>,
}

fn feed_forward(tape: &mut GradTape, x: Var, stage: &StageParams<Var>) -> Result<Var> {
    let h = tape.matmul(x, stage.ff_in)?;
    let h = tape.add_row(h, stage.ff_in_bias)?;
    let h = tape.gelu(h);
    let out = tape.matmul(h, stage.ff_out)?;
    tape.add_row(out, stage.ff_out_bias)
}

/// One residual block with the given key visibility.
#[allow(clippy::too_many_arguments)]
pub fn feast_block(
    tape: &mut GradTape,
    x: Var,
    keys: KeySet<'_>,
    biases: &[Matrix],
    stage: &StageParams<Var>,
    attn: &NegAttnParams,
    want_maps: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    let h = tape.layer_norm(
        x,
        stage.attn_norm_gain,
        stage.attn_norm_shift,
        LAYER_NORM_EPS,
    )?;
    let (a, maps) = multi_head_on(tape, h, h, keys, biases, &stage.attn, attn, want_maps)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, stage.ff_norm_gain, stage.ff_norm_shift, LAYER_NORM_EPS)?;
    let f = feed_forward(tape, h, stage)?;
    Ok((tape.add(x, f)?, maps))
}

/// Local stage: every spot attends to its `k` nearest other spots.
pub fn local_stage(
    tape: &mut GradTape,
    features_all: Var,
    coords_all: &[Point],
    knn: &KnnGraph,
    stage: &StageParams<Var>,
    attn: &NegAttnParams,
    want_maps: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    if knn.n_queries() != coords_all.len() || tape.value(features_all).rows() != coords_all.len() {
        return Err(Error::shape(
            "local_stage",
            tape.value(features_all).shape(),
            (knn.n_queries(), coords_all.len()),
        ));
    }
    let biases = attn
        .slopes
        .iter()
        .map(|&m| neighbor_bias(coords_all, coords_all, knn, m))
        .collect::<Result<Vec<_>>>()?;
    let table = knn.to_table();
    feast_block(
        tape,
        features_all,
        KeySet::Neighbors(&table),
        &biases,
        stage,
        attn,
        want_maps,
    )
}

/// Global stage: dense self-attention over original spots, self included.
pub fn global_stage(
    tape: &mut GradTape,
    features_orig: Var,
    coords_orig: &[Point],
    stage: &StageParams<Var>,
    attn: &NegAttnParams,
    want_maps: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    if tape.value(features_orig).rows() != coords_orig.len() {
        return Err(Error::shape(
            "global_stage",
            tape.value(features_orig).shape(),
            (coords_orig.len(), attn.d_model),
        ));
    }
    let biases = attn
        .slopes
        .iter()
        .map(|&m| bias_matrix(coords_orig, coords_orig, m))
        .collect::<Result<Vec<_>>>()?;
    feast_block(
        tape,
        features_orig,
        KeySet::Dense(None),
        &biases,
        stage,
        attn,
        want_maps,
    )
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeastModel {
    pub config: ModelConfig,
    pub params: FeastParams,
}

impl FeastModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn with_params(config: ModelConfig, params: FeastParams) -> Result<Self> {
        config.validate()?;
        let (specs, _) = param_layout(&config);
        if specs != params.specs {
            return Err(Error::Config(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn prepare(&self, slide: &SlideRecord) -> Result<PreparedSlide> {
        PreparedSlide::new(slide, &self.config)
    }

    /// Records a forward pass over `tensors` (one per parameter, layout
    /// order) on `tape`.
    pub fn record_with(
        &self,
        tape: &mut GradTape,
        prep: &PreparedSlide,
        tensors: &[Var],
        want_maps: bool,
    ) -> Result<TapedForward> {
        let cfg = &self.config;
        let attn = cfg.attention()?;
        let layout = &self.params.layout;
        if tensors.len() != self.params.specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameter handles, got {}",
                self.params.specs.len(),
                tensors.len()
            )));
        }
        let var = |i: usize| tensors[i];
        let (n_orig, n_total) = (prep.n_orig, prep.n_total);

        let mut x = tape.leaf(prep.features.clone());
        let mut layer_maps = Vec::new();
        for layer in &layout.layers {
            let layer = layer.map(&var);
            let (local_out, local) = feast_block(
                tape,
                x,
                KeySet::Neighbors(&prep.local_table),
                &prep.local_bias,
                &layer.local,
                &attn,
                want_maps,
            )?;
            let orig = tape.slice_rows(local_out, 0, n_orig)?;
            let (global_out, global) = feast_block(
                tape,
                orig,
                KeySet::Dense(None),
                &prep.global_bias,
                &layer.global,
                &attn,
                want_maps,
            )?;
            x = if n_total > n_orig {
                let pseudo = tape.slice_rows(local_out, n_orig, n_total)?;
                tape.concat_rows(&[global_out, pseudo])?
            } else {
                global_out
            };
            if want_maps {
                layer_maps.push(LayerMaps { local, global });
            }
        }

        let orig = if n_total > n_orig {
            tape.slice_rows(x, 0, n_orig)?
        } else {
            x
        };
        let head = layout.head.map(&var);
        let h = tape.matmul(orig, head.hidden)?;
        let h = tape.add_row(h, head.hidden_bias)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, head.output)?;
        let prediction = tape.add_row(out, head.output_bias)?;

        let cache = want_maps.then(|| ForwardCache {
            layers: layer_maps,
            embeddings: tape.value(orig).clone(),
        });
        Ok(TapedForward {
            params: tensors.to_vec(),
            prediction,
            cache,
        })
    }

    /// Records a forward pass with the model's own parameters as tape leaves.
    pub fn record(
        &self,
        tape: &mut GradTape,
        prep: &PreparedSlide,
        want_maps: bool,
    ) -> Result<TapedForward> {
        let tensors: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        self.record_with(tape, prep, &tensors, want_maps)
    }

    /// Predictions (`n_orig × G`) and, on request, the attention maps.
    pub fn forward(
        &self,
        slide: &SlideRecord,
        want_maps: bool,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        let prep = self.prepare(slide)?;
        self.forward_prepared(&prep, want_maps)
    }

    pub fn forward_prepared(
        &self,
        prep: &PreparedSlide,
        want_maps: bool,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        let mut tape = GradTape::new();
        let pass = self.record(&mut tape, prep, want_maps)?;
        let pred = tape.value(pass.prediction).clone();
        if !pred.is_finite() {
            return Err(Error::Numeric(
                "forward pass produced non-finite predictions".into(),
            ));
        }
        Ok((pred, pass.cache))
    }
}

/// Parameter gradients for an adjoint `prediction_grad` on the predictions of
/// a recorded pass.
pub fn backward(
    tape: &GradTape,
    pass: &TapedForward,
    prediction_grad: &Matrix,
) -> Result<Vec<Matrix>> {
    let grads = tape.backward_with(pass.prediction, prediction_grad.clone())?;
    Ok(pass.params.iter().map(|&v| grads.wrt(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_names_constraint() {
        let mut c = ModelConfig::toy();
        c.n_heads = 3;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("n_heads"), "{msg}");
        let mut c = ModelConfig::toy();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn head_shapes_follow_d_k() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ..ModelConfig::toy()
        };
        let p = init_params(&cfg).unwrap();
        let q = p.layout.layers[0].local.attn.query[1];
        assert_eq!(p.tensors[q].shape(), (16, 8));
    }

    #[test]
    fn closed_form_parameter_count() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            n_genes: 4,
            mlp_hidden: 32,
            ..ModelConfig::toy()
        };
        // per stage: 2 norms (2·2·16) + q/k/v (3·16·16) + out (16·16)
        //            + ff (16·64 + 64 + 64·16 + 16)
        let stage = 2 * 2 * 16 + 3 * 16 * 16 + 16 * 16 + (16 * 64 + 64 + 64 * 16 + 16);
        let head = 16 * 32 + 32 + 32 * 4 + 4;
        assert_eq!(stage, 3216);
        assert_eq!(init_params(&cfg).unwrap().count(), 2 * stage + head);
        assert_eq!(2 * stage + head, 7108);
    }

    #[test]
    fn init_is_deterministic_and_xavier_scaled() {
        let cfg = ModelConfig::desk();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        let ff = &a.tensors[a.layout.layers[0].local.ff_in];
        let n = ff.len() as f64;
        let var = ff.data().iter().map(|v| v * v).sum::<f64>() / n;
        let want = 2.0 / (32.0 + 128.0);
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
        let gain = &a.tensors[a.layout.layers[0].global.attn_norm_gain];
        assert!(gain.data().iter().all(|&g| g == 1.0));
    }
}
