//! Loss, optimizer, schedule, the per-slide training loop and evaluation
//! metrics.

use serde::{Deserialize, Serialize};

use crate::data::SlideRecord;
use crate::error::{Error, Result};
use crate::model::{FeastModel, ModelConfig, ParamKind, ParamSpec, PreparedSlide};
use crate::numerics::{finite_diff_check, GradCheckReport, GradTape, Matrix, Var};

/// Mean squared error recorded on the tape.
pub fn mse_loss(tape: &mut GradTape, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let t = (step as f64).min(total) / total;
    base * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Overrides the model's initialization seed when set.
    pub seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 1500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: None,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk-scale synthetic task.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay on
/// `ParamKind::Weight` tensors. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [Matrix],
    specs: &[ParamSpec],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != specs.len() || params.len() != state.m.len() {
        return Err(Error::Optimizer(format!(
            "{} parameters, {} specs, {} gradients, {} moment slots",
            params.len(),
            specs.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(specs) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam gradient", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Optimizer(format!(
                "non-finite gradient for {}",
                s.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if specs[i].kind == ParamKind::Weight {
            cfg.weight_decay
        } else {
            0.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + decay * *w);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    /// Mean over slides of the loss before each slide's step.
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: FeastModel,
    pub history: Vec<EpochRecord>,
}

/// Loss and parameter gradients of one slide.
pub fn loss_and_grads(model: &FeastModel, prep: &PreparedSlide) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = GradTape::new();
    let pass = model.record(&mut tape, prep, false)?;
    let target = tape.leaf(prep.targets.clone());
    let loss = mse_loss(&mut tape, pass.prediction, target)?;
    let value = tape.value(loss).get(0, 0);
    if !value.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    Ok((value, pass.params.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Fits a freshly initialized model, one optimizer step per slide in input
/// order.
pub fn train(
    slides: &[SlideRecord],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<TrainOutcome> {
    let mut mcfg = mcfg.clone();
    if let Some(seed) = cfg.seed {
        mcfg.seed = seed;
    }
    let model = FeastModel::new(mcfg)?;
    train_from(model, slides, cfg)
}

/// Continues training `model`.
pub fn train_from(
    mut model: FeastModel,
    slides: &[SlideRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if slides.is_empty() {
        return Err(Error::InvalidArgument("no training slides".into()));
    }
    let (d, g) = (slides[0].d(), slides[0].n_genes());
    if let Some(s) = slides.iter().find(|s| s.d() != d || s.n_genes() != g) {
        return Err(Error::InvalidArgument(format!(
            "slide {} has d = {}, G = {}; first slide has d = {d}, G = {g}",
            s.slide_id,
            s.d(),
            s.n_genes()
        )));
    }
    let prepared = slides
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<Vec<_>>>()?;

    let total_steps = cfg.epochs * slides.len();
    let mut state = AdamState::new(&model.params.tensors);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let first_lr = cosine_lr(step, total_steps, cfg.learning_rate);
        let mut loss_sum = 0.0;
        for prep in &prepared {
            let (loss, grads) = loss_and_grads(&model, prep)?;
            loss_sum += loss;
            let lr = cosine_lr(step, total_steps, cfg.learning_rate);
            let params = &mut model.params;
            adam_step(
                &mut params.tensors,
                &params.specs,
                &grads,
                &mut state,
                lr,
                cfg,
            )?;
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            lr: first_lr,
            mean_loss: loss_sum / prepared.len() as f64,
        });
    }
    Ok(TrainOutcome { model, history })
}

/// How per-gene or per-spot correlations are combined into one PCC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PccAggregation {
    /// Correlate each gene across all spots, then average over genes.
    #[default]
    PerGene,
    /// Correlate each spot across genes, then average over spots.
    PerSpot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub pcc: f64,
    /// `None` for genes whose prediction or target has zero variance.
    pub per_gene_pcc: Vec<Option<f64>>,
    pub excluded_genes: Vec<usize>,
    pub aggregation: PccAggregation,
    pub n_spots: usize,
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Metrics over predicted/target pairs pooled across slides.
pub fn metrics(
    preds: &[Matrix],
    targets: &[Matrix],
    aggregation: PccAggregation,
) -> Result<MetricsReport> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Metrics(format!(
            "{} prediction blocks for {} target blocks",
            preds.len(),
            targets.len()
        )));
    }
    let g = targets[0].cols();
    for (p, t) in preds.iter().zip(targets) {
        if p.shape() != t.shape() || t.cols() != g {
            return Err(Error::shape("metrics", p.shape(), t.shape()));
        }
    }
    let n_spots: usize = targets.iter().map(Matrix::rows).sum();
    if n_spots == 0 || g == 0 {
        return Err(Error::Metrics("no entries to score".into()));
    }
    let count = (n_spots * g) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        for (a, b) in p.data().iter().zip(t.data()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
        }
    }
    let column = |blocks: &[Matrix], gene: usize| -> Vec<f64> {
        blocks
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |r| m.get(r, gene)))
            .collect()
    };
    let per_gene_pcc: Vec<Option<f64>> = (0..g)
        .map(|gene| pearson(&column(preds, gene), &column(targets, gene)))
        .collect();
    let excluded_genes: Vec<usize> = (0..g).filter(|&i| per_gene_pcc[i].is_none()).collect();

    let pcc = match aggregation {
        PccAggregation::PerGene => {
            let defined: Vec<f64> = per_gene_pcc.iter().flatten().copied().collect();
            if defined.is_empty() {
                return Err(Error::Metrics("every gene has zero variance".into()));
            }
            defined.iter().sum::<f64>() / defined.len() as f64
        }
        PccAggregation::PerSpot => {
            let defined: Vec<f64> = preds
                .iter()
                .zip(targets)
                .flat_map(|(p, t)| (0..t.rows()).filter_map(move |r| pearson(p.row(r), t.row(r))))
                .collect();
            if defined.is_empty() {
                return Err(Error::Metrics(
                    "every spot has zero variance across genes".into(),
                ));
            }
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    };
    Ok(MetricsReport {
        mse: se / count,
        mae: ae / count,
        pcc,
        per_gene_pcc,
        excluded_genes,
        aggregation,
        n_spots,
    })
}

/// Predictions for every slide, in input order.
pub fn predict(model: &FeastModel, slides: &[SlideRecord]) -> Result<Vec<Matrix>> {
    slides
        .iter()
        .map(|s| model.forward(s, false).map(|(p, _)| p))
        .collect()
}

pub fn evaluate(
    model: &FeastModel,
    slides: &[SlideRecord],
    aggregation: PccAggregation,
) -> Result<MetricsReport> {
    let preds = predict(model, slides)?;
    let targets: Vec<Matrix> = slides.iter().map(|s| s.targets.clone()).collect();
    metrics(&preds, &targets, aggregation)
}

/// Central-difference check of the MSE loss on `slide` against every
/// parameter of `model`.
pub fn gradcheck_model(
    model: &FeastModel,
    slide: &SlideRecord,
    eps: f64,
) -> Result<GradCheckReport> {
    let prep = model.prepare(slide)?;
    let f = |tape: &mut GradTape, params: &[Var]| -> Result<Var> {
        let pass = model.record_with(tape, &prep, params, false)?;
        let target = tape.leaf(prep.targets.clone());
        mse_loss(tape, pass.prediction, target)
    };
    finite_diff_check(f, &model.params.tensors, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_slide;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn specs(n: usize, kind: ParamKind) -> Vec<ParamSpec> {
        (0..n)
            .map(|i| ParamSpec {
                name: format!("p{i}"),
                kind,
                rows: 1,
                cols: 1,
            })
            .collect()
    }

    fn loss_of(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
        let mut tape = GradTape::new();
        let p = tape.leaf(pred.clone());
        let t = tape.leaf(target.clone());
        let l = mse_loss(&mut tape, p, t).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l).get(0, 0), g.wrt(p))
    }

    #[test]
    fn mse_examples() {
        let a = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(loss_of(&a, &b).0, 4.0);
        assert_eq!(loss_of(&a, &a).0, 0.0);
    }

    #[test]
    fn mse_matches_two_loops() {
        let mut rng = Rng::new(5);
        let p = rng.normal_matrix(5, 3, 1.0);
        let t = rng.normal_matrix(5, 3, 1.0);
        let mut want = 0.0;
        for r in 0..5 {
            for c in 0..3 {
                want += (p.get(r, c) - t.get(r, c)).powi(2);
            }
        }
        let (loss, grad) = loss_of(&p, &t);
        assert!((loss - want / 15.0).abs() < 1e-12);
        for r in 0..5 {
            for c in 0..3 {
                let g = 2.0 * (p.get(r, c) - t.get(r, c)) / 15.0;
                assert!((grad.get(r, c) - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![Matrix::filled(1, 1, 2.0)];
        let g = vec![Matrix::filled(1, 1, 1.0)];
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &specs(1, ParamKind::Weight), &g, &mut st, 0.1, &cfg).unwrap();
        assert!((2.0 - p[0].get(0, 0) - 0.1).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grad_zero_decay_is_identity() {
        let mut p = vec![Matrix::filled(2, 2, 0.7)];
        let g = vec![Matrix::zeros(2, 2)];
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let sp = vec![ParamSpec {
            name: "w".into(),
            kind: ParamKind::Weight,
            rows: 2,
            cols: 2,
        }];
        adam_step(&mut p, &sp, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p[0], Matrix::filled(2, 2, 0.7));
    }

    #[test]
    fn decay_only_touches_weights() {
        let mut p = vec![Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, 1.0)];
        let g = vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)];
        let mut sp = specs(2, ParamKind::Weight);
        sp[1].kind = ParamKind::NormGain;
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &sp, &g, &mut st, 0.1, &cfg).unwrap();
        assert!((p[0].get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(p[1].get(0, 0), 1.0);
    }

    #[test]
    fn identical_grads_identical_updates() {
        let mut p = vec![Matrix::filled(1, 1, 0.3), Matrix::filled(1, 1, 0.3)];
        let g = vec![Matrix::filled(1, 1, -0.4), Matrix::filled(1, 1, -0.4)];
        let mut st = AdamState::new(&p);
        let sp = specs(2, ParamKind::Weight);
        for _ in 0..3 {
            adam_step(&mut p, &sp, &g, &mut st, 0.01, &TrainConfig::default()).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = vec![Matrix::filled(1, 1, 0.3), Matrix::filled(1, 1, 0.3)];
        let g = vec![Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, f64::NAN)];
        let mut st = AdamState::new(&p);
        let err = adam_step(
            &mut p,
            &specs(2, ParamKind::Weight),
            &g,
            &mut st,
            0.1,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("p1"), "{err}");
        assert_eq!(p[0].get(0, 0), 0.3);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mcfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_genes: 2,
            knn_k: 3,
            ..ModelConfig::toy()
        };
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&[toy_slide(1, 4, 2)], &cfg, &mcfg).unwrap();
        assert_eq!(out.model, FeastModel::new(mcfg).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn rejects_mixed_dimensions() {
        let mcfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_genes: 2,
            knn_k: 3,
            ..ModelConfig::toy()
        };
        let slides = [toy_slide(1, 4, 2), toy_slide(2, 4, 3)];
        assert!(train(&slides, &TrainConfig::default(), &mcfg).is_err());
    }

    #[test]
    fn metric_examples() {
        let t = Matrix::from_rows(&[vec![1.0, 0.5], vec![2.0, -1.0], vec![0.0, 3.0]]).unwrap();
        let m = metrics(
            std::slice::from_ref(&t),
            std::slice::from_ref(&t),
            PccAggregation::PerGene,
        )
        .unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!((m.pcc - 1.0).abs() < 1e-15);
        let neg = t.scale(-1.0);
        let m = metrics(&[neg], &[t], PccAggregation::PerGene).unwrap();
        assert!((m.pcc + 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_worked_pearson() {
        // gene 0: pred (1,2,3,4) vs target (2,4,5,9); gene 1 target constant
        let p = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![2.0, 0.0],
            vec![3.0, 1.0],
            vec![4.0, 0.0],
        ])
        .unwrap();
        let t = Matrix::from_rows(&[
            vec![2.0, 5.0],
            vec![4.0, 5.0],
            vec![5.0, 5.0],
            vec![9.0, 5.0],
        ])
        .unwrap();
        let m = metrics(&[p], &[t], PccAggregation::PerGene).unwrap();
        // centered pred (-1.5,-.5,.5,1.5), target (-3,-1,0,4): sab = 11,
        // saa = 5, sbb = 26
        let want = 11.0 / (5.0f64.sqrt() * 26.0f64.sqrt());
        assert!((m.pcc - want).abs() < 1e-12);
        assert_eq!(m.excluded_genes, vec![1]);
        assert_eq!(m.per_gene_pcc[1], None);
        let mse = ((1.0f64 - 2.0).powi(2) + 4.0 + 4.0 + 25.0 + 16.0 + 25.0 + 16.0 + 25.0) / 8.0;
        assert!((m.mse - mse).abs() < 1e-12);
    }

    #[test]
    fn all_constant_genes_is_an_error() {
        let t = Matrix::filled(3, 2, 1.0);
        assert!(matches!(
            metrics(
                std::slice::from_ref(&t),
                std::slice::from_ref(&t),
                PccAggregation::PerGene
            ),
            Err(Error::Metrics(_))
        ));
    }

    #[test]
    fn per_spot_aggregation() {
        let p = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]]).unwrap();
        let m = metrics(&[p], &[t], PccAggregation::PerSpot).unwrap();
        assert!(m.pcc.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cosine_non_increasing(total in 1usize..500, a in 0usize..500, b in 0usize..500) {
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(cosine_lr(hi, total, 1e-3) <= cosine_lr(lo, total, 1e-3));
        }

        #[test]
        fn adam_zero_lr_is_identity(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut p = vec![rng.normal_matrix(2, 3, 1.0)];
            let before = p.clone();
            let g = vec![rng.normal_matrix(2, 3, 1.0)];
            let mut st = AdamState::new(&p);
            let sp = vec![ParamSpec { name: "w".into(), kind: ParamKind::Weight, rows: 2, cols: 3 }];
            adam_step(&mut p, &sp, &g, &mut st, 0.0, &TrainConfig::default()).unwrap();
            prop_assert_eq!(p, before);
        }

        #[test]
        fn pcc_invariant_to_positive_affine(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let p = rng.normal_matrix(20, 3, 1.0);
            let t = rng.normal_matrix(20, 3, 1.0);
            let base = metrics(std::slice::from_ref(&p), std::slice::from_ref(&t), PccAggregation::PerGene).unwrap();
            let moved = metrics(&[p.map(|v| a * v + b)], &[t], PccAggregation::PerGene).unwrap();
            prop_assert!((base.pcc - moved.pcc).abs() < 1e-10);
        }

        #[test]
        fn metrics_ignore_slide_and_spot_order(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let p: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(6, 2, 1.0)).collect();
            let t: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(6, 2, 1.0)).collect();
            let base = metrics(&p, &t, PccAggregation::PerGene).unwrap();
            let order = [2usize, 0, 1];
            let rows = [5usize, 3, 0, 1, 4, 2];
            let p2: Vec<Matrix> = order.iter().map(|&i| p[i].select_rows(&rows)).collect();
            let t2: Vec<Matrix> = order.iter().map(|&i| t[i].select_rows(&rows)).collect();
            let moved = metrics(&p2, &t2, PccAggregation::PerGene).unwrap();
            prop_assert!((base.pcc - moved.pcc).abs() < 1e-12);
            prop_assert!((base.mse - moved.mse).abs() < 1e-12);
            prop_assert!((base.mae - moved.mae).abs() < 1e-12);
        }
    }
}
