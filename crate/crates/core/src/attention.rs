//! Signed multi-head attention with a distance bias.
//!
//! Each head scores `S = q·kᵀ/√d_k` and forms two distributions over keys:
//! `A_pos = softmax(S + B)` and `A_neg = softmax((B − S) / τ_neg)`. The head
//! mixes values with `A_final = A_pos − β·A_neg`, so a key can pull a query's
//! representation away as well as toward it. `B` is `m_h · distance` with a
//! fixed negative slope per head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{bias_matrix, KnnGraph, Point};
use crate::numerics::{GradTape, Mask, Matrix, NeighborTable, Var};

/// `[−2⁻¹, −2⁻², …, −2⁻ᴴ]`.
pub fn slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads as i32).map(|h| -(2f64.powi(-h))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegAttnParams {
    pub tau_neg: f64,
    pub beta: f64,
    /// One slope per head, all negative.
    pub slopes: Vec<f64>,
    pub d_model: usize,
}

impl NegAttnParams {
    /// Parameters with the default geometric slopes.
    pub fn new(d_model: usize, n_heads: usize, tau_neg: f64, beta: f64) -> Result<Self> {
        let p = Self {
            tau_neg,
            beta,
            slopes: slopes(n_heads),
            d_model,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_neg.is_finite() && self.tau_neg > 0.0) {
            return Err(Error::Config(format!(
                "tau_neg must be > 0, got {}",
                self.tau_neg
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.slopes.is_empty() {
            return Err(Error::Config(
                "at least one attention head is required".into(),
            ));
        }
        if let Some(m) = self.slopes.iter().find(|m| m.is_nan() || **m >= 0.0) {
            return Err(Error::Config(format!(
                "head slopes must be negative, got {m}"
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads()) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model = {}",
                self.n_heads(),
                self.d_model
            )));
        }
        Ok(())
    }
}

/// Per-head query/key/value maps (`d × d_k`) and the shared output map (`d × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections<T = Matrix> {
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
}

impl HeadProjections<Matrix> {
    pub fn check_shapes(&self, d_model: usize, n_heads: usize) -> Result<()> {
        let d_k = d_model / n_heads;
        for set in [&self.query, &self.key, &self.value] {
            if set.len() != n_heads {
                return Err(Error::Config(format!(
                    "expected {n_heads} head projections, found {}",
                    set.len()
                )));
            }
            for m in set {
                if m.shape() != (d_model, d_k) {
                    return Err(Error::shape("head projection", (d_model, d_k), m.shape()));
                }
            }
        }
        if self.output.shape() != (d_model, d_model) {
            return Err(Error::shape(
                "output projection",
                (d_model, d_model),
                self.output.shape(),
            ));
        }
        Ok(())
    }
}

/// Which keys a query row can see.
#[derive(Debug, Clone, Copy)]
pub enum KeySet<'a> {
    /// Every key, optionally restricted by a boolean mask.
    Dense(Option<&'a Mask>),
    /// Row `i` sees exactly the keys listed in row `i` of the table. Maps
    /// and biases are then `n_query × width`.
    Neighbors(&'a Arc<NeighborTable>),
}

/// Per-head attention weights. For neighbor-restricted attention, column `j`
/// of row `i` refers to key `neighbors.row(i)[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub a_pos: Matrix,
    pub a_neg: Matrix,
    pub a_final: Matrix,
    pub neighbors: Option<Arc<NeighborTable>>,
}

impl AttentionMaps {
    /// Key index addressed by column `j` of row `i`.
    pub fn key(&self, i: usize, j: usize) -> usize {
        match &self.neighbors {
            Some(t) => t.row(i)[j],
            None => j,
        }
    }

    /// `(key, a_pos, a_neg, a_final)` for every visible key of query `i`.
    pub fn row_entries(&self, i: usize) -> Vec<(usize, f64, f64, f64)> {
        (0..self.a_final.cols())
            .map(|j| {
                (
                    self.key(i, j),
                    self.a_pos.get(i, j),
                    self.a_neg.get(i, j),
                    self.a_final.get(i, j),
                )
            })
            .collect()
    }
}

/// Tape handles for one head's attention.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub output: Var,
    pub a_pos: Var,
    pub a_neg: Var,
    pub a_final: Var,
}

impl HeadVars {
    pub fn maps(&self, tape: &GradTape, neighbors: Option<&Arc<NeighborTable>>) -> AttentionMaps {
        AttentionMaps {
            a_pos: tape.value(self.a_pos).clone(),
            a_neg: tape.value(self.a_neg).clone(),
            a_final: tape.value(self.a_final).clone(),
            neighbors: neighbors.cloned(),
        }
    }
}

/// Negative-aware attention for one head, recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn neg_aware_attention_on(
    tape: &mut GradTape,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    keys: KeySet<'_>,
    tau_neg: f64,
    beta: f64,
) -> Result<HeadVars> {
    let d_k = tape.value(q).cols();
    let raw = match keys {
        KeySet::Dense(_) => tape.matmul_nt(q, k)?,
        KeySet::Neighbors(table) => tape.gather_dot(q, k, table)?,
    };
    let scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    if tape.value(bias).shape() != tape.value(scores).shape() {
        return Err(Error::shape(
            "attention bias",
            tape.value(scores).shape(),
            tape.value(bias).shape(),
        ));
    }
    let mask = match keys {
        KeySet::Dense(mask) => mask,
        KeySet::Neighbors(_) => None,
    };
    let s_pos = tape.add(scores, bias)?;
    let s_neg = tape.sub(bias, scores)?;
    let a_pos = tape.softmax_rows(s_pos, mask)?;
    let s_neg = tape.scale(s_neg, 1.0 / tau_neg);
    let a_neg = tape.softmax_rows(s_neg, mask)?;
    let neg_part = tape.scale(a_neg, beta);
    let a_final = tape.sub(a_pos, neg_part)?;
    let output = match keys {
        KeySet::Dense(_) => tape.matmul(a_final, v)?,
        KeySet::Neighbors(table) => tape.gather_combine(a_final, v, table)?,
    };
    Ok(HeadVars {
        output,
        a_pos,
        a_neg,
        a_final,
    })
}

/// Value-level negative-aware attention over dense keys.
pub fn neg_aware_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    bias: &Matrix,
    mask: Option<&Mask>,
    params: &NegAttnParams,
) -> Result<(Matrix, AttentionMaps)> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape("neg_aware_attention", q.shape(), k.shape()));
    }
    let mut tape = GradTape::new();
    let (qv, kv, vv, bv) = (
        tape.leaf(q.clone()),
        tape.leaf(k.clone()),
        tape.leaf(v.clone()),
        tape.leaf(bias.clone()),
    );
    let head = neg_aware_attention_on(
        &mut tape,
        qv,
        kv,
        vv,
        bv,
        KeySet::Dense(mask),
        params.tau_neg,
        params.beta,
    )?;
    Ok((tape.value(head.output).clone(), head.maps(&tape, None)))
}

/// All heads over precomputed per-head biases: project, attend, concatenate,
/// apply the output map. Maps are copied out only when `want_maps` is set.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_on(
    tape: &mut GradTape,
    x_query: Var,
    x_kv: Var,
    keys: KeySet<'_>,
    biases: &[Matrix],
    proj: &HeadProjections<Var>,
    params: &NegAttnParams,
    want_maps: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    let d = tape.value(x_query).cols();
    if d != params.d_model || tape.value(x_kv).cols() != d {
        return Err(Error::shape(
            "multi_head input",
            tape.value(x_query).shape(),
            tape.value(x_kv).shape(),
        ));
    }
    if biases.len() != params.n_heads() || proj.query.len() != params.n_heads() {
        return Err(Error::Config(format!(
            "expected {} heads, got {} biases and {} projections",
            params.n_heads(),
            biases.len(),
            proj.query.len()
        )));
    }
    let neighbors = match keys {
        KeySet::Neighbors(t) => Some(t),
        KeySet::Dense(_) => None,
    };
    let mut outputs = Vec::with_capacity(params.n_heads());
    let mut maps = Vec::new();
    for (h, bias) in biases.iter().enumerate() {
        let q = tape.matmul(x_query, proj.query[h])?;
        let k = tape.matmul(x_kv, proj.key[h])?;
        let v = tape.matmul(x_kv, proj.value[h])?;
        let bias = tape.leaf(bias.clone());
        let head = neg_aware_attention_on(tape, q, k, v, bias, keys, params.tau_neg, params.beta)?;
        if want_maps {
            maps.push(head.maps(tape, neighbors));
        }
        outputs.push(head.output);
    }
    let merged = tape.concat_cols(&outputs)?;
    Ok((tape.matmul(merged, proj.output)?, maps))
}

/// Multi-head attention between two spot sets. With a neighbor graph, query
/// `i` attends exactly to the keys in `graph.neighbors[i]`; otherwise to all
/// keys.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_feast(
    tape: &mut GradTape,
    x_query: Var,
    x_kv: Var,
    coords_q: &[Point],
    coords_kv: &[Point],
    graph: Option<&KnnGraph>,
    proj: &HeadProjections<Var>,
    params: &NegAttnParams,
    want_maps: bool,
) -> Result<(Var, Vec<AttentionMaps>)> {
    match graph {
        Some(g) => {
            let table = g.to_table();
            let biases = params
                .slopes
                .iter()
                .map(|&m| crate::geometry::neighbor_bias(coords_q, coords_kv, g, m))
                .collect::<Result<Vec<_>>>()?;
            multi_head_on(
                tape,
                x_query,
                x_kv,
                KeySet::Neighbors(&table),
                &biases,
                proj,
                params,
                want_maps,
            )
        }
        None => {
            let biases = params
                .slopes
                .iter()
                .map(|&m| bias_matrix(coords_q, coords_kv, m))
                .collect::<Result<Vec<_>>>()?;
            multi_head_on(
                tape,
                x_query,
                x_kv,
                KeySet::Dense(None),
                &biases,
                proj,
                params,
                want_maps,
            )
        }
    }
}
