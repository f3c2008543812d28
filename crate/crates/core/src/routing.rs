//! Routing-feature extractors for the edit and input ends, and the visual
//! sentinel that sets the per-query hard-routing threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::CrossAttention;
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum End {
    Edit,
    Input,
}

/// Visual and textual routing features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingFeatures<T> {
    pub visual: Tensor<T>,
    pub textual: Tensor<T>,
    end: End,
}

impl<T: Scalar> RoutingFeatures<T> {
    pub fn new(visual: Tensor<T>, textual: Tensor<T>, end: End) -> Result<Self> {
        if visual.shape() != textual.shape() || visual.rows() != 1 {
            return Err(Error::shape("routing features", visual.shape(), textual.shape()));
        }
        if !visual.all_finite() || !textual.all_finite() {
            return Err(Error::Numerical("non-finite routing feature".into()));
        }
        Ok(Self { visual, textual, end })
    }

    pub fn end(&self) -> End {
        self.end
    }
}

/// How the visual feature is pulled out of the hidden states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualMode {
    /// The query first reads the prompt, then the visual rows.
    PromptConditioned,
    /// The query reads the visual rows directly.
    Direct,
}

/// One extractor instance: `phi`, `psi` and three cross-attention blocks.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub phi: ParamId,
    pub psi: ParamId,
    pub ca_phi1: CrossAttention,
    pub ca_phi2: CrossAttention,
    pub ca_psi: CrossAttention,
    pub dim: usize,
}

/// Stacked feature nodes for a batch: `count x dim` each.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub visual: Var,
    pub textual: Var,
    /// The prompt-conditioned query that feeds the visual stage.
    pub stage1: Var,
}

impl FeatureExtractor {
    pub fn new<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize, dim: usize, d_a: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let phi = p.add(format!("{name}.phi"), Tensor::uniform([1, dim], bound, rng));
        let psi = p.add(format!("{name}.psi"), Tensor::uniform([1, dim], bound, rng));
        let ca_phi1 = CrossAttention::new(p, &format!("{name}.ca_phi1"), dim, d, d_a, dim, false, rng);
        let ca_phi2 = CrossAttention::new(p, &format!("{name}.ca_phi2"), dim, d, d_a, dim, false, rng);
        let ca_psi = CrossAttention::new(p, &format!("{name}.ca_psi"), dim, d, d_a, dim, false, rng);
        Self {
            phi,
            psi,
            ca_phi1,
            ca_phi2,
            ca_psi,
            dim,
        }
    }

    /// Features of `count` samples from their stacked visual rows `hv`
    /// (`count * n_v x d`) and prompt rows `hp` (`count * n_p x d`).
    pub fn extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        hv: Var,
        hp: Var,
        count: usize,
        mode: VisualMode,
    ) -> Result<FeatureVars> {
        let stage1 = self.ca_phi1.forward_shared_query(g, b, b[self.phi], hp, count)?;
        let visual = match mode {
            VisualMode::PromptConditioned => self.ca_phi2.forward(g, b, stage1, hv, count)?,
            VisualMode::Direct => self.ca_phi2.forward_shared_query(g, b, b[self.phi], hv, count)?,
        };
        let textual = self.ca_psi.forward_shared_query(g, b, b[self.psi], hp, count)?;
        Ok(FeatureVars { visual, textual, stage1 })
    }

    /// The visual feature each sample would get if its visual rows were the
    /// sentinel `theta` (`n_v x d`).
    pub fn sentinel<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        feats: &FeatureVars,
        theta: Var,
        count: usize,
        mode: VisualMode,
    ) -> Result<Var> {
        let keys = if count > 1 { g.tile_rows(theta, count)? } else { theta };
        match mode {
            VisualMode::PromptConditioned => self.ca_phi2.forward(g, b, feats.stage1, keys, count),
            VisualMode::Direct => self.ca_phi2.forward_shared_query(g, b, b[self.phi], keys, count),
        }
    }
}

/// Untracked extraction for a single sample.
pub fn extract<T: Scalar>(
    store: &ParamStore<T>,
    fe: &FeatureExtractor,
    hv: &Tensor<T>,
    hp: &Tensor<T>,
    end: End,
    mode: VisualMode,
) -> Result<RoutingFeatures<T>> {
    if hp.is_empty() || hp.rows() == 0 {
        return Err(Error::Contract("routing extraction needs a non-empty prompt".into()));
    }
    let mut g = Graph::new();
    let b = store.bind_constant(&mut g);
    let (v, p) = (g.constant(hv), g.constant(hp));
    let f = fe.extract(&mut g, &b, v, p, 1, mode)?;
    RoutingFeatures::new(g.value(f.visual).clone(), g.value(f.textual).clone(), end)
}

/// Untracked sentinel feature for a single query prompt.
pub fn sentinel_feature<T: Scalar>(
    store: &ParamStore<T>,
    fe: &FeatureExtractor,
    theta: ParamId,
    hp: &Tensor<T>,
    mode: VisualMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = store.bind_constant(&mut g);
    let p = g.constant(hp);
    let hv = b[theta];
    let f = fe.extract(&mut g, &b, hv, p, 1, mode)?;
    let s = fe.sentinel(&mut g, &b, &f, b[theta], 1, mode)?;
    Ok(g.value(s).clone())
}

/// Inner product divided by `divisor`, accumulated in f64 in index order.
pub fn similarity<T: Scalar>(a: &[T], b: &[T], divisor: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity", &[a.len()], &[b.len()]));
    }
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        s += x.as_f64() * y.as_f64();
    }
    Ok(s / divisor)
}

/// Graph form: row-wise similarity of two stacked feature matrices (`m x 1`).
pub fn similarity_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, divisor: f64) -> Result<Var> {
    let p = g.mul(a, b)?;
    let s = g.sum_axis(p, 1)?;
    g.scale(s, 1.0 / divisor)
}

/// Graph form: all pairwise similarities `a b^T / divisor`.
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, divisor: f64) -> Result<Var> {
    let s = g.matmul_t(a, b)?;
    g.scale(s, 1.0 / divisor)
}
