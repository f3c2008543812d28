//! Cross-attention blocks and the generator that turns an edit sample's
//! hidden states into a low-rank expert.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Graph, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Single-head cross-attention `softmax(x Wq (y Wk)^T / sqrt(d_a)) y Wv`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub d_a: usize,
}

impl CrossAttention {
    /// Registers the three maps under `name`; `zero_value` starts `Wv` at zero.
    pub fn new<T: Scalar>(
        p: &mut ParamStore<T>,
        name: &str,
        d_x: usize,
        d_y: usize,
        d_a: usize,
        d_out: usize,
        zero_value: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = |i: usize| (3.0 / i as f64).sqrt();
        let wq = p.add(format!("{name}.wq"), Tensor::uniform([d_x, d_a], fan(d_x), rng));
        let wk = p.add(format!("{name}.wk"), Tensor::uniform([d_y, d_a], fan(d_y), rng));
        let wv_init = if zero_value {
            Tensor::zeros([d_y, d_out])
        } else {
            Tensor::uniform([d_y, d_out], fan(d_y), rng)
        };
        let wv = p.add(format!("{name}.wv"), wv_init);
        Self { wq, wk, wv, d_a }
    }

    fn spec(&self, groups: usize) -> AttentionSpec {
        AttentionSpec {
            groups,
            heads: 1,
            causal: false,
            scale: 1.0 / (self.d_a as f64).sqrt(),
        }
    }

    /// `x` holds `groups` query blocks and `y` the matching key blocks.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, y: Var, groups: usize) -> Result<Var> {
        if g.shape(y)[0] == 0 {
            return Err(Error::Contract("cross-attention over an empty key set".into()));
        }
        let q = g.matmul(x, b[self.wq])?;
        self.attend(g, b, q, y, groups)
    }

    /// Same as [`forward`](Self::forward) with one query block shared by all groups.
    pub fn forward_shared_query<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, y: Var, groups: usize) -> Result<Var> {
        let q = g.matmul(x, b[self.wq])?;
        let q = if groups > 1 { g.tile_rows(q, groups)? } else { q };
        self.attend(g, b, q, y, groups)
    }

    fn attend<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, q: Var, y: Var, groups: usize) -> Result<Var> {
        let k = g.matmul(y, b[self.wk])?;
        let v = g.matmul(y, b[self.wv])?;
        g.attention(q, k, v, self.spec(groups))
    }
}

/// Untracked cross-attention of one query block over one key block.
pub fn cross_attention<T: Scalar>(store: &ParamStore<T>, ca: &CrossAttention, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = store.bind_constant(&mut g);
    let (xv, yv) = (g.constant(x), g.constant(y));
    let out = ca.forward(&mut g, &b, xv, yv, 1)?;
    Ok(g.value(out).clone())
}

/// A generated low-rank expert.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub id: u64,
    pub t: u64,
}

/// Whether the `d <-> d_m` adapters exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterMode {
    /// `d == d_m`; experts act on hidden states directly.
    Identity,
    /// Trainable projections, initialised as rectangular identities.
    Projected,
}

#[derive(Clone, Debug)]
pub struct GeneratorIds {
    pub u_seed: ParamId,
    pub v_seed: ParamId,
    pub ca_u: CrossAttention,
    pub ca_v: CrossAttention,
    pub down: Option<ParamId>,
    pub up: Option<ParamId>,
    pub r: usize,
    pub d_m: usize,
}

impl GeneratorIds {
    pub fn new<T: Scalar>(p: &mut ParamStore<T>, d: usize, d_m: usize, d_a: usize, r: usize, rng: &mut impl Rng) -> Self {
        let fan = (3.0 / d_m as f64).sqrt();
        let u_seed = p.add("gen.u", Tensor::uniform([r, d_m], fan, rng));
        let v_seed = p.add("gen.v", Tensor::uniform([r, d_m], fan, rng));
        let ca_u = CrossAttention::new(p, "gen.ca_u", d_m, d, d_a, d_m, false, rng);
        let ca_v = CrossAttention::new(p, "gen.ca_v", d_m, d, d_a, d_m, true, rng);
        let (down, up) = if d == d_m {
            (None, None)
        } else {
            (
                Some(p.add("gen.down", Tensor::rect_eye(d, d_m))),
                Some(p.add("gen.up", Tensor::rect_eye(d_m, d))),
            )
        };
        Self {
            u_seed,
            v_seed,
            ca_u,
            ca_v,
            down,
            up,
            r,
            d_m,
        }
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        if self.down.is_some() {
            AdapterMode::Projected
        } else {
            AdapterMode::Identity
        }
    }

    /// Experts for `groups` stacked sequences `h` (each `v | p | o`), returned
    /// as stacked `groups * r x d_m` nodes.
    pub fn generate<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, h: Var, groups: usize) -> Result<(Var, Var)> {
        let u = self.ca_u.forward_shared_query(g, b, b[self.u_seed], h, groups)?;
        let v = self.ca_v.forward_shared_query(g, b, b[self.v_seed], h, groups)?;
        Ok((u, v))
    }

    /// Adds the weighted residuals of `experts` to stacked hidden rows.
    ///
    /// `h` holds `count` sequences of `n` rows; `u`, `v` stack `E` experts of
    /// `r` rows; `weights` is `count x E`.
    pub fn apply_weighted<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        h: Var,
        n: usize,
        u: Var,
        v: Var,
        weights: Var,
    ) -> Result<Var> {
        let x = match self.down {
            Some(p) => g.matmul(h, b[p])?,
            None => h,
        };
        let a = g.matmul_t(x, u)?;
        let a = g.relu(a)?;
        let m = g.expand(weights, n, self.r)?;
        let a = g.mul(a, m)?;
        let res = g.matmul(a, v)?;
        let res = match self.up {
            Some(p) => g.matmul(res, b[p])?,
            None => res,
        };
        g.add(h, res)
    }
}

/// The residual `relu((h P_dn) U_e^T) V_e P_up` of one expert.
pub fn apply_expert<T: Scalar>(store: &ParamStore<T>, ids: &GeneratorIds, h: &Tensor<T>, e: &Expert<T>) -> Result<Tensor<T>> {
    if e.u.shape() != [ids.r, ids.d_m] || e.v.shape() != [ids.r, ids.d_m] {
        return Err(Error::shape("apply_expert", e.u.shape(), &[ids.r, ids.d_m]));
    }
    let x = match ids.down {
        Some(p) => h.matmul(store.get(p))?,
        None => h.clone(),
    };
    let a = x.matmul(&e.u.transpose())?.map(|z| if z > T::zero() { z } else { T::zero() });
    let res = a.matmul(&e.v)?;
    match ids.up {
        Some(p) => res.matmul(store.get(p)),
        None => Ok(res),
    }
}
