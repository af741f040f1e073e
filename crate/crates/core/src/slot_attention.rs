//! Bottom-up slot attention: slots compete for input features through a
//! softmax taken over the slot axis, then aggregate them with a GRU + MLP
//! update.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::nn::{GruCell, LayerNorm, Linear, Mlp};
use crate::autodiff::{Bound, Component, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Added to the slot-normalised attention before the per-slot renormalisation.
pub const ATTN_EPS: f64 = 1e-8;

const POS_EMBED_STD: f64 = 0.1;

/// Learnable Gaussian over initial slots, sampled by reparameterisation.
#[derive(Clone, Debug)]
pub struct SlotInitDistribution {
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    BottomUp,
    Modulated,
}

#[derive(Clone, Copy, Debug)]
pub struct SlotState {
    pub slots: Var,
    pub iteration: usize,
    pub pass: Pass,
}

/// Attention of one iteration: `attn` is normalised over slots (columns sum
/// to one), `attn_rows` is `attn` renormalised over positions (rows sum to one).
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap {
    pub attn: Var,
    pub attn_rows: Var,
}

/// Input features after the adapter and layer norm, projected to keys and values.
#[derive(Clone, Copy, Debug)]
pub struct PreparedInput {
    pub features: Var,
    pub keys: Var,
    pub values: Var,
    pub positions: usize,
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub input_adapter: Linear,
    /// Learned `N × D` position embedding added after the adapter.
    pub pos_embed: ParamId,
    pub input_norm: LayerNorm,
    pub slot_norm: LayerNorm,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub gru: GruCell,
    pub pre_mlp_norm: LayerNorm,
    pub update_mlp: Mlp,
    pub init: SlotInitDistribution,
    pub dim: usize,
    pub feat_dim: usize,
    pub positions: usize,
}

impl SlotAttention {
    /// Registers parameters for slot width `dim` over `positions × feat_dim` inputs.
    /// Initial slots start at `mu ~ N(0, 0.1²)`, `sigma = init_sigma`.
    pub fn new(
        store: &mut ParamStore,
        feat_dim: usize,
        dim: usize,
        positions: usize,
        init_sigma: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mu = store.add_normal("slots.mu", 1, dim, 0.1, rng);
        let log_sigma = store.add_const("slots.log_sigma", 1, dim, init_sigma.ln());
        Self {
            input_adapter: Linear::new(store, "sa.input_adapter", feat_dim, dim, true, rng),
            pos_embed: store.add_normal("sa.pos_embed", positions, dim, POS_EMBED_STD, rng),
            input_norm: LayerNorm::new(store, "sa.input_norm", dim),
            slot_norm: LayerNorm::new(store, "sa.slot_norm", dim),
            q_proj: Linear::new(store, "sa.q", dim, dim, false, rng),
            k_proj: Linear::new(store, "sa.k", dim, dim, false, rng),
            v_proj: Linear::new(store, "sa.v", dim, dim, false, rng),
            gru: GruCell::new(store, "sa.gru", dim, dim, rng),
            pre_mlp_norm: LayerNorm::new(store, "sa.pre_mlp_norm", dim),
            update_mlp: Mlp::new(store, "sa.mlp", [dim, 2 * dim, dim], rng),
            init: SlotInitDistribution { mu, log_sigma },
            dim,
            feat_dim,
            positions,
        }
    }

    /// Adapter, layer norm and key/value projection, done once per forward.
    pub fn prepare_input(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<PreparedInput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::invalid("attention_step", format!("no input positions (shape {shape:?})")));
        }
        if shape != [self.positions, self.feat_dim] {
            return Err(Error::Shape {
                op: "prepare_input",
                lhs: shape,
                rhs: vec![self.positions, self.feat_dim],
            });
        }
        let prev = g.set_scope(Component::SlotInput);
        let h = self.input_adapter.forward(g, p, x)?;
        let h = g.add(h, p.var(self.pos_embed))?;
        let features = self.input_norm.forward(g, p, h)?;
        let keys = self.k_proj.forward(g, p, features)?;
        let values = self.v_proj.forward(g, p, features)?;
        g.set_scope(prev);
        Ok(PreparedInput {
            features,
            keys,
            values,
            positions: g.shape(x)[0],
        })
    }

    /// Draws `ε ~ N(0, I)` of shape `k × dim`.
    pub fn sample_noise(&self, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::invalid("init_slots", "number of slots must be at least 1"));
        }
        let data = (0..k * self.dim).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::matrix(k, self.dim, data)
    }

    /// `S⁰ = mu + exp(log_sigma) ⊙ ε` with fresh noise from `rng`.
    pub fn init_slots(&self, g: &mut Graph, p: &Bound, k: usize, rng: &mut impl Rng) -> Result<SlotState> {
        let noise = self.sample_noise(k, rng)?;
        self.init_slots_with_noise(g, p, noise)
    }

    pub fn init_slots_with_noise(&self, g: &mut Graph, p: &Bound, noise: Tensor) -> Result<SlotState> {
        let prev = g.set_scope(Component::SlotInput);
        let eps = g.constant(noise);
        let sigma = g.exp(p.var(self.init.log_sigma));
        let scaled = g.mul(eps, sigma)?;
        let slots = g.add(scaled, p.var(self.init.mu))?;
        g.set_scope(prev);
        Ok(SlotState {
            slots,
            iteration: 0,
            pass: Pass::BottomUp,
        })
    }

    /// Attention of `slots` over the prepared input.
    pub fn attention(&self, g: &mut Graph, p: &Bound, input: &PreparedInput, slots: Var) -> Result<AttentionMap> {
        let s = self.slot_norm.forward(g, p, slots)?;
        let q = self.q_proj.forward(g, p, s)?;
        let logits = g.matmul_nt(q, input.keys)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax(logits, 0)?;
        let padded = g.add_scalar(attn, ATTN_EPS);
        let mass = g.sum_axis(padded, 1)?;
        let attn_rows = g.div(padded, mass)?;
        Ok(AttentionMap { attn, attn_rows })
    }

    /// One attention step: the map and `U = Ã v(x)`.
    pub fn attention_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &PreparedInput,
        slots: Var,
    ) -> Result<(AttentionMap, Var)> {
        let map = self.attention(g, p, input, slots)?;
        let u = g.matmul(map.attn_rows, input.values)?;
        Ok((map, u))
    }

    /// `S' = GRU(U, S)`, then `S' + MLP(LN(S'))`.
    pub fn slot_update(&self, g: &mut Graph, p: &Bound, u: Var, prev: &SlotState) -> Result<SlotState> {
        let h = self.gru.forward(g, p, u, prev.slots)?;
        let n = self.pre_mlp_norm.forward(g, p, h)?;
        let m = self.update_mlp.forward(g, p, n)?;
        let slots = g.add(h, m)?;
        Ok(SlotState {
            slots,
            iteration: prev.iteration + 1,
            pass: prev.pass,
        })
    }

    /// `T` bottom-up iterations from `init`; returns `S^T` and the attention
    /// of the final iteration.
    pub fn run_bottom_up(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &PreparedInput,
        init: &SlotState,
        iterations: usize,
    ) -> Result<(SlotState, AttentionMap)> {
        if iterations == 0 {
            return Err(Error::invalid("run_bottom_up", "iterations must be at least 1"));
        }
        let prev = g.set_scope(Component::Pass1);
        let mut state = SlotState {
            pass: Pass::BottomUp,
            ..*init
        };
        let mut last = None;
        for _ in 0..iterations {
            let (map, u) = self.attention_step(g, p, input, state.slots)?;
            state = self.slot_update(g, p, u, &state)?;
            last = Some(map);
        }
        g.set_scope(prev);
        Ok((state, last.expect("at least one iteration")))
    }

    /// Cost of one bottom-up iteration on the tape's cost model.
    pub fn iteration_flops(&self, k: usize, n: usize) -> u64 {
        let d = self.dim;
        let attn = self.slot_norm.flops(k)
            + self.q_proj.flops(k)
            + (2 * k * d * n) as u64
            + (k * n) as u64 // scale
            + (3 * k * n) as u64 // softmax
            + (3 * k * n) as u64; // eps, row sum, divide
        let aggregate = (2 * k * n * d) as u64;
        let update = self.gru.flops(k) + self.pre_mlp_norm.flops(k) + self.update_mlp.flops(k) + (k * d) as u64;
        attn + aggregate + update
    }

    pub fn input_flops(&self, k: usize, n: usize) -> u64 {
        let d = self.dim;
        self.input_adapter.flops(n)
            + (n * d) as u64
            + self.input_norm.flops(n)
            + self.k_proj.flops(n)
            + self.v_proj.flops(n)
            + (d + 2 * k * d) as u64
    }
}
