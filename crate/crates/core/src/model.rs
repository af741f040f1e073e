//! The full two-pass model: bottom-up slot attention, bootstrapped cues,
//! self-modulated slot attention and the autoregressive decoder.

use rand::Rng;

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Bound, Component, Graph, ParamStore, Tensor, Var};
use crate::config::{Ablation, TrainConfig};
use crate::decoder::{Decoder, DecoderOutput};
use crate::error::{Error, Result};
use crate::pathway::{
    build_modulation_map, channel_modulation, quantize, run_modulated, spatial_modulation, Codebook, ModulationMap,
    QuantizedSlots, SteAnchor,
};
use crate::slot_attention::{AttentionMap, PreparedInput, SlotAttention, SlotState};

/// Output-layer weight scale of the channel MLP at initialisation.
pub const CHANNEL_INIT_SCALE: f64 = 0.1;

/// Starts `m_c` close to all-ones, so the second pass begins near the first.
fn near_identity(store: &mut ParamStore, mlp: &Mlp) {
    let w = &mut store.get_mut(mlp.fc2.weight).tensor;
    *w = w.map(|v| v * CHANNEL_INIT_SCALE);
    if let Some(b) = mlp.fc2.bias {
        let b = &mut store.get_mut(b).tensor;
        *b = Tensor::ones(b.shape());
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub slot_attention: SlotAttention,
    pub codebook: Codebook,
    pub channel_mlp: Mlp,
    pub decoder: Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub recon: Var,
    /// Absent when quantisation is switched off.
    pub vq: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Freeze quantisation to this anchor (finite-difference checks).
    pub ste_anchor: Option<SteAnchor>,
    /// Also decode the pass-1 slots (for before/after evaluation).
    pub decode_bottom_up: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub x: Var,
    pub input: PreparedInput,
    pub init: SlotState,
    pub slots: SlotState,
    pub attn: AttentionMap,
    pub quantized: Option<QuantizedSlots>,
    pub modulation: ModulationMap,
    pub slots_mod: SlotState,
    pub attn_mod: AttentionMap,
    pub decoded: DecoderOutput,
    pub decoded_bottom_up: Option<DecoderOutput>,
    pub losses: Losses,
}

impl Model {
    pub fn new(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.slot_dim;
        let slot_attention = SlotAttention::new(&mut store, cfg.data.feat_dim, d, cfg.positions(), cfg.init_sigma, rng);
        let codebook = Codebook::new(&mut store, cfg.codebook_size, d, cfg.init_sigma, rng)?;
        let channel_mlp = Mlp::new(&mut store, "pathway.m_c", [d, d, d], rng);
        near_identity(&mut store, &channel_mlp);
        let decoder = Decoder::new(&mut store, cfg.decoder(), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            slot_attention,
            codebook,
            channel_mlp,
            decoder,
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.cfg.ablation
    }

    /// Initial-slot noise for one sample.
    pub fn sample_noise(&self, rng: &mut impl Rng) -> Result<Tensor> {
        self.slot_attention.sample_noise(self.cfg.slots, rng)
    }

    /// Pass 1, bootstrap, pass 2, decode, losses.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: &Tensor,
        noise: Tensor,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (n, f) = (self.cfg.positions(), self.cfg.data.feat_dim);
        if x.shape() != [n, f] {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![n, f],
            });
        }
        let (k, d, t) = (self.cfg.slots, self.cfg.slot_dim, self.cfg.iterations);
        if noise.shape() != [k, d] {
            return Err(Error::Shape {
                op: "forward",
                lhs: noise.shape().to_vec(),
                rhs: vec![k, d],
            });
        }
        let ab = self.cfg.ablation;
        let sa = &self.slot_attention;
        let xv = g.constant(x.clone());
        let input = sa.prepare_input(g, p, xv)?;
        let init = sa.init_slots_with_noise(g, p, noise)?;
        let (slots, attn) = sa.run_bottom_up(g, p, &input, &init, t)?;

        let quantized = if ab.use_vq {
            Some(quantize(g, p, &self.codebook, slots.slots, opts.ste_anchor.as_ref())?)
        } else {
            None
        };
        let prev = g.set_scope(Component::Pathway);
        let channel = if ab.use_m_c {
            let cues = quantized.as_ref().map_or(slots.slots, |q| q.codes);
            channel_modulation(g, p, &self.channel_mlp, cues)?
        } else {
            g.constant(Tensor::ones(&[k, d]))
        };
        let spatial = match (ab.use_m_s, ab.use_shift) {
            (false, _) => g.constant(Tensor::ones(&[k, n])),
            (true, true) => spatial_modulation(g, attn.attn)?,
            (true, false) => attn.attn,
        };
        let modulation = build_modulation_map(g, channel, spatial)?;
        g.set_scope(prev);

        let (slots_mod, attn_mod) = run_modulated(g, p, sa, &input, &init, &modulation, t)?;
        let decoded = self.decoder.decode(g, p, xv, slots_mod.slots)?;
        let decoded_bottom_up = if opts.decode_bottom_up {
            Some(self.decoder.decode(g, p, xv, slots.slots)?)
        } else {
            None
        };
        let losses = compute_losses(
            g,
            decoded.recon,
            xv,
            slots.slots,
            quantized.as_ref().map(|q| q.selected),
            self.cfg.vq_weight,
        )?;
        Ok(ForwardOutput {
            x: xv,
            input,
            init,
            slots,
            attn,
            quantized,
            modulation,
            slots_mod,
            attn_mod,
            decoded,
            decoded_bottom_up,
            losses,
        })
    }
}

/// `L_recon = mse(recon, x)`, `L_vq = mse(sg(S), C*)`, `L = L_recon + λ L_vq`.
pub fn compute_losses(
    g: &mut Graph,
    recon: Var,
    x: Var,
    slots: Var,
    selected: Option<Var>,
    vq_weight: f64,
) -> Result<Losses> {
    let prev = g.set_scope(Component::Loss);
    let target = g.detach(x);
    let recon_loss = g.mse(recon, target)?;
    let (vq, total) = match selected {
        Some(c) => {
            let s = g.detach(slots);
            let vq = g.mse(s, c)?;
            let weighted = g.scale(vq, vq_weight);
            (Some(vq), g.add(recon_loss, weighted)?)
        }
        None => (None, recon_loss),
    };
    g.set_scope(prev);
    Ok(Losses {
        recon: recon_loss,
        vq,
        total,
    })
}
