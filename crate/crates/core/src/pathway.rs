//! Top-down pathway: bootstrapped semantic ("what") and spatial ("where") cues
//! from the bottom-up pass, and the self-modulating second pass they drive.

use rand::Rng;

use crate::autodiff::nn::Mlp;
use crate::autodiff::{Bound, Component, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::slot_attention::{AttentionMap, Pass, PreparedInput, SlotAttention, SlotState};

/// Learnable `E × D` code matrix. It is trained only by the VQ loss.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub codes: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    /// Codes start i.i.d. `N(0, std²)`.
    pub fn new(store: &mut ParamStore, size: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid("codebook", format!("size must be at least 2, got {size}")));
        }
        let codes = store.add_normal("codebook", size, dim, std, rng);
        Ok(Self { codes, size, dim })
    }
}

/// Per-code selection counts over one logging window.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeUsage {
    pub counts: Vec<u64>,
}

impl CodeUsage {
    pub fn new(size: usize) -> Self {
        Self { counts: vec![0; size] }
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.counts[i] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn perplexity(&self) -> Result<f64> {
        perplexity(&self.counts)
    }
}

/// Exponent of the entropy of the empirical usage distribution (`0 ln 0 = 0`).
pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("perplexity", "all usage counts are zero"));
    }
    let t = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// Index of the nearest code (squared Euclidean) for each row of `slots`;
/// ties go to the lowest index.
pub fn nearest_codes(slots: &Tensor, codes: &[f64], dim: usize) -> Result<Vec<usize>> {
    if dim == 0 || codes.is_empty() {
        return Err(Error::invalid("quantize", "empty codebook"));
    }
    if slots.cols() != dim || !codes.len().is_multiple_of(dim) {
        return Err(Error::Shape {
            op: "quantize",
            lhs: slots.shape().to_vec(),
            rhs: vec![codes.len() / dim.max(1), dim],
        });
    }
    Ok((0..slots.rows())
        .map(|r| {
            let s = slots.row_slice(r);
            let mut best = (0, f64::INFINITY);
            for (e, c) in codes.chunks(dim).enumerate() {
                let d2: f64 = s.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.1 {
                    best = (e, d2);
                }
            }
            best.0
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct QuantizedSlots {
    /// Straight-through output: forward value equals the selected codes.
    pub codes: Var,
    /// The selected codebook rows as a differentiable gather (feeds the VQ loss).
    pub selected: Var,
    pub indices: Vec<usize>,
}

/// Fixed quantisation used to evaluate the straight-through surrogate.
#[derive(Clone, Debug)]
pub struct SteAnchor {
    pub indices: Vec<usize>,
    pub slots: Tensor,
}

/// Maps each slot to its nearest code.
///
/// With `anchor = None` the indices come from the current slot values and the
/// forward output is bit-identical to the codebook rows. With an anchor the
/// indices and the subtracted reference are frozen, giving a smooth function
/// of the slots whose derivative is the straight-through rule.
pub fn quantize(
    g: &mut Graph,
    p: &Bound,
    codebook: &Codebook,
    slots: Var,
    anchor: Option<&SteAnchor>,
) -> Result<QuantizedSlots> {
    let prev = g.set_scope(Component::Pathway);
    let code_var = p.var(codebook.codes);
    let (indices, anchor_vals) = match anchor {
        Some(a) => (a.indices.clone(), a.slots.clone()),
        None => {
            let idx = nearest_codes(g.value(slots), g.value(code_var).data(), codebook.dim)?;
            (idx, g.value(slots).clone())
        }
    };
    let k = g.shape(slots)[0];
    g.record_flops((3 * k * codebook.size * codebook.dim) as u64);
    let selected = g.gather_rows(code_var, &indices)?;
    let code_vals = g.value(selected).clone();
    let codes = g.straight_through(slots, &code_vals, &anchor_vals)?;
    g.set_scope(prev);
    Ok(QuantizedSlots {
        codes,
        selected,
        indices,
    })
}

/// `m_c = MLP(c*)`, one channel vector per slot.
pub fn channel_modulation(g: &mut Graph, p: &Bound, mlp: &Mlp, codes: Var) -> Result<Var> {
    let prev = g.set_scope(Component::Pathway);
    let out = mlp.forward(g, p, codes);
    g.set_scope(prev);
    out
}

/// `m_s = 1 + (a − mean(a))` row-wise.
pub fn spatial_modulation(g: &mut Graph, attn: Var) -> Result<Var> {
    let prev = g.set_scope(Component::Pathway);
    let mean = g.mean_axis(attn, 1)?;
    let centered = g.sub(attn, mean)?;
    let out = g.add_scalar(centered, 1.0);
    g.set_scope(prev);
    Ok(out)
}

/// Channel vectors, spatial vectors and their per-slot outer products.
#[derive(Clone, Debug)]
pub struct ModulationMap {
    pub channel: Var,
    pub spatial: Var,
    /// `maps[k]` is the `N × D` matrix `m_s[k] ⊗ m_c[k]`.
    pub maps: Vec<Var>,
}

pub fn build_modulation_map(g: &mut Graph, channel: Var, spatial: Var) -> Result<ModulationMap> {
    let (kc, ks) = (g.shape(channel)[0], g.shape(spatial)[0]);
    if kc != ks {
        return Err(Error::Shape {
            op: "build_modulation_map",
            lhs: g.shape(channel).to_vec(),
            rhs: g.shape(spatial).to_vec(),
        });
    }
    let prev = g.set_scope(Component::Pathway);
    let mut maps = Vec::with_capacity(kc);
    for k in 0..kc {
        let s = g.gather_rows(spatial, &[k])?;
        let c = g.gather_rows(channel, &[k])?;
        maps.push(g.outer(s, c)?);
    }
    g.set_scope(prev);
    Ok(ModulationMap {
        channel,
        spatial,
        maps,
    })
}

/// Self-modulating slot attention: `T` iterations with the shared weights,
/// each aggregating `u_k = Ã_k (M_k ⊙ v(x))`. `M` is held fixed throughout.
pub fn run_modulated(
    g: &mut Graph,
    p: &Bound,
    sa: &SlotAttention,
    input: &PreparedInput,
    init: &SlotState,
    modulation: &ModulationMap,
    iterations: usize,
) -> Result<(SlotState, AttentionMap)> {
    let k = g.shape(init.slots)[0];
    let want = [input.positions, sa.dim];
    if modulation.maps.len() != k || modulation.maps.iter().any(|&m| g.shape(m) != want) {
        let got = modulation.maps.first().map(|&m| g.shape(m).to_vec()).unwrap_or_default();
        return Err(Error::Shape {
            op: "run_modulated",
            lhs: vec![modulation.maps.len(), got.first().copied().unwrap_or(0), got.get(1).copied().unwrap_or(0)],
            rhs: vec![k, input.positions, sa.dim],
        });
    }
    if iterations == 0 {
        return Err(Error::invalid("run_modulated", "iterations must be at least 1"));
    }
    let prev = g.set_scope(Component::Pass2);
    let mut state = SlotState {
        pass: Pass::Modulated,
        ..*init
    };
    let mut last = None;
    for _ in 0..iterations {
        let map = sa.attention(g, p, input, state.slots)?;
        let u = g.modulated_aggregate(map.attn_rows, &modulation.maps, input.values)?;
        state = sa.slot_update(g, p, u, &state)?;
        last = Some(map);
    }
    g.set_scope(prev);
    Ok((state, last.expect("at least one iteration")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeStat {
    pub index: usize,
    pub usage: u64,
    pub nearest_other: f64,
}

/// Usage and distance to the closest other code, for every code.
pub fn codebook_report(codes: &Tensor, usage: &[u64]) -> Vec<CodeStat> {
    let e = codes.rows();
    (0..e)
        .map(|i| {
            let nearest_other = (0..e)
                .filter(|&j| j != i)
                .map(|j| {
                    codes
                        .row_slice(i)
                        .iter()
                        .zip(codes.row_slice(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            CodeStat {
                index: i,
                usage: usage.get(i).copied().unwrap_or(0),
                nearest_other,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn nearest_by_inspection() {
        let slots = Tensor::row(vec![0.9, 1.2]);
        let idx = nearest_codes(&slots, &[0.0, 0.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // slot at the origin, codes 0 and 3 both at distance 1
        let slots = Tensor::row(vec![0.0, 0.0]);
        let codes = [1.0, 0.0, 5.0, 5.0, 3.0, 3.0, 0.0, -1.0];
        assert_eq!(nearest_codes(&slots, &codes, 2).unwrap(), vec![0]);
    }

    #[test]
    fn empty_codebook_errors() {
        let slots = Tensor::row(vec![0.0, 0.0]);
        assert!(nearest_codes(&slots, &[], 2).is_err());
    }

    #[test]
    fn quantized_rows_are_codebook_rows_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, 7, 5, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.leaf(randn(4, 5, 9));
        let q = quantize(&mut g, &p, &cb, s, None).unwrap();
        let codes = store.get(cb.codes).tensor.clone();
        for (k, &i) in q.indices.iter().enumerate() {
            assert_eq!(g.value(q.codes).row_slice(k), codes.row_slice(i));
        }
        let again = nearest_codes(g.value(q.codes), codes.data(), 5).unwrap();
        assert_eq!(again, q.indices);
    }

    #[test]
    fn ste_gradient_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, 6, 3, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let s = g.leaf(randn(2, 3, 1));
        let q = quantize(&mut g, &p, &cb, s, None).unwrap();
        let sq = g.mul(q.codes, q.codes).unwrap();
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        let want = g.value(q.codes).map(|v| 2.0 * v);
        assert_eq!(g.grad(s), want);
        // the straight-through path sends nothing to the codebook
        assert!(g.grad(p.var(cb.codes)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_modulation_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.5, 0.3, 0.2, 0.25, 0.25, 0.25]).unwrap());
        let ms = spatial_modulation(&mut g, a).unwrap();
        let v = g.value(ms);
        let want = [1.0 + 0.5 - 1.0 / 3.0, 1.0 + 0.3 - 1.0 / 3.0, 1.0 + 0.2 - 1.0 / 3.0];
        for (x, y) in v.row_slice(0).iter().zip(want) {
            assert!((x - y).abs() < 1e-4);
        }
        assert!((v.get(0, 0) - 1.1667).abs() < 1e-4);
        assert_eq!(v.row_slice(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_weight_channel_mlp_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mc", [4, 4, 4], &mut rng);
        store.get_mut(mlp.fc2.weight).tensor.data_mut().fill(0.0);
        store.get_mut(mlp.fc2.bias.unwrap()).tensor.data_mut().copy_from_slice(&[0.1, -0.2, 0.3, 1.5]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let c = g.constant(randn(3, 4, 2));
        let mc = channel_modulation(&mut g, &p, &mlp, c).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(mc).row_slice(r), &[0.1, -0.2, 0.3, 1.5]);
        }
    }

    #[test]
    fn modulation_map_is_outer_product() {
        let mut g = Graph::new();
        let mc = g.constant(randn(2, 3, 1));
        let ms = g.constant(Tensor::ones(&[2, 4]));
        let map = build_modulation_map(&mut g, mc, ms).unwrap();
        for (k, &m) in map.maps.iter().enumerate() {
            for r in 0..4 {
                assert_eq!(g.value(m).row_slice(r), g.value(mc).row_slice(k));
            }
        }
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&[5, 5, 5, 5]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0, 9, 0]).unwrap(), 1.0);
        assert!((perplexity(&[2, 1, 1]).unwrap() - 2f64.powf(1.5)).abs() < 1e-12);
        assert!(perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn report_finds_nearest_other_code() {
        let codes = Tensor::matrix(3, 2, vec![0.0, 0.0, 3.0, 4.0, 0.0, 1.0]).unwrap();
        let r = codebook_report(&codes, &[4, 0, 1]);
        assert_eq!(r[0].nearest_other, 1.0);
        assert_eq!(r[1].nearest_other, 18f64.sqrt());
        assert_eq!(r[0].usage, 4);
    }
}
