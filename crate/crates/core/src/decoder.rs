//! Autoregressive transformer decoder that reconstructs the feature sequence
//! from the slots under teacher forcing. Its slot cross-attention doubles as
//! the predicted segmentation.

use rand::Rng;

use crate::autodiff::nn::{LayerNorm, Linear, Mlp};
use crate::autodiff::{Bound, Component, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub width: usize,
    pub slot_dim: usize,
    pub positions: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.positions == 0 || self.width == 0 || self.slot_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
        }
    }

    /// Returns the output and each head's `queries × keys` attention.
    fn forward(&self, g: &mut Graph, p: &Bound, query: Var, kv: Var, causal: bool) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, kv)?;
        let v = self.v.forward(g, p, kv)?;
        let width = g.shape(q)[1];
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = if causal { g.causal_softmax(s)? } else { g.softmax(s, 1)? };
            outs.push(g.matmul(a, vh)?);
            maps.push(a);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((self.out.forward(g, p, merged)?, maps))
    }

    fn flops(&self, nq: usize, nk: usize, width: usize) -> u64 {
        let dh = width / self.heads;
        let per_head = 2 * nq * dh * nk + nq * nk + 3 * nq * nk + 2 * nq * nk * dh;
        self.q.flops(nq) + self.k.flops(nk) + self.v.flops(nk) + self.out.flops(nq) + (self.heads * per_head) as u64
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub slot_proj: Linear,
    pub bos: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub recon: Var,
    /// `cross_attn[block][head]` is `N × K`, each row a distribution over slots.
    pub cross_attn: Vec<Vec<Var>>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let slot_proj = Linear::new(store, "dec.slot_proj", cfg.slot_dim, w, true, rng);
        let bos = store.add_normal("dec.bos", 1, w, 0.02, rng);
        let pos_embed = store.add_normal("dec.pos_embed", cfg.positions, w, 0.02, rng);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let n = format!("dec.block{b}");
                DecoderBlock {
                    self_norm: LayerNorm::new(store, &format!("{n}.self_norm"), w),
                    self_attn: MultiHeadAttention::new(store, &format!("{n}.self_attn"), w, cfg.heads, rng),
                    cross_norm: LayerNorm::new(store, &format!("{n}.cross_norm"), w),
                    cross_attn: MultiHeadAttention::new(store, &format!("{n}.cross_attn"), w, cfg.heads, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{n}.ffn_norm"), w),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), [w, cfg.ffn_mult * w, w], rng),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            slot_proj,
            bos,
            pos_embed,
            blocks,
            final_norm: LayerNorm::new(store, "dec.final_norm", w),
            head: Linear::new(store, "dec.head", w, w, true, rng),
        })
    }

    /// Teacher-forced reconstruction: position `n` sees `[BOS, x₀ … x_{n−1}]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, x: Var, slots: Var) -> Result<DecoderOutput> {
        let (n, f) = (g.shape(x)[0], g.shape(x)[1]);
        if n == 0 {
            return Err(Error::invalid("decode", "empty feature sequence"));
        }
        if n != self.cfg.positions || f != self.cfg.width {
            return Err(Error::Shape {
                op: "decode",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.cfg.positions, self.cfg.width],
            });
        }
        if g.shape(slots)[1] != self.cfg.slot_dim {
            return Err(Error::Shape {
                op: "decode",
                lhs: g.shape(slots).to_vec(),
                rhs: vec![0, self.cfg.slot_dim],
            });
        }
        let prev = g.set_scope(Component::Decoder);
        let bos = p.var(self.bos);
        let seq = if n == 1 {
            bos
        } else {
            let shifted: Vec<usize> = (0..n - 1).collect();
            let body = g.gather_rows(x, &shifted)?;
            g.concat(&[bos, body], 0)?
        };
        let mut h = g.add(seq, p.var(self.pos_embed))?;
        let mut cross_attn = Vec::with_capacity(self.blocks.len());
        if !self.blocks.is_empty() {
            let memory = self.slot_proj.forward(g, p, slots)?;
            for b in &self.blocks {
                let a = b.self_norm.forward(g, p, h)?;
                let (a, _) = b.self_attn.forward(g, p, a, a, true)?;
                h = g.add(h, a)?;
                let c = b.cross_norm.forward(g, p, h)?;
                let (c, maps) = b.cross_attn.forward(g, p, c, memory, false)?;
                h = g.add(h, c)?;
                let m = b.ffn_norm.forward(g, p, h)?;
                let m = b.ffn.forward(g, p, m)?;
                h = g.add(h, m)?;
                cross_attn.push(maps);
            }
        }
        let out = self.final_norm.forward(g, p, h)?;
        let recon = self.head.forward(g, p, out)?;
        g.set_scope(prev);
        Ok(DecoderOutput { recon, cross_attn })
    }

    /// Embedding add, final norm and projection: all a zero-block decoder does.
    pub fn output_head_flops(&self) -> u64 {
        let (n, w) = (self.cfg.positions, self.cfg.width);
        (n * w) as u64 + self.final_norm.flops(n) + self.head.flops(n)
    }

    pub fn flops(&self, k: usize) -> u64 {
        let (n, w) = (self.cfg.positions, self.cfg.width);
        let mut total = self.output_head_flops();
        if self.blocks.is_empty() {
            return total;
        }
        total += self.slot_proj.flops(k);
        for b in &self.blocks {
            total += b.self_norm.flops(n) + b.cross_norm.flops(n) + b.ffn_norm.flops(n);
            total += b.self_attn.flops(n, n, w) + b.cross_attn.flops(n, k, w);
            total += b.ffn.flops(n) + (3 * n * w) as u64;
        }
        total
    }
}

/// Averages per-head `N × K` maps into `K × N` soft masks and takes the
/// per-position argmax (ties to the lowest slot).
pub fn masks_from_maps(maps: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("extract_masks", "decoder has no cross-attention maps"))?;
    let (n, k) = (first.rows(), first.cols());
    let mut soft = vec![0.0; k * n];
    for m in maps {
        if m.rows() != n || m.cols() != k {
            return Err(Error::Shape {
                op: "extract_masks",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for pos in 0..n {
            for s in 0..k {
                soft[s * n + pos] += m.get(pos, s);
            }
        }
    }
    let count = maps.len() as f64;
    soft.iter_mut().for_each(|v| *v /= count);
    let labels = (0..n)
        .map(|pos| {
            let mut best = 0;
            for s in 1..k {
                if soft[s * n + pos] > soft[best * n + pos] {
                    best = s;
                }
            }
            best
        })
        .collect();
    Ok((Tensor::from_parts(vec![k, n], soft), labels))
}

/// Soft `K × N` masks and hard labels from the decoder's cross-attention,
/// averaged over every block and head or over the last block only.
pub fn extract_masks(g: &Graph, out: &DecoderOutput, last_block_only: bool) -> Result<(Tensor, Vec<usize>)> {
    let blocks: &[Vec<Var>] = if last_block_only {
        out.cross_attn.last().map(std::slice::from_ref).unwrap_or(&[])
    } else {
        &out.cross_attn
    };
    let maps: Vec<&Tensor> = blocks.iter().flatten().map(|&v| g.value(v)).collect();
    masks_from_maps(&maps)
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

    fn build(cfg: DecoderConfig, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, d)
    }

    fn run(store: &ParamStore, d: &Decoder, x: &Tensor, s: &Tensor) -> (Graph, DecoderOutput) {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let sv = g.constant(s.clone());
        let out = d.decode(&mut g, &p, xv, sv).unwrap();
        (g, out)
    }

    const SMALL: DecoderConfig = DecoderConfig {
        width: 8,
        slot_dim: 6,
        positions: 6,
        blocks: 2,
        heads: 2,
        ffn_mult: 4,
    };

    #[test]
    fn reconstruction_is_causal() {
        let (store, d) = build(SMALL, 1);
        let x = randn(6, 8, 2);
        let s = randn(3, 6, 3);
        let (g0, o0) = run(&store, &d, &x, &s);
        for j in 0..6 {
            let mut xp = x.clone();
            for c in 0..8 {
                xp.data_mut()[j * 8 + c] += 0.75;
            }
            let (g1, o1) = run(&store, &d, &xp, &s);
            for i in 0..=j {
                assert_eq!(g0.value(o0.recon).row_slice(i), g1.value(o1.recon).row_slice(i), "pos {i} saw x[{j}]");
            }
            if j + 1 < 6 {
                assert_ne!(g0.value(o0.recon).row_slice(j + 1), g1.value(o1.recon).row_slice(j + 1));
            }
        }
    }

    #[test]
    fn single_slot_cross_attention_is_one() {
        let (store, d) = build(SMALL, 1);
        let (g, o) = run(&store, &d, &randn(6, 8, 2), &randn(1, 6, 3));
        for maps in &o.cross_attn {
            for &m in maps {
                assert!(g.value(m).data().iter().all(|&v| v == 1.0));
            }
        }
        let (soft, labels) = extract_masks(&g, &o, false).unwrap();
        assert!(soft.data().iter().all(|&v| v == 1.0));
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn argmax_labels_from_hand_built_maps() {
        let m = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.7, 0.3, 0.2, 0.8, 0.4, 0.6]).unwrap();
        let (_, labels) = masks_from_maps(&[&m]).unwrap();
        assert_eq!(labels, vec![0, 0, 1, 1]);
        let tie = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(masks_from_maps(&[&tie]).unwrap().1, vec![0]);
    }

    #[test]
    fn flat_mean_equals_nested_mean() {
        let maps: Vec<Vec<Tensor>> = (0..3)
            .map(|b| {
                (0..4)
                    .map(|h| {
                        let raw = randn(5, 3, 10 * b + h);
                        raw.map(f64::exp)
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<&Tensor> = maps.iter().flatten().collect();
        let (soft, _) = masks_from_maps(&flat).unwrap();
        for s in 0..3 {
            for pos in 0..5 {
                let per_block: Vec<f64> = maps
                    .iter()
                    .map(|hs| hs.iter().map(|t| t.get(pos, s)).sum::<f64>() / hs.len() as f64)
                    .collect();
                let nested = per_block.iter().sum::<f64>() / per_block.len() as f64;
                assert!((nested - soft.get(s, pos)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_input() {
        let (store, d) = build(SMALL, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(randn(5, 8, 1));
        let s = g.constant(randn(2, 6, 1));
        assert!(d.decode(&mut g, &p, x, s).is_err());
        let bad = DecoderConfig { heads: 3, ..SMALL };
        assert!(bad.validate().is_err());
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn ln(v: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(i, x)| (x - mean) / (var + 1e-5).sqrt() * gain.data()[i] + bias.data()[i])
            .collect()
    }

    fn lin(v: &[f64], l: &Linear, store: &ParamStore) -> Vec<f64> {
        let w = &store.get(l.weight).tensor;
        (0..w.cols())
            .map(|c| {
                let b = l.bias.map_or(0.0, |b| store.get(b).tensor.data()[c]);
                b + (0..v.len()).map(|r| v[r] * w.get(r, c)).sum::<f64>()
            })
            .collect()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn tiny_decoder_matches_scalar_reference() {
        let cfg = DecoderConfig {
            width: 3,
            slot_dim: 2,
            positions: 4,
            blocks: 1,
            heads: 1,
            ffn_mult: 2,
        };
        let (store, d) = build(cfg, 7);
        let x = randn(4, 3, 8);
        let s = randn(2, 2, 9);
        let (g, out) = run(&store, &d, &x, &s);

        let t = |id: ParamId| store.get(id).tensor.clone();
        let b = &d.blocks[0];
        let attend = |qs: &[Vec<f64>], kvs: &[Vec<f64>], mha: &MultiHeadAttention, causal: bool| {
            let q: Vec<Vec<f64>> = qs.iter().map(|r| lin(r, &mha.q, &store)).collect();
            let k: Vec<Vec<f64>> = kvs.iter().map(|r| lin(r, &mha.k, &store)).collect();
            let v: Vec<Vec<f64>> = kvs.iter().map(|r| lin(r, &mha.v, &store)).collect();
            let mut outs = Vec::new();
            let mut maps = Vec::new();
            for (i, qi) in q.iter().enumerate() {
                let len = if causal { i + 1 } else { k.len() };
                let logits: Vec<f64> = (0..len)
                    .map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 3f64.sqrt())
                    .collect();
                let a = softmax(&logits);
                let o: Vec<f64> = (0..3).map(|c| (0..len).map(|j| a[j] * v[j][c]).sum()).collect();
                outs.push(lin(&o, &mha.out, &store));
                maps.push(a);
            }
            (outs, maps)
        };
        let mem: Vec<Vec<f64>> = (0..2).map(|i| lin(s.row_slice(i), &d.slot_proj, &store)).collect();
        let pos = t(d.pos_embed);
        let mut h: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let src = if i == 0 { t(d.bos).data().to_vec() } else { x.row_slice(i - 1).to_vec() };
                add(&src, pos.row_slice(i))
            })
            .collect();
        let normed: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &t(b.self_norm.gain), &t(b.self_norm.bias))).collect();
        let (sa, _) = attend(&normed, &normed, &b.self_attn, true);
        h = h.iter().zip(&sa).map(|(a, b)| add(a, b)).collect();
        let normed: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &t(b.cross_norm.gain), &t(b.cross_norm.bias))).collect();
        let (ca, cmaps) = attend(&normed, &mem, &b.cross_attn, false);
        h = h.iter().zip(&ca).map(|(a, b)| add(a, b)).collect();
        let want: Vec<Vec<f64>> = h
            .iter()
            .map(|r| {
                let m = ln(r, &t(b.ffn_norm.gain), &t(b.ffn_norm.bias));
                let hid: Vec<f64> = lin(&m, &b.ffn.fc1, &store).iter().map(|v| v.max(0.0)).collect();
                let r2 = add(r, &lin(&hid, &b.ffn.fc2, &store));
                lin(&ln(&r2, &t(d.final_norm.gain), &t(d.final_norm.bias)), &d.head, &store)
            })
            .collect();
        for i in 0..4 {
            for c in 0..3 {
                let got = g.value(out.recon).get(i, c);
                assert!((got - want[i][c]).abs() < 1e-10, "recon[{i}][{c}] {got} vs {}", want[i][c]);
            }
            for k in 0..2 {
                assert!((g.value(out.cross_attn[0][0]).get(i, k) - cmaps[i][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_block_decoder_costs_only_the_head() {
        let cfg = DecoderConfig { blocks: 0, ..SMALL };
        let (store, d) = build(cfg, 1);
        let (g, _) = run(&store, &d, &randn(6, 8, 2), &randn(3, 6, 3));
        assert_eq!(d.flops(3), d.output_head_flops());
        assert_eq!(g.flops(Component::Decoder), d.flops(3));
    }
}
