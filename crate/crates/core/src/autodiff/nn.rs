//! Layers assembled from tape primitives.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(&format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = bias.then(|| store.add_const(&format!("{name}.bias"), 1, out_dim, 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W (+ b)` for row-major `x` of shape `m × in_dim`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn flops(&self, rows: usize) -> u64 {
        let mm = 2 * rows * self.in_dim * self.out_dim;
        let b = if self.bias.is_some() { rows * self.out_dim } else { 0 };
        (mm + b) as u64
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.fc1.flops(rows) + (rows * self.fc1.out_dim) as u64 + self.fc2.flops(rows)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_const(&format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_const(&format!("{name}.bias"), 1, dim, 0.0),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, Some(p.var(self.gain)), Some(p.var(self.bias)))
    }

    pub fn flops(&self, rows: usize) -> u64 {
        (7 * rows * self.dim) as u64
    }
}

/// Gated recurrent unit with reset, update and candidate gates.
///
/// `r = σ(Wᵢᵣu + bᵢᵣ + Wₕᵣh + bₕᵣ)`, `z = σ(Wᵢ_z u + … )`,
/// `n = tanh(Wᵢₙu + bᵢₙ + r ⊙ (Wₕₙh + bₕₙ))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
/// Gate blocks are laid out `[r | z | n]` along the output columns.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), in_dim, 3 * hidden_dim, true, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), hidden_dim, 3 * hidden_dim, true, rng),
            hidden_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, u: Var, h: Var) -> Result<Var> {
        let d = self.hidden_dim;
        let gi = self.input.forward(g, p, u)?;
        let gh = self.hidden.forward(g, p, h)?;
        let (ir, iz, in_) = (g.slice_cols(gi, 0, d)?, g.slice_cols(gi, d, d)?, g.slice_cols(gi, 2 * d, d)?);
        let (hr, hz, hn) = (g.slice_cols(gh, 0, d)?, g.slice_cols(gh, d, d)?, g.slice_cols(gh, 2 * d, d)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(in_, rn)?;
        let n = g.tanh(n);
        let neg_z = g.scale(z, -1.0);
        let one_minus_z = g.add_scalar(neg_z, 1.0);
        let a = g.mul(one_minus_z, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        self.input.flops(rows) + self.hidden.flops(rows) + (12 * rows * self.hidden_dim) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar GRU written directly from the gate equations.
    fn scalar_gru(wi: &Tensor, bi: &Tensor, wh: &Tensor, bh: &Tensor, u: &[f64], h: &[f64]) -> Vec<f64> {
        let d = h.len();
        let lin = |w: &Tensor, b: &Tensor, x: &[f64], col: usize| -> f64 {
            b.data()[col] + (0..x.len()).map(|i| x[i] * w.get(i, col)).sum::<f64>()
        };
        (0..d)
            .map(|j| {
                let r = sigmoid(lin(wi, bi, u, j) + lin(wh, bh, h, j));
                let z = sigmoid(lin(wi, bi, u, d + j) + lin(wh, bh, h, d + j));
                let n = (lin(wi, bi, u, 2 * d + j) + r * lin(wh, bh, h, 2 * d + j)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    fn run(store: &ParamStore, cell: &GruCell, u: &Tensor, h: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (uv, hv) = (g.constant(u.clone()), g.constant(h.clone()));
        let out = cell.forward(&mut g, &p, uv, hv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn gru_zero_weights_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng);
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let u = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let h = Tensor::matrix(1, 4, vec![0.5, -0.25, 1.5, -2.0]).unwrap();
        let got = run(&store, &cell, &u, &h);
        let get = |id: ParamId| store.get(id).tensor.clone();
        let want = scalar_gru(
            &get(cell.input.weight),
            &get(cell.input.bias.unwrap()),
            &get(cell.hidden.weight),
            &get(cell.hidden.bias.unwrap()),
            u.data(),
            h.data(),
        );
        // zero weights: r = z = 1/2, n = 0, h' = h/2
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((got.data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn gru_random_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 5, 3, &mut rng);
        for p in store.iter_mut() {
            let n = p.tensor.numel();
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + n) % 11) as f64 / 11.0 - 0.5;
            }
        }
        let u = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h = Tensor::matrix(2, 3, (0..6).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let got = run(&store, &cell, &u, &h);
        let get = |id: ParamId| store.get(id).tensor.clone();
        for r in 0..2 {
            let want = scalar_gru(
                &get(cell.input.weight),
                &get(cell.input.bias.unwrap()),
                &get(cell.hidden.weight),
                &get(cell.hidden.bias.unwrap()),
                u.row_slice(r),
                h.row_slice(r),
            );
            for (a, b) in got.row_slice(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}
