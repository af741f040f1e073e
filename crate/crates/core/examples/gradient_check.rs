//! Central-difference check of the autodiff tape on a small slot-attention
//! style expression, and of the straight-through estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use topdown_slots::autodiff::gradcheck::check_inputs;
use topdown_slots::autodiff::Tensor;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> topdown_slots::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (k, n, d) = (3, 6, 4);
    let inputs = [random(k, d, &mut rng), random(n, d, &mut rng), random(n, d, &mut rng)];

    // softmax over slots, renormalise over positions, weighted mean of values
    let checks = check_inputs(&inputs, 1e-5, |g, v| {
        let logits = g.matmul_nt(v[0], v[1])?;
        let a = g.softmax(logits, 0)?;
        let tot = g.sum_axis(a, 1)?;
        let tot = g.add_scalar(tot, 1e-8);
        let w = g.div(a, tot)?;
        let u = g.matmul(w, v[2])?;
        let u = g.layer_norm(u, None, None)?;
        let t = g.tanh(u);
        Ok(g.sum_all(t))
    })?;
    for c in &checks {
        println!("{:<8} rel error {:.2e}", c.label, c.rel_error);
    }

    let code = random(k, d, &mut rng);
    let anchor = inputs[0].clone();
    let ste = check_inputs(&inputs[..1], 1e-5, |g, v| {
        let q = g.straight_through(v[0], &code, &anchor)?;
        let s = g.sigmoid(q);
        Ok(g.sum_all(s))
    })?;
    println!("ste      rel error {:.2e}", ste[0].rel_error);
    Ok(())
}
