//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use plate_restore::numerics::{Rng, Tape, Tensor, Var};
use plate_restore::Result;

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of a scalar function of several tensors.
///
/// Returns `(max relative error, number of entries checked)` comparing the
/// tape gradients against `(f(x+h) - f(x-h)) / 2h`, entry by entry.
/// `pick` selects which flat entries of each input are checked (all when
/// `None`).
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    h: f64,
    pick: Option<&dyn Fn(usize, usize) -> bool>,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> (f64, usize) {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars).expect("forward");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for j in 0..x.len() {
            if let Some(p) = pick {
                if !p(k, j) {
                    continue;
                }
            }
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Fixed random weights to contract an op's output into a scalar.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Rng::new(seed).normal_tensor::<f64>(&shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn psnr_f64(a: &[f64], b: &[f64], maxval: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    10.0 * (maxval * maxval / mse).log10()
}

/// Straight-loop masked cross-attention reference.
///
/// `f` is `[c][p]`, `e` is `[n][c]`, weights are row-major `c x c`, masks
/// are `[n][p]`. Positions outside a mask get zero weight; the result is
/// `f + sum_i a_i[p] * (Wv e_i)`.
pub fn charm_reference(
    f: &[Vec<f64>],
    e: &[Vec<f64>],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    masks: &[Vec<bool>],
) -> Vec<Vec<f64>> {
    let c = f.len();
    let p = f[0].len();
    let mut out = f.to_vec();
    for (ei, mi) in e.iter().zip(masks) {
        let k: Vec<f64> = (0..c).map(|a| (0..c).map(|j| wk[a * c + j] * ei[j]).sum()).collect();
        let v: Vec<f64> = (0..c).map(|a| (0..c).map(|j| wv[a * c + j] * ei[j]).sum()).collect();
        let logits: Vec<f64> = (0..p)
            .map(|pos| {
                let q: Vec<f64> = (0..c)
                    .map(|a| (0..c).map(|j| wq[a * c + j] * f[j][pos]).sum())
                    .collect();
                q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / (c as f64).sqrt()
            })
            .collect();
        let max = (0..p)
            .filter(|&i| mi[i])
            .map(|i| logits[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..p).filter(|&i| mi[i]).map(|i| (logits[i] - max).exp()).sum();
        for pos in 0..p {
            if !mi[pos] {
                continue;
            }
            let a = (logits[pos] - max).exp() / z;
            for ch in 0..c {
                out[ch][pos] += a * v[ch];
            }
        }
    }
    out
}
