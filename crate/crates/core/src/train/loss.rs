use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the soft-Dice and cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, ce: 1.0 }
    }
}

/// Additive smoothing in the soft-Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

struct Forward {
    probs: Vec<f64>,
    /// Per foreground class: `(sum p*y, sum p + sum y)`.
    sums: Vec<(f64, f64)>,
    loss: f64,
}

/// `[B, K, N]` view of a logits tensor, validated against `target`.
fn layout(shape: &[usize], target: &[u8]) -> Result<(usize, usize, usize)> {
    if shape.len() != 5 || shape[1] < 2 {
        return Err(Error::Shape(format!("loss expects [B, K>=2, D, H, W] logits, got {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    let n: usize = shape[2..].iter().product();
    if target.len() != b * n {
        return Err(Error::Shape(format!("target has {} voxels, logits {shape:?}", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Shape(format!("target class {bad} with {k} logit channels")));
    }
    Ok((b, k, n))
}

fn forward(z: &[f64], target: &[u8], (b, k, n): (usize, usize, usize), w: LossWeights) -> Forward {
    let mut probs = vec![0.0; z.len()];
    let mut ce = 0.0;
    let mut sums = vec![(0.0, 0.0); k - 1];
    let mut row = vec![0.0; k];
    for bi in 0..b {
        let base = bi * k * n;
        for v in 0..n {
            for (c, r) in row.iter_mut().enumerate() {
                *r = z[base + c * n + v];
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
            let y = target[bi * n + v] as usize;
            ce -= row[y] - lse;
            for (c, &r) in row.iter().enumerate() {
                let p = (r - lse).exp();
                probs[base + c * n + v] = p;
                if c > 0 {
                    let hit = if y == c { 1.0 } else { 0.0 };
                    sums[c - 1].0 += p * hit;
                    sums[c - 1].1 += p + hit;
                }
            }
        }
    }
    ce /= (b * n) as f64;
    let dice = sums
        .iter()
        .map(|&(i, s)| 1.0 - (2.0 * i + DICE_SMOOTH) / (s + DICE_SMOOTH))
        .sum::<f64>()
        / (k - 1) as f64;
    Forward {
        probs,
        sums,
        loss: w.dice * dice + w.ce * ce,
    }
}

/// Soft-Dice over the foreground classes (averaged) plus mean voxelwise
/// cross-entropy, for logits `[B, K, D, H, W]` and a `B * D * H * W` target.
pub fn seg_loss(tape: &Tape, logits: Var, target: Rc<Vec<u8>>, w: LossWeights) -> Result<Var> {
    let dims = layout(&tape.shape(logits), &target)?;
    let fwd = {
        let z = tape.value(logits);
        if !z.is_finite() {
            return Err(Error::NonFinite("logits entering the loss".into()));
        }
        forward(z.data(), &target, dims, w)
    };
    let (b, k, n) = dims;
    let loss = fwd.loss;
    let probs = fwd.probs;
    let sums = fwd.sums;
    Ok(tape.push(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |args| {
            let g0 = args.grad.data()[0];
            let shape = args.inputs[0].shape().to_vec();
            let mut grad = vec![0.0; probs.len()];
            let m = (b * n) as f64;
            let mut dp = vec![0.0; k];
            for bi in 0..b {
                let base = bi * k * n;
                for v in 0..n {
                    let y = target[bi * n + v] as usize;
                    // d(dice term)/dp_c, then through the softmax Jacobian.
                    let mut dot = 0.0;
                    for c in 0..k {
                        dp[c] = if c == 0 {
                            0.0
                        } else {
                            let (i, s) = sums[c - 1];
                            let hit = if y == c { 1.0 } else { 0.0 };
                            let den = s + DICE_SMOOTH;
                            -w.dice / (k - 1) as f64 * (2.0 * hit * den - (2.0 * i + DICE_SMOOTH)) / (den * den)
                        };
                        dot += probs[base + c * n + v] * dp[c];
                    }
                    for c in 0..k {
                        let p = probs[base + c * n + v];
                        let hit = if y == c { 1.0 } else { 0.0 };
                        grad[base + c * n + v] = g0 * (p * (dp[c] - dot) + w.ce * (p - hit) / m);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, grad).expect("logit shape"))]
        }),
    ))
}

/// Loss value without recording a tape node.
pub fn seg_loss_value(logits: &Tensor, target: &[u8], w: LossWeights) -> Result<f64> {
    let dims = layout(logits.shape(), target)?;
    Ok(forward(logits.data(), target, dims, w).loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Direct per-voxel summation with an explicit softmax per voxel.
    fn oracle(z: &Tensor, t: &[u8], w: LossWeights) -> f64 {
        let s = z.shape();
        let (b, k) = (s[0], s[1]);
        let n: usize = s[2..].iter().product();
        let mut ce = 0.0;
        let mut inter = vec![0.0; k];
        let mut total = vec![0.0; k];
        for bi in 0..b {
            for v in 0..n {
                let e: Vec<f64> = (0..k).map(|c| z.data()[(bi * k + c) * n + v].exp()).collect();
                let zsum: f64 = e.iter().sum();
                let y = t[bi * n + v] as usize;
                ce += -(e[y] / zsum).ln();
                for c in 1..k {
                    let p = e[c] / zsum;
                    inter[c] += if y == c { p } else { 0.0 };
                    total[c] += p + if y == c { 1.0 } else { 0.0 };
                }
            }
        }
        let dice: f64 = (1..k).map(|c| 1.0 - (2.0 * inter[c] + 1.0) / (total[c] + 1.0)).sum::<f64>() / (k - 1) as f64;
        w.dice * dice + w.ce * ce / (b * n) as f64
    }

    fn instance(seed: u64) -> (Tensor, Vec<u8>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[2, 3, 2, 3, 2], 1.5, &mut rng);
        let t = (0..24).map(|_| rng.random_range(0..3u8)).collect();
        (z, t)
    }

    #[test]
    fn matches_per_voxel_oracle() {
        let w = LossWeights { dice: 0.7, ce: 1.3 };
        for seed in 0..10 {
            let (z, t) = instance(seed);
            let got = seg_loss_value(&z, &t, w).unwrap();
            assert!((got - oracle(&z, &t, w)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln3_cross_entropy() {
        let z = Tensor::zeros(&[1, 3, 2, 2, 2]);
        let t = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let ce = seg_loss_value(&z, &t, LossWeights { dice: 0.0, ce: 1.0 }).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let t: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
        let mut z = Tensor::zeros(&[1, 3, 3, 3, 3]);
        for (v, &y) in t.iter().enumerate() {
            z.data_mut()[y as usize * 27 + v] = 40.0;
        }
        assert!(seg_loss_value(&z, &t, LossWeights::default()).unwrap() < 1e-3);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = LossWeights { dice: 1.0, ce: 0.5 };
        let (z, t) = instance(4);
        let t = Rc::new(t);
        let tape = Tape::new();
        let x = tape.leaf(z.clone(), true);
        let l = seg_loss(&tape, x, t.clone(), w).unwrap();
        let g = tape.backward(l).take(x).unwrap();
        let eps = 1e-6;
        for j in 0..z.len() {
            let mut p = z.clone();
            p.data_mut()[j] += eps;
            let mut m = z.clone();
            m.data_mut()[j] -= eps;
            let num = (seg_loss_value(&p, &t, w).unwrap() - seg_loss_value(&m, &t, w).unwrap()) / (2.0 * eps);
            assert!((num - g.data()[j]).abs() < 1e-7, "element {j}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = Tensor::zeros(&[1, 3, 2, 2, 2]);
        assert!(seg_loss_value(&z, &[0; 7], LossWeights::default()).is_err());
        assert!(seg_loss_value(&z, &[3; 8], LossWeights::default()).is_err());
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, 2, 2, 2], f64::NAN), true);
        assert!(matches!(seg_loss(&tape, x, Rc::new(vec![0; 8]), LossWeights::default()), Err(Error::NonFinite(_))));
    }
}
