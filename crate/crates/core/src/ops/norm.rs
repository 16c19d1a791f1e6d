use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Mean and inverse standard deviation of `xs` (biased variance).
fn moments(xs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// Gradient of a normalised group given `g * gamma` (`dxhat`) and `xhat`.
fn normalized_grad<'a>(dxhat: &'a [f64], xhat: &'a [f64], inv_std: f64) -> impl Iterator<Item = f64> + 'a {
    let n = dxhat.len() as f64;
    let s1: f64 = dxhat.iter().sum();
    let s2: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(move |(d, xh)| inv_std * (d - s1 / n - xh * s2 / n))
}

impl Tape {
    /// Layer normalisation over the last axis with affine `gamma`, `beta` (`[C]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("layer_norm over {sx:?}")));
        }
        let (out, stats) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let rows = tx.len() / c.max(1);
            let xd = tx.data();
            let stats: Vec<(f64, f64)> = par::map_range(rows, |r| {
                let row = &xd[r * c..(r + 1) * c];
                moments(row.iter().copied(), c)
            });
            let mut out = tx.clone();
            let (gd, bd) = (tg.data(), tb.data());
            for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
                let (mean, inv) = stats[r];
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * gd[k] + bd[k];
                }
            }
            (out, Rc::new(stats))
        };
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let (xv, gv, g) = (args.inputs[0], args.inputs[1].data(), args.grad.data());
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, (xrow, grow)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let (mean, inv) = stats[r];
                    for k in 0..c {
                        xhat[k] = (xrow[k] - mean) * inv;
                        dxhat[k] = grow[k] * gv[k];
                        dgamma[k] += grow[k] * xhat[k];
                        dbeta[k] += grow[k];
                    }
                    for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(normalized_grad(&dxhat, &xhat, inv)) {
                        *d = v;
                    }
                }
                vec![
                    Some(Tensor::from_vec(xv.shape(), dx).unwrap()),
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Per-channel normalisation of `[B, C, ...]` with affine `gamma`, `beta` (`[C]`).
    ///
    /// `across_batch = false` normalises each (sample, channel) separately (instance
    /// norm); `true` pools statistics over the batch (batch norm with batch statistics).
    pub fn channel_norm(&self, x: Var, gamma: Var, beta: Var, across_batch: bool) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 3 {
            return Err(Error::Shape(format!("channel_norm on {sx:?}")));
        }
        let (batch, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("channel_norm affine for {c} channels")));
        }
        // Group g covers (sample, channel) planes; with across_batch one group per channel.
        let plane = move |n: usize, k: usize| (n * c + k) * spatial;
        let groups = if across_batch { c } else { batch * c };
        let members = move |g: usize| -> Vec<usize> {
            if across_batch {
                (0..batch).map(|n| plane(n, g)).collect()
            } else {
                vec![g * spatial]
            }
        };
        let count = spatial * if across_batch { batch } else { 1 };
        let (out, stats) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let xd = tx.data();
            let stats: Vec<(f64, f64)> = par::map_range(groups, |g| {
                let starts = members(g);
                let it = starts.iter().flat_map(|&s| xd[s..s + spatial].iter().copied());
                moments(it, count)
            });
            let mut out = tx.clone();
            for (p, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
                let k = p % c;
                let g = if across_batch { k } else { p };
                let (mean, inv) = stats[g];
                let (gk, bk) = (tg.data()[k], tb.data()[k]);
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv * gk + bk);
            }
            (out, Rc::new(stats))
        };
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let (xv, gv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let stats = &stats[..];
                let parts = par::map_range(groups, |grp| {
                    let (mean, inv) = stats[grp];
                    let k = if across_batch { grp } else { grp % c };
                    let starts = members(grp);
                    let gather = |src: &[f64]| -> Vec<f64> {
                        starts.iter().flat_map(|&s| src[s..s + spatial].iter().copied()).collect()
                    };
                    let xs = gather(xv);
                    let gs = gather(g);
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gs.iter().map(|v| v * gv[k]).collect();
                    let dg = gs.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>();
                    let db = gs.iter().sum::<f64>();
                    let d: Vec<f64> = normalized_grad(&dxhat, &xhat, inv).collect();
                    (d, dg, db)
                });
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grp, (d, dg, db)) in parts.into_iter().enumerate() {
                    let k = if across_batch { grp } else { grp % c };
                    dgamma[k] += dg;
                    dbeta[k] += db;
                    for (m, &s) in members(grp).iter().enumerate() {
                        dx[s..s + spatial].copy_from_slice(&d[m * spatial..(m + 1) * spatial]);
                    }
                }
                vec![
                    Some(Tensor::from_vec(args.inputs[0].shape(), dx).unwrap()),
                    Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                    Some(Tensor::from_vec(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }
}
