//! Separable trilinear resizing with half-pixel (`align_corners = false`) sampling.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Interpolation taps for one axis: output `o` reads `(1 - frac[o]) * in[lo[o]] + frac[o] * in[hi[o]]`.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

/// Half-pixel linear taps mapping `in_len` samples onto `out_len`.
pub fn linear_axis_weights(in_len: usize, out_len: usize) -> AxisWeights {
    let scale = in_len as f64 / out_len as f64;
    let mut w = AxisWeights {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        w.lo.push(lo);
        w.hi.push(hi);
        w.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    w
}

/// Resamples axis `axis` of a row-major array with `shape`.
fn resize_axis(x: &[f64], shape: &[usize], axis: usize, w: &AxisWeights) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (n_in, n_out) = (shape[axis], w.lo.len());
    let mut out = vec![0.0; outer * n_out * inner];
    par::for_each_chunk_mut(&mut out, n_out * inner, |o, block| {
        let src = &x[o * n_in * inner..(o + 1) * n_in * inner];
        for j in 0..n_out {
            let (a, b, t) = (w.lo[j] * inner, w.hi[j] * inner, w.frac[j]);
            let dst = &mut block[j * inner..(j + 1) * inner];
            for k in 0..inner {
                dst[k] = (1.0 - t) * src[a + k] + t * src[b + k];
            }
        }
    });
    out
}

/// Transpose of [`resize_axis`].
fn resize_axis_adjoint(g: &[f64], in_shape: &[usize], axis: usize, w: &AxisWeights) -> Vec<f64> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let (n_in, n_out) = (in_shape[axis], w.lo.len());
    let mut dx = vec![0.0; outer * n_in * inner];
    par::for_each_chunk_mut(&mut dx, n_in * inner, |o, block| {
        let src = &g[o * n_out * inner..(o + 1) * n_out * inner];
        for j in 0..n_out {
            let (a, b, t) = (w.lo[j] * inner, w.hi[j] * inner, w.frac[j]);
            for k in 0..inner {
                let gv = src[j * inner + k];
                block[a + k] += (1.0 - t) * gv;
                block[b + k] += t * gv;
            }
        }
    });
    dx
}

/// Per-axis passes `(axis, shape before the pass, weights)` for resizing the last
/// three axes of `shape` to `target`; axes already at their target size are skipped.
fn plan(shape: &[usize], target: [usize; 3]) -> Vec<(usize, Vec<usize>, AxisWeights)> {
    let rank = shape.len();
    let mut cur = shape.to_vec();
    let mut passes = Vec::new();
    for (t, &len) in target.iter().enumerate().rev() {
        let axis = rank - 3 + t;
        if cur[axis] != len {
            let w = linear_axis_weights(cur[axis], len);
            passes.push((axis, cur.clone(), w));
            cur[axis] = len;
        }
    }
    passes
}

fn check(shape: &[usize], target: [usize; 3]) -> Result<()> {
    if shape.len() < 3 || target.contains(&0) || shape[shape.len() - 3..].contains(&0) {
        return Err(Error::Shape(format!("cannot resize {shape:?} to {target:?}")));
    }
    Ok(())
}

/// Trilinear resize of the last three axes of `x` (tape-free).
pub fn resize_trilinear_forward(x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    check(x.shape(), target)?;
    let mut data = x.data().to_vec();
    let mut shape = x.shape().to_vec();
    for (axis, before, w) in plan(x.shape(), target) {
        data = resize_axis(&data, &before, axis, &w);
        shape[axis] = w.lo.len();
    }
    Tensor::from_vec(&shape, data)
}

impl Tape {
    /// Trilinear resize of the last three (spatial) axes.
    pub fn resize_trilinear(&self, x: Var, target: [usize; 3]) -> Result<Var> {
        let out = resize_trilinear_forward(&self.value(x), target)?;
        let passes = plan(&self.shape(x), target);
        Ok(self.push(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = args.grad.data().to_vec();
                for (axis, before, w) in passes.iter().rev() {
                    g = resize_axis_adjoint(&g, before, *axis, w);
                }
                vec![Some(Tensor::from_vec(args.inputs[0].shape(), g).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testing::check_gradients;
    use rand::SeedableRng;

    #[test]
    fn identity_resize_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 2, 3, 4, 5], 1.0, &mut rng);
        assert_eq!(resize_trilinear_forward(&x, [3, 4, 5]).unwrap(), x);
    }

    #[test]
    fn ramp_upsample_follows_half_pixel_sampling() {
        // value = depth index; upsample depth 4 -> 8.
        let mut x = Tensor::zeros(&[1, 1, 4, 2, 2]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = (i / 4) as f64;
        }
        let y = resize_trilinear_forward(&x, [8, 2, 2]).unwrap();
        for o in 0..8 {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
            assert!((y.data()[o * 4] - src).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 3, 2, 4], 1.0, &mut rng);
        check_gradients(&[x.clone()], |t, v| t.resize_trilinear(v[0], [5, 4, 2]).unwrap(), 1e-6);
        check_gradients(&[x], |t, v| t.resize_trilinear(v[0], [3, 1, 4]).unwrap(), 1e-6);
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(resize_trilinear_forward(&Tensor::zeros(&[1, 1, 2, 2, 2]), [0, 2, 2]).is_err());
    }
}
