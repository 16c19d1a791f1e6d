//! Differentiable tensor operations recorded on a [`Tape`].

mod conv;
mod gather;
mod linalg;
mod norm;
mod resize;

pub use conv::{conv3d_forward, Conv3dGeometry};
pub use gather::GatherMap;
pub use linalg::gemm;
pub use resize::{linear_axis_weights, resize_trilinear_forward, AxisWeights};

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Elementwise chunk used for parallel maps.
pub(crate) const ELEMWISE_CHUNK: usize = 1 << 14;

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
    let sa = tape.shape(a);
    let sb = tape.shape(b);
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
    let mut out = x.clone();
    par::for_each_chunk_mut(out.data_mut(), ELEMWISE_CHUNK, |_, c| {
        c.iter_mut().for_each(|v| *v = f(*v))
    });
    out
}

/// `out[i] = f(x[i], g[i])`, used by unary backward passes.
fn zip_map(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Tensor {
    let mut out = g.clone();
    let xs = x.data();
    par::for_each_chunk_mut(out.data_mut(), ELEMWISE_CHUNK, |ci, c| {
        let base = ci * ELEMWISE_CHUNK;
        for (j, v) in c.iter_mut().enumerate() {
            *v = f(xs[base + j], *v);
        }
    });
    out
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let mut out = self.get(a);
        out.add_assign(&self.value(b));
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(ta.shape(), data)?
        };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|args| {
                let ga = zip_map(args.inputs[1], args.grad, |y, g| y * g);
                let gb = zip_map(args.inputs[0], args.grad, |x, g| x * g);
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = map_unary(&self.value(x), |v| v * s);
        self.push(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = args.grad.clone();
                g.scale_in_place(s);
                vec![Some(g)]
            }),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(|args| {
                vec![Some(Tensor::full(
                    args.inputs[0].shape(),
                    args.grad.data()[0],
                ))]
            }),
        )
    }

    /// `sum(x * weights)` for a constant `weights`, shape `[1]`.
    pub fn weighted_sum(&self, x: Var, weights: Rc<Tensor>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs {:?}",
                self.shape(x),
                weights.shape()
            )));
        }
        let s = self.value(x).dot(&weights);
        Ok(self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| {
                let mut g = (*weights).clone();
                g.scale_in_place(args.grad.data()[0]);
                vec![Some(g)]
            }),
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let out = map_unary(&self.value(x), |v| if v > 0.0 { v } else { slope * v });
        self.push(
            out,
            &[x],
            Box::new(move |args| {
                vec![Some(zip_map(args.inputs[0], args.grad, |v, g| {
                    if v > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let out = map_unary(&self.value(x), |v| {
            0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
        });
        self.push(
            out,
            &[x],
            Box::new(|args| {
                let inv_sqrt_2pi = 0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2;
                vec![Some(zip_map(args.inputs[0], args.grad, |v, g| {
                    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                    let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                    g * (cdf + v * pdf)
                }))]
            }),
        )
    }

    /// Concatenates `[B, Ca, ...]` and `[B, Cb, ...]` along axis 1.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let batch = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (na, nb) = (sa[1] * inner, sb[1] * inner);
        let mut shape = sa.clone();
        shape[1] = sa[1] + sb[1];
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let mut data = Vec::with_capacity(batch * (na + nb));
            for n in 0..batch {
                data.extend_from_slice(&ta.data()[n * na..(n + 1) * na]);
                data.extend_from_slice(&tb.data()[n * nb..(n + 1) * nb]);
            }
            Tensor::from_vec(&shape, data)?
        };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut ga = Vec::with_capacity(batch * na);
                let mut gb = Vec::with_capacity(batch * nb);
                for n in 0..batch {
                    let base = n * (na + nb);
                    ga.extend_from_slice(&g[base..base + na]);
                    gb.extend_from_slice(&g[base + na..base + na + nb]);
                }
                vec![
                    Some(Tensor::from_vec(args.inputs[0].shape(), ga).unwrap()),
                    Some(Tensor::from_vec(args.inputs[1].shape(), gb).unwrap()),
                ]
            }),
        ))
    }

    /// Adds `bias` (shape `[C]`) along the last axis of `x`.
    pub fn add_bias_last(&self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Shape(format!("add_bias_last: {sx:?} + {sb:?}")));
        }
        self.add_broadcast(x, bias)
    }

    /// Adds `y` to `x` treating `x` as a stack of copies of `y`'s shape, which must be
    /// a suffix of `x`'s shape.
    pub fn add_broadcast(&self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sy = self.shape(y);
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(Error::Shape(format!("add_broadcast: {sx:?} + {sy:?}")));
        }
        let out = {
            let mut out = self.get(x);
            let ty = self.value(y);
            let yd = ty.data();
            let n = yd.len();
            out.data_mut()
                .chunks_mut(n)
                .for_each(|c| c.iter_mut().zip(yd).for_each(|(a, b)| *a += b));
            out
        };
        Ok(self.push(
            out,
            &[x, y],
            Box::new(|args| {
                let gy = if args.needs[1] {
                    let n = args.inputs[1].len();
                    let mut acc = vec![0.0; n];
                    for c in args.grad.data().chunks(n) {
                        acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    }
                    Some(Tensor::from_vec(args.inputs[1].shape(), acc).unwrap())
                } else {
                    None
                };
                vec![Some(args.grad.clone()), gy]
            }),
        ))
    }

    /// Reinterprets `x` under `shape` (same element count).
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.get(x).reshape(shape)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(|args| {
                vec![Some(
                    args.grad.clone().reshape(args.inputs[0].shape()).unwrap(),
                )]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Var {
        let out = {
            let tx = self.value(x);
            let n = *tx.shape().last().unwrap_or(&1);
            let mut out = tx.clone();
            par::for_each_chunk_mut(out.data_mut(), n * 64, |_, c| {
                for row in c.chunks_mut(n) {
                    softmax_row(row);
                }
            });
            out
        };
        self.push(
            out,
            &[x],
            Box::new(|args| {
                let n = *args.output.shape().last().unwrap_or(&1);
                let y = args.output.data();
                let mut g = args.grad.clone();
                par::for_each_chunk_mut(g.data_mut(), n * 64, |ci, c| {
                    let base = ci * n * 64;
                    for (r, row) in c.chunks_mut(n).enumerate() {
                        let yr = &y[base + r * n..base + (r + 1) * n];
                        let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                        row.iter_mut()
                            .zip(yr)
                            .for_each(|(gv, yv)| *gv = yv * (*gv - dot));
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Adds a constant per-window attention mask.
    ///
    /// `scores` is `[B * windows * heads, T, T]` with windows varying slower than
    /// heads; `mask` is `[windows, T, T]`.
    pub fn add_window_mask(&self, scores: Var, mask: Rc<Tensor>, heads: usize) -> Result<Var> {
        let ss = self.shape(scores);
        let ms = mask.shape().to_vec();
        if ss.len() != 3 || ms.len() != 3 || ss[1..] != ms[1..] || ss[0] % (ms[0] * heads) != 0 {
            return Err(Error::Shape(format!(
                "add_window_mask: scores {ss:?}, mask {ms:?}, heads {heads}"
            )));
        }
        let tt = ss[1] * ss[2];
        let windows = ms[0];
        let out = {
            let mut out = self.get(scores);
            let md = mask.data();
            for (g, block) in out.data_mut().chunks_mut(tt).enumerate() {
                let w = (g / heads) % windows;
                block
                    .iter_mut()
                    .zip(&md[w * tt..(w + 1) * tt])
                    .for_each(|(a, b)| *a += b);
            }
            out
        };
        Ok(self.push(
            out,
            &[scores],
            Box::new(|args| vec![Some(args.grad.clone())]),
        ))
    }
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
pub(crate) mod testing {
    //! Central finite-difference checking of single ops.

    use super::*;
    use rand::SeedableRng;

    /// Checks `d/dx sum(f(x) * w)` against central differences for every input.
    pub fn check_gradients(
        inputs: &[Tensor],
        f: impl Fn(&Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let probe_shape = {
            let tape = Tape::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&tape, &vars);
            tape.shape(out)
        };
        let weights = Rc::new(Tensor::randn(&probe_shape, 1.0, &mut rng));
        let eval = |xs: &[Tensor]| -> f64 {
            let tape = Tape::no_grad();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&tape, &vars);
            let s = tape.weighted_sum(out, weights.clone()).unwrap();
            let v = tape.value(s).data()[0];
            v
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&tape, &vars);
        let s = tape.weighted_sum(out, weights.clone()).unwrap();
        let grads = tape.backward(s);
        let eps = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("gradient present");
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[j];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                assert!(
                    err <= tol.max(tol * scale),
                    "input {i} element {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::check_gradients;
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_gradients() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[3, 4], 2);
        check_gradients(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-6);
        check_gradients(&[a.clone()], |t, v| t.gelu(v[0]), 1e-6);
        check_gradients(&[a.clone()], |t, v| t.leaky_relu(v[0], 0.01), 1e-6);
        check_gradients(&[a], |t, v| t.softmax_last(v[0]), 1e-6);
    }

    #[test]
    fn concat_and_broadcast_gradients() {
        let a = rand_tensor(&[2, 3, 2, 2], 3);
        let b = rand_tensor(&[2, 1, 2, 2], 4);
        check_gradients(&[a, b], |t, v| t.concat_channels(v[0], v[1]).unwrap(), 1e-6);
        let x = rand_tensor(&[5, 2, 3], 5);
        let y = rand_tensor(&[2, 3], 6);
        check_gradients(&[x, y], |t, v| t.add_broadcast(v[0], v[1]).unwrap(), 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::no_grad();
        let x = tape.leaf(rand_tensor(&[7, 9], 8), false);
        let y = tape.softmax_last(x);
        for row in tape.value(y).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn window_mask_broadcasts_over_heads() {
        let tape = Tape::no_grad();
        // batch 1, 2 windows, 2 heads, 2 tokens
        let s = tape.leaf(Tensor::zeros(&[4, 2, 2]), false);
        let mask = Tensor::from_vec(&[2, 2, 2], vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let y = tape.add_window_mask(s, Rc::new(mask), 2).unwrap();
        let v = tape.value(y);
        assert_eq!(&v.data()[0..4], &[0., 1., 2., 3.]);
        assert_eq!(&v.data()[4..8], &[0., 1., 2., 3.]);
        assert_eq!(&v.data()[8..12], &[4., 5., 6., 7.]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }
}
