use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Rows handled per parallel task in row-blocked products.
const ROW_BLOCK: usize = 256;

fn view<'a>(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> ArrayView2<'a, f64> {
    let needed = if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    };
    ArrayView2::from_shape((rows, cols).strides((rs, cs)), &data[..needed]).expect("gemm operand layout")
}

/// `C = A B + beta C` on strided row/column layouts.
///
/// `a` is `m x k` with element `(i, l)` at `i * a_strides.0 + l * a_strides.1`, likewise
/// `b` (`k x n`). `c` is row-major `m x n` with row stride `c_row_stride`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let av = view(a, m, k, a_strides.0, a_strides.1);
    let bv = view(b, k, n, b_strides.0, b_strides.1);
    let needed = (m - 1) * c_row_stride + n;
    let mut cv = ArrayViewMut2::from_shape((m, n).strides((c_row_stride, 1)), &mut c[..needed])
        .expect("gemm output layout");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

/// Row-major `rows x k` times row-major `k x n`, parallel over row blocks.
fn matmul_rows(x: &[f64], rows: usize, k: usize, w: &[f64], w_strides: (usize, usize), n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    par::for_each_chunk_mut(&mut out, ROW_BLOCK * n, |ci, chunk| {
        let r0 = ci * ROW_BLOCK;
        let r = chunk.len() / n;
        gemm(r, k, n, &x[r0 * k..], (k, 1), w, w_strides, 0.0, chunk, n);
    });
    out
}

impl Tape {
    /// `x W + b` over the last axis: `x` is `[..., c_in]`, `weight` is `[c_in, c_out]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::Shape(format!("linear: input {sx:?}, weight {sw:?}")));
        }
        let (cin, cout) = (sw[0], sw[1]);
        let rows = sx.iter().product::<usize>() / cin;
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = cout;
        let out = {
            let (tx, tw) = (self.value(x), self.value(weight));
            Tensor::from_vec(
                &out_shape,
                matmul_rows(tx.data(), rows, cin, tw.data(), (cout, 1), cout),
            )?
        };
        let y = self.push(
            out,
            &[x, weight],
            Box::new(move |args| {
                let (xv, wv, g) = (args.inputs[0], args.inputs[1], args.grad);
                let gx = args.needs[0].then(|| {
                    let d = matmul_rows(g.data(), rows, cout, wv.data(), (1, cout), cin);
                    Tensor::from_vec(xv.shape(), d).unwrap()
                });
                let gw = args.needs[1].then(|| {
                    let mut d = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, xv.data(), (1, cin), g.data(), (cout, 1), 0.0, &mut d, cout);
                    Tensor::from_vec(wv.shape(), d).unwrap()
                });
                vec![gx, gw]
            }),
        );
        match bias {
            Some(b) => self.add_bias_last(y, b),
            None => Ok(y),
        }
    }

    /// Batched product `[G, m, k] x [G, k, n] -> [G, m, n]`; `b` may also be `[1, k, n]`
    /// and is then shared across the batch.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] || !(sb[0] == sa[0] || sb[0] == 1) {
            return Err(Error::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (groups, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let shared = sb[0] == 1 && groups != 1;
        let b_off = move |g: usize| if shared { 0 } else { g * k * n };
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; groups * m * n];
            par::for_each_chunk_mut(&mut out, m * n, |g, c| {
                gemm(m, k, n, &ad[g * m * k..], (k, 1), &bd[b_off(g)..], (n, 1), 0.0, c, n);
            });
            Tensor::from_vec(&[groups, m, n], out)?
        };
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |args| {
                let (ad, bd, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let ga = args.needs[0].then(|| {
                    let mut d = vec![0.0; groups * m * k];
                    par::for_each_chunk_mut(&mut d, m * k, |gi, c| {
                        gemm(m, n, k, &g[gi * m * n..], (n, 1), &bd[b_off(gi)..], (1, n), 0.0, c, k);
                    });
                    Tensor::from_vec(args.inputs[0].shape(), d).unwrap()
                });
                let gb = args.needs[1].then(|| {
                    let d = if shared {
                        let mut d = vec![0.0; k * n];
                        gemm(k, groups * m, n, ad, (1, k), g, (n, 1), 0.0, &mut d, n);
                        d
                    } else {
                        let mut d = vec![0.0; groups * k * n];
                        par::for_each_chunk_mut(&mut d, k * n, |gi, c| {
                            gemm(k, m, n, &ad[gi * m * k..], (1, k), &g[gi * m * n..], (n, 1), 0.0, c, n);
                        });
                        d
                    };
                    Tensor::from_vec(args.inputs[1].shape(), d).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testing::check_gradients;
    use rand::SeedableRng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let mut c = vec![0.0; 15];
        gemm(5, 7, 3, a.data(), (7, 1), b.data(), (3, 1), 0.0, &mut c, 3);
        let want = naive(a.data(), b.data(), 5, 7, 3);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_bmm_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        check_gradients(&[x, w, b], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(), 1e-6);

        let a = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let bb = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        check_gradients(&[a.clone(), bb], |t, v| t.bmm(v[0], v[1]).unwrap(), 1e-6);
        let shared = Tensor::randn(&[1, 4, 2], 1.0, &mut rng);
        check_gradients(&[a, shared], |t, v| t.bmm(v[0], v[1]).unwrap(), 1e-6);
    }

    #[test]
    fn linear_many_rows_matches_naive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows = ROW_BLOCK * 2 + 17;
        let x = Tensor::randn(&[rows, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let (xv, wv) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false));
        let y = tape.linear(xv, wv, None).unwrap();
        let want = naive(x.data(), w.data(), rows, 6, 4);
        let got = tape.get(y);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
