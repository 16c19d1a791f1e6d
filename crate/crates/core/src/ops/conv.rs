//! 3D convolution by chunked im2col + GEMM.
//!
//! Output positions are processed in fixed-size chunks so the column buffer stays
//! small; chunk boundaries depend only on the problem size, never on the thread
//! count, and all cross-chunk reductions are folded in chunk order.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::gemm;
use crate::par;
use crate::tensor::Tensor;

/// Column-buffer budget per chunk, in elements.
const COL_BUDGET: usize = 1 << 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeometry {
    pub fn cube(kernel: usize, stride: usize, padding: usize) -> Self {
        Conv3dGeometry {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || span < self.kernel[a] {
                return Err(Error::Shape(format!(
                    "conv geometry {self:?} does not fit input {input:?}"
                )));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Static description of one convolution problem.
#[derive(Clone, Copy, Debug)]
struct Problem {
    geom: Conv3dGeometry,
    batch: usize,
    cin: usize,
    cout: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
}

impl Problem {
    fn new(x: &[usize], w: &[usize], geom: Conv3dGeometry) -> Result<Self> {
        let (&[batch, cin, d, h, wd], &[cout, wcin, kd, kh, kw]) = (x, w) else {
            return Err(Error::Shape(format!("conv3d: input {x:?}, weight {w:?}")));
        };
        if wcin != cin || [kd, kh, kw] != geom.kernel {
            return Err(Error::Shape(format!(
                "conv3d: input {x:?}, weight {w:?}, kernel {:?}",
                geom.kernel
            )));
        }
        let in_dims = [d, h, wd];
        let out_dims = geom.output_dims(in_dims)?;
        Ok(Problem {
            geom,
            batch,
            cin,
            cout,
            in_dims,
            out_dims,
        })
    }

    fn in_size(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_size(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.geom.taps()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / self.rows().max(1)).max(64).min(self.out_size().max(1))
    }

    fn chunks_per_sample(&self) -> usize {
        self.out_size().div_ceil(self.chunk())
    }

    /// `(sample, first position, length)` of global chunk `i`.
    fn chunk_range(&self, i: usize) -> (usize, usize, usize) {
        let per = self.chunks_per_sample();
        let (b, c) = (i / per, i % per);
        let p0 = c * self.chunk();
        (b, p0, self.chunk().min(self.out_size() - p0))
    }

    fn total_chunks(&self) -> usize {
        self.batch * self.chunks_per_sample()
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.out_dims[0],
            self.out_dims[1],
            self.out_dims[2],
        ]
    }
}

/// Visits `(row, j, input offset or None)` for every column entry of a chunk.
#[inline]
fn for_each_tap(p: &Problem, p0: usize, n: usize, mut f: impl FnMut(usize, usize, Option<usize>)) {
    let [od, oh, ow] = p.out_dims;
    let [id, ih, iw] = p.in_dims;
    let [kd, kh, kw] = p.geom.kernel;
    let [sd, sh, sw] = p.geom.stride;
    let [pd, ph, pw] = p.geom.padding;
    let _ = od;
    let in_size = p.in_size();
    for ci in 0..p.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = ((ci * kd + a) * kh + b) * kw + c;
                    let (mut z, mut y, mut x) = (p0 / (oh * ow), (p0 / ow) % oh, p0 % ow);
                    for j in 0..n {
                        let zi = (z * sd + a) as isize - pd as isize;
                        let yi = (y * sh + b) as isize - ph as isize;
                        let xi = (x * sw + c) as isize - pw as isize;
                        let src = if zi >= 0
                            && yi >= 0
                            && xi >= 0
                            && (zi as usize) < id
                            && (yi as usize) < ih
                            && (xi as usize) < iw
                        {
                            Some(ci * in_size + ((zi as usize) * ih + yi as usize) * iw + xi as usize)
                        } else {
                            None
                        };
                        f(row, j, src);
                        x += 1;
                        if x == ow {
                            x = 0;
                            y += 1;
                            if y == oh {
                                y = 0;
                                z += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(p: &Problem, x: &[f64], p0: usize, n: usize) -> Vec<f64> {
    let mut col = vec![0.0; p.rows() * n];
    for_each_tap(p, p0, n, |row, j, src| {
        if let Some(s) = src {
            col[row * n + j] = x[s];
        }
    });
    col
}

fn col2im_add(p: &Problem, col: &[f64], p0: usize, n: usize, dx: &mut [f64]) {
    for_each_tap(p, p0, n, |row, j, src| {
        if let Some(s) = src {
            dx[s] += col[row * n + j];
        }
    });
}

fn forward_impl(p: &Problem, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (cin, cout, in_size, out_size, rows) = (p.cin, p.cout, p.in_size(), p.out_size(), p.rows());
    let pieces = par::map_range(p.total_chunks(), |i| {
        let (b, p0, n) = p.chunk_range(i);
        let xs = &x[b * cin * in_size..(b + 1) * cin * in_size];
        let mut y = vec![0.0; cout * n];
        if p.geom.is_pointwise() {
            gemm(cout, cin, n, w, (cin, 1), &xs[p0..], (in_size, 1), 0.0, &mut y, n);
        } else {
            let col = im2col(p, xs, p0, n);
            gemm(cout, rows, n, w, (rows, 1), &col, (n, 1), 0.0, &mut y, n);
        }
        y
    });
    let mut out = vec![0.0; p.batch * cout * out_size];
    for (i, piece) in pieces.iter().enumerate() {
        let (b, p0, n) = p.chunk_range(i);
        for co in 0..cout {
            let dst = (b * cout + co) * out_size + p0;
            out[dst..dst + n].copy_from_slice(&piece[co * n..(co + 1) * n]);
        }
    }
    if let Some(bias) = bias {
        for (k, plane) in out.chunks_mut(out_size).enumerate() {
            let bv = bias[k % cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients with respect to input and weight.
fn backward_impl(
    p: &Problem,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, cout, in_size, out_size, rows) = (p.cin, p.cout, p.in_size(), p.out_size(), p.rows());
    let mut dx = need_dx.then(|| vec![0.0; p.batch * cin * in_size]);
    let mut dw = need_dw.then(|| vec![0.0; cout * rows]);
    let wave = 4 * par::num_threads();
    let total = p.total_chunks();
    let mut start = 0;
    while start < total {
        let end = (start + wave).min(total);
        let results = par::map_range(end - start, |off| {
            let i = start + off;
            let (b, p0, n) = p.chunk_range(i);
            let xs = &x[b * cin * in_size..(b + 1) * cin * in_size];
            let dys = &dy[b * cout * out_size + p0..];
            let pointwise = p.geom.is_pointwise();
            let dw_part = need_dw.then(|| {
                let mut part = vec![0.0; cout * rows];
                if pointwise {
                    gemm(cout, n, cin, dys, (out_size, 1), &xs[p0..], (1, in_size), 0.0, &mut part, rows);
                } else {
                    let col = im2col(p, xs, p0, n);
                    gemm(cout, n, rows, dys, (out_size, 1), &col, (1, n), 0.0, &mut part, rows);
                }
                part
            });
            let dcol = need_dx.then(|| {
                let mut dcol = vec![0.0; rows * n];
                gemm(rows, cout, n, w, (1, rows), dys, (out_size, 1), 0.0, &mut dcol, n);
                dcol
            });
            (dw_part, dcol)
        });
        for (off, (dw_part, dcol)) in results.into_iter().enumerate() {
            let (b, p0, n) = p.chunk_range(start + off);
            if let (Some(acc), Some(part)) = (dw.as_mut(), dw_part) {
                acc.iter_mut().zip(&part).for_each(|(a, v)| *a += v);
            }
            if let (Some(acc), Some(dcol)) = (dx.as_mut(), dcol) {
                let dxs = &mut acc[b * cin * in_size..(b + 1) * cin * in_size];
                if p.geom.is_pointwise() {
                    for ci in 0..cin {
                        let dst = &mut dxs[ci * in_size + p0..ci * in_size + p0 + n];
                        dst.iter_mut()
                            .zip(&dcol[ci * n..(ci + 1) * n])
                            .for_each(|(a, v)| *a += v);
                    }
                } else {
                    col2im_add(p, &dcol, p0, n, dxs);
                }
            }
        }
        start = end;
    }
    (dx, dw)
}

/// Plain (tape-free) 3D convolution of `[B, Cin, D, H, W]` by `[Cout, Cin, kd, kh, kw]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: Conv3dGeometry) -> Result<Tensor> {
    let p = Problem::new(x.shape(), w.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [p.cout] {
            return Err(Error::Shape(format!("conv3d bias {:?}", b.shape())));
        }
    }
    let out = forward_impl(&p, x.data(), w.data(), bias.map(|b| b.data()));
    Tensor::from_vec(&p.output_shape(), out)
}

impl Tape {
    pub fn conv3d(&self, x: Var, weight: Var, bias: Option<Var>, geom: Conv3dGeometry) -> Result<Var> {
        let p = Problem::new(&self.shape(x), &self.shape(weight), geom)?;
        let out = {
            let bias_t = bias.map(|b| self.value(b));
            conv3d_forward(&self.value(x), &self.value(weight), bias_t.as_deref(), geom)?
        };
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Box::new(move |args| {
                let (xv, wv, g) = (args.inputs[0], args.inputs[1], args.grad);
                let (dx, dw) = backward_impl(&p, xv.data(), wv.data(), g.data(), args.needs[0], args.needs[1]);
                let mut grads = vec![
                    dx.map(|d| Tensor::from_vec(xv.shape(), d).unwrap()),
                    dw.map(|d| Tensor::from_vec(wv.shape(), d).unwrap()),
                ];
                if args.inputs.len() == 3 {
                    let os = p.out_size();
                    let mut db = vec![0.0; p.cout];
                    for (k, plane) in g.data().chunks(os).enumerate() {
                        db[k % p.cout] += plane.iter().sum::<f64>();
                    }
                    grads.push(Some(Tensor::from_vec(&[p.cout], db).unwrap()));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testing::check_gradients;
    use rand::SeedableRng;

    /// Direct seven-loop convolution.
    pub(crate) fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: Conv3dGeometry) -> Tensor {
        let [bn, cin, d, h, wd] = x.dims5().unwrap();
        let [cout, _, kd, kh, kw] = w.dims5().unwrap();
        let [od, oh, ow] = g.output_dims([d, h, wd]).unwrap();
        let mut out = Tensor::zeros(&[bn, cout, od, oh, ow]);
        for n in 0..bn {
            for co in 0..cout {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b.map_or(0.0, |b| b.data()[co]);
                            for ci in 0..cin {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for c in 0..kw {
                                            let zi = (z * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let yi = (y * g.stride[1] + bb) as isize - g.padding[1] as isize;
                                            let xi = (xx * g.stride[2] + c) as isize - g.padding[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 || zi >= d as isize || yi >= h as isize || xi >= wd as isize {
                                                continue;
                                            }
                                            let xv = x.data()[(((n * cin + ci) * d + zi as usize) * h + yi as usize) * wd + xi as usize];
                                            let wv = w.data()[(((co * cin + ci) * kd + a) * kh + bb) * kw + c];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * cout + co) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (geom, dims) in [
            (Conv3dGeometry::cube(3, 1, 1), [5, 6, 7]),
            (Conv3dGeometry::cube(3, 2, 1), [8, 8, 6]),
            (Conv3dGeometry::cube(1, 1, 0), [4, 3, 5]),
            (Conv3dGeometry::cube(4, 4, 0), [8, 8, 8]),
        ] {
            let x = Tensor::randn(&[2, 3, dims[0], dims[1], dims[2]], 1.0, &mut rng);
            let k = geom.kernel[0];
            let w = Tensor::randn(&[4, 3, k, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let got = conv3d_forward(&x, &w, Some(&b), geom).unwrap();
            let want = naive_conv(&x, &w, Some(&b), geom);
            assert!(got.max_abs_diff(&want) < 1e-10, "{geom:?}");
        }
    }

    #[test]
    fn large_problem_spans_several_chunks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[1, 2, 20, 20, 20], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut rng);
        let g = Conv3dGeometry::cube(3, 1, 1);
        let p = Problem::new(x.shape(), w.shape(), g).unwrap();
        assert!(p.total_chunks() > 1);
        let got = conv3d_forward(&x, &w, None, g).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, None, g)) < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for geom in [Conv3dGeometry::cube(3, 1, 1), Conv3dGeometry::cube(3, 2, 1), Conv3dGeometry::cube(1, 1, 0)] {
            let k = geom.kernel[0];
            let x = Tensor::randn(&[1, 2, 4, 4, 3], 1.0, &mut rng);
            let w = Tensor::randn(&[2, 2, k, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[2], 1.0, &mut rng);
            check_gradients(&[x, w, b], move |t, v| t.conv3d(v[0], v[1], Some(v[2]), geom).unwrap(), 1e-6);
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4, 4]), true);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3, 3]), true);
        assert!(tape.conv3d(x, w, None, Conv3dGeometry::cube(3, 1, 1)).is_err());
    }
}
