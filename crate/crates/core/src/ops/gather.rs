//! Index-map gathers: permutations, padding, cropping, cyclic shifts and window
//! partitions are all expressed as `out[i] = in[src[i]]` (or zero).

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marks an output element that is filled with zero.
const ZERO: u32 = u32::MAX;

/// A static gather from an input of `in_len` elements to an output of `out_shape`.
#[derive(Clone, Debug)]
pub struct GatherMap {
    in_len: usize,
    out_shape: Vec<usize>,
    src: Vec<u32>,
}

impl GatherMap {
    /// Builds a map by asking `source(i)` for the input index of each output element.
    pub fn from_fn(in_len: usize, out_shape: &[usize], source: impl Fn(usize) -> Option<usize>) -> Self {
        assert!(in_len < ZERO as usize, "gather input too large");
        let n: usize = out_shape.iter().product();
        let src = (0..n)
            .map(|i| match source(i) {
                Some(j) => {
                    debug_assert!(j < in_len);
                    j as u32
                }
                None => ZERO,
            })
            .collect();
        GatherMap {
            in_len,
            out_shape: out_shape.to_vec(),
            src,
        }
    }

    /// Axis permutation of a tensor with `shape`: output axis `k` is input axis `perm[k]`.
    pub fn permute(shape: &[usize], perm: &[usize]) -> Self {
        let in_strides = crate::tensor::strides(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out_strides = crate::tensor::strides(&out_shape);
        let in_len = shape.iter().product();
        Self::from_fn(in_len, &out_shape, |i| {
            let mut rem = i;
            let mut j = 0;
            for (k, &os) in out_strides.iter().enumerate() {
                let idx = rem / os;
                rem %= os;
                j += idx * in_strides[perm[k]];
            }
            Some(j)
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.src
            .iter()
            .map(|&s| if s == ZERO { 0.0 } else { x[s as usize] })
            .collect()
    }

    /// Transpose of [`apply`](Self::apply): scatter-adds `g` into an input-sized buffer.
    pub fn scatter_add(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.in_len];
        for (&s, &v) in self.src.iter().zip(g) {
            if s != ZERO {
                out[s as usize] += v;
            }
        }
        out
    }
}

impl Tape {
    pub fn gather(&self, x: Var, map: Rc<GatherMap>) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            if tx.len() != map.in_len {
                return Err(Error::Shape(format!(
                    "gather expects {} input elements, got {:?}",
                    map.in_len,
                    tx.shape()
                )));
            }
            Tensor::from_vec(&map.out_shape, map.apply(tx.data()))?
        };
        Ok(self.push(
            out,
            &[x],
            Box::new(move |args| {
                let g = map.scatter_add(args.grad.data());
                vec![Some(Tensor::from_vec(args.inputs[0].shape(), g).unwrap())]
            }),
        ))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if perm.len() != shape.len() {
            return Err(Error::Shape(format!("permute {perm:?} on {shape:?}")));
        }
        self.gather(x, Rc::new(GatherMap::permute(&shape, perm)))
    }
}
