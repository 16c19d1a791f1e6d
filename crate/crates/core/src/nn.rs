//! Parameterised layers shared by both branches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::Result;
use crate::ops::Conv3dGeometry;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    LeakyRelu,
}

impl Nonlinearity {
    pub fn apply(self, p: &Bound<'_>, x: Var) -> Var {
        match self {
            Nonlinearity::Relu => p.tape().relu(x),
            Nonlinearity::LeakyRelu => p.tape().leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

/// 3D convolution with weights `[out, in, k, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: String,
    pub bias: Option<String>,
    pub geom: Conv3dGeometry,
}

impl Conv3d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: Conv3dGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = geom.kernel;
        let fan_in = (cin * k[0] * k[1] * k[2]) as f64;
        let weight = format!("{name}.weight");
        store.insert(
            &weight,
            Tensor::randn(&[cout, cin, k[0], k[1], k[2]], (2.0 / fan_in).sqrt(), rng),
        )?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[cout]))?;
            Some(b)
        } else {
            None
        };
        Ok(Conv3d { weight, bias, geom })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let w = p.var(&self.weight)?;
        let b = self.bias.as_deref().map(|b| p.var(b)).transpose()?;
        p.tape().conv3d(x, w, b, self.geom)
    }
}

/// Affine map over the last axis with weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
}

impl Linear {
    /// Truncated-normal (std 0.02) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, Tensor::trunc_normal(&[cin, cout], 0.02, rng))?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[cout]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let w = p.var(&self.weight)?;
        let b = self.bias.as_deref().map(|b| p.var(b)).transpose()?;
        p.tape().linear(x, w, b)
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = format!("{name}.weight");
        let beta = format!("{name}.bias");
        store.insert(&gamma, Tensor::ones(&[c]))?;
        store.insert(&beta, Tensor::zeros(&[c]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        p.tape().layer_norm(x, p.var(&self.gamma)?, p.var(&self.beta)?)
    }
}

/// Per-channel normalisation of `[B, C, D, H, W]` maps.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: String,
    pub beta: String,
    pub kind: NormKind,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, kind: NormKind) -> Result<Self> {
        let gamma = format!("{name}.weight");
        let beta = format!("{name}.bias");
        store.insert(&gamma, Tensor::ones(&[c]))?;
        store.insert(&beta, Tensor::zeros(&[c]))?;
        Ok(ChannelNorm { gamma, beta, kind })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let (g, b) = (p.var(&self.gamma)?, p.var(&self.beta)?);
        p.tape().channel_norm(x, g, b, self.kind == NormKind::Batch)
    }
}

/// conv 3³ -> norm -> nonlinearity.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: ChannelNorm,
    pub act: Nonlinearity,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm: NormKind,
        act: Nonlinearity,
        rng: &mut R,
    ) -> Result<Self> {
        let geom = Conv3dGeometry::cube(3, stride, 1);
        Ok(ConvBlock {
            conv: Conv3d::new(store, &format!("{name}.conv"), cin, cout, geom, false, rng)?,
            norm: ChannelNorm::new(store, &format!("{name}.norm"), cout, norm)?,
            act,
        })
    }

    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(p, x)?;
        let y = self.norm.forward(p, y)?;
        Ok(self.act.apply(p, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::init_rng;

    #[test]
    fn conv_block_preserves_or_halves_dims() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0, "t");
        let a = ConvBlock::new(&mut store, "a", 2, 4, 1, NormKind::Instance, Nonlinearity::Relu, &mut rng).unwrap();
        let b = ConvBlock::new(&mut store, "b", 4, 8, 2, NormKind::Batch, Nonlinearity::LeakyRelu, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(Tensor::randn(&[1, 2, 6, 6, 6], 1.0, &mut rng));
        let y = a.forward(&p, x).unwrap();
        assert_eq!(tape.shape(y), [1, 4, 6, 6, 6]);
        let z = b.forward(&p, y).unwrap();
        assert_eq!(tape.shape(z), [1, 8, 3, 3, 3]);
        assert_eq!(store.len(), 6);
    }
}
