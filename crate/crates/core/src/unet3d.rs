//! 3D U-Net backbone.
//!
//! Layout for `stage_channels = [c1, c2, c3, c4]`:
//! stem (full resolution, c1) -> four strided stages at /2, /4, /8, /16 ->
//! bottleneck (/16, c4) -> three skip-connected decoder levels back to /2 ->
//! a final level that joins the stem at full resolution -> 1x1x1 head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvBlock, NormKind, Nonlinearity};
use crate::ops::Conv3dGeometry;
use crate::params::{init_rng, Bound, ParamStore};

pub const NUM_STAGES: usize = 4;
/// Total downsampling of the encoder.
pub const UNET_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub norm_kind: NormKind,
    pub nonlinearity: Nonlinearity,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            in_channels: 1,
            num_classes: 3,
            stage_channels: [32, 64, 128, 256],
            norm_kind: NormKind::Instance,
            nonlinearity: Nonlinearity::LeakyRelu,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("unet: in_channels and num_classes must be positive".into()));
        }
        let c = self.stage_channels;
        if c[0] == 0 || c.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "unet: stage_channels must be strictly increasing, got {c:?}"
            )));
        }
        Ok(())
    }
}

/// Encoder outputs consumed by the decoder.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub stem: Var,
    pub stages: [Var; NUM_STAGES],
    pub bottleneck: Var,
}

struct Stage {
    down: ConvBlock,
    conv: ConvBlock,
}

struct DecoderLevel {
    first: ConvBlock,
    second: Option<ConvBlock>,
}

pub struct Unet {
    cfg: UnetConfig,
    stem: ConvBlock,
    stages: Vec<Stage>,
    bottleneck: [ConvBlock; 2],
    /// Levels for stages 3, 2, 1 (0-based 2, 1, 0), then the full-resolution level.
    decoder: Vec<DecoderLevel>,
    head: Conv3d,
}

impl Unet {
    /// Registers parameters under `unet.*`, drawn from the `unet` stream of `seed`.
    pub fn new(cfg: &UnetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, "unet");
        let (nk, act) = (cfg.norm_kind, cfg.nonlinearity);
        let c = cfg.stage_channels;
        let mut block = |store: &mut ParamStore, name: &str, cin, cout, stride| {
            ConvBlock::new(store, &format!("unet.{name}"), cin, cout, stride, nk, act, &mut rng)
        };
        let stem = block(store, "stem", cfg.in_channels, c[0], 1)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let cin = if i == 0 { c[0] } else { c[i - 1] };
            stages.push(Stage {
                down: block(store, &format!("enc{}.down", i + 1), cin, c[i], 2)?,
                conv: block(store, &format!("enc{}.conv", i + 1), c[i], c[i], 1)?,
            });
        }
        let bottleneck = [
            block(store, "bottleneck.0", c[3], c[3], 1)?,
            block(store, "bottleneck.1", c[3], c[3], 1)?,
        ];
        let mut decoder = Vec::with_capacity(NUM_STAGES);
        for k in (0..NUM_STAGES - 1).rev() {
            decoder.push(DecoderLevel {
                first: block(store, &format!("dec{}.0", k + 1), c[k] + c[k + 1], c[k], 1)?,
                second: Some(block(store, &format!("dec{}.1", k + 1), c[k], c[k], 1)?),
            });
        }
        decoder.push(DecoderLevel {
            first: block(store, "dec0.0", 2 * c[0], c[0], 1)?,
            second: None,
        });
        let head = Conv3d::new(
            store,
            "unet.head",
            c[0],
            cfg.num_classes,
            Conv3dGeometry::cube(1, 1, 0),
            true,
            &mut rng,
        )?;
        Ok(Unet {
            cfg: cfg.clone(),
            stem,
            stages,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "unet expects [B, {}, D, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if shape[2..].iter().any(|&d| d == 0 || d % UNET_STRIDE != 0) {
            return Err(Error::Shape(format!(
                "unet spatial dims {:?} must be positive multiples of {UNET_STRIDE}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// Runs the encoder, letting `hook(stage, output)` replace each stage output
    /// (0-based stage index) before it feeds the skip connection and the next stage.
    pub fn encode_with(
        &self,
        p: &Bound<'_>,
        x: Var,
        hook: &mut dyn FnMut(usize, Var) -> Result<Var>,
    ) -> Result<Encoded> {
        self.check_input(&p.tape().shape(x))?;
        let stem = self.stem.forward(p, x)?;
        let mut h = stem;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let y = stage.down.forward(p, h)?;
            let y = stage.conv.forward(p, y)?;
            h = hook(i, y)?;
            outs.push(h);
        }
        let b = self.bottleneck[0].forward(p, h)?;
        let bottleneck = self.bottleneck[1].forward(p, b)?;
        Ok(Encoded {
            stem,
            stages: [outs[0], outs[1], outs[2], outs[3]],
            bottleneck,
        })
    }

    /// Runs the encoder; `taps[i]`, when present, is added to stage `i`'s output.
    pub fn encode(&self, p: &Bound<'_>, x: Var, taps: Option<&[Option<Var>; NUM_STAGES]>) -> Result<Encoded> {
        let tape = p.tape();
        self.encode_with(p, x, &mut |i, y| match taps.and_then(|t| t[i]) {
            None => Ok(y),
            Some(tap) => {
                let (ys, ts) = (tape.shape(y), tape.shape(tap));
                if ys != ts {
                    return Err(Error::Shape(format!("tap for stage {} is {ts:?}, stage output is {ys:?}", i + 1)));
                }
                tape.add(y, tap)
            }
        })
    }

    /// Decodes to logits `[B, num_classes, D, H, W]`.
    pub fn decode(&self, p: &Bound<'_>, enc: &Encoded) -> Result<Var> {
        let tape = p.tape();
        let c = self.cfg.stage_channels;
        let expect = |v: Var, ch: usize| -> Result<[usize; 3]> {
            let s = tape.shape(v);
            if s.len() != 5 || s[1] != ch {
                return Err(Error::Shape(format!("decoder input {s:?} should have {ch} channels")));
            }
            Ok([s[2], s[3], s[4]])
        };
        expect(enc.bottleneck, c[3])?;
        let mut d = enc.bottleneck;
        let skips = [enc.stages[2], enc.stages[1], enc.stages[0], enc.stem];
        let skip_channels = [c[2], c[1], c[0], c[0]];
        for ((level, &skip), &ch) in self.decoder.iter().zip(&skips).zip(&skip_channels) {
            let dims = expect(skip, ch)?;
            let up = tape.resize_trilinear(d, dims)?;
            let cat = tape.concat_channels(skip, up)?;
            d = level.first.forward(p, cat)?;
            if let Some(second) = &level.second {
                d = second.forward(p, d)?;
            }
        }
        self.head.forward(p, d)
    }

    /// Encoder without taps followed by the decoder.
    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let enc = self.encode(p, x, None)?;
        self.decode(p, &enc)
    }

    /// Name of the head convolution's weight (and bias).
    pub fn head_params(&self) -> (&str, Option<&str>) {
        (&self.head.weight, self.head.bias.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn toy() -> UnetConfig {
        UnetConfig {
            stage_channels: [4, 6, 8, 10],
            ..UnetConfig::default()
        }
    }

    fn input(n: usize, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[1, 1, n, n, n], 1.0, &mut rng)
    }

    #[test]
    fn stage_shapes_follow_the_halving_law() {
        let mut store = ParamStore::new();
        let net = Unet::new(&toy(), &mut store, 0).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(input(32, 1));
        let enc = net.encode(&p, x, None).unwrap();
        for (i, s) in enc.stages.iter().enumerate() {
            let n = 32 >> (i + 1);
            assert_eq!(tape.shape(*s), [1, toy().stage_channels[i], n, n, n]);
        }
        let logits = net.decode(&p, &enc).unwrap();
        assert_eq!(tape.shape(logits), [1, 3, 32, 32, 32]);
        assert!(tape.value(logits).is_finite());
    }

    #[test]
    fn indivisible_input_and_bad_taps_are_rejected() {
        let mut store = ParamStore::new();
        let net = Unet::new(&toy(), &mut store, 0).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(input(24, 1));
        assert!(matches!(net.forward(&p, x), Err(Error::Shape(_))));
        let x = tape.constant(input(16, 1));
        let bad = tape.constant(Tensor::zeros(&[1, 4, 4, 4, 4]));
        assert!(net.encode(&p, x, Some(&[Some(bad), None, None, None])).is_err());
    }

    #[test]
    fn zero_taps_equal_no_taps() {
        let mut store = ParamStore::new();
        let net = Unet::new(&toy(), &mut store, 3).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let x = tape.constant(input(16, 2));
        let plain = net.forward(&p, x).unwrap();
        let taps: [Option<Var>; 4] = std::array::from_fn(|i| {
            let n = 16 >> (i + 1);
            Some(tape.constant(Tensor::zeros(&[1, toy().stage_channels[i], n, n, n])))
        });
        let enc = net.encode(&p, x, Some(&taps)).unwrap();
        let tapped = net.decode(&p, &enc).unwrap();
        assert_eq!(tape.get(plain), tape.get(tapped));
    }

    #[test]
    fn zero_head_weights_give_bias_logits() {
        let mut store = ParamStore::new();
        let net = Unet::new(&toy(), &mut store, 0).unwrap();
        let (w, b) = net.head_params();
        let (w, b) = (w.to_string(), b.unwrap().to_string());
        let shape = store.get(&w).unwrap().shape().to_vec();
        *store.get_mut(&w).unwrap() = Tensor::zeros(&shape);
        *store.get_mut(&b).unwrap() = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let logits = tape.get(net.forward(&p, tape.constant(input(16, 4))).unwrap());
        for (k, plane) in logits.data().chunks(16 * 16 * 16).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][k]));
        }
    }
}
