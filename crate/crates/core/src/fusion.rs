//! Cross-branch fusion and the assembled network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv3d;
use crate::ops::Conv3dGeometry;
use crate::params::{init_rng, Bound, ParamStore};
use crate::swin3d::{SwinConfig, SwinTransformer};
use crate::tensor::Tensor;
use crate::unet3d::{Unet, UnetConfig, NUM_STAGES, UNET_STRIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Add,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// 1-based U-Net stages that receive Swin features.
    pub enabled_stages: Vec<usize>,
    /// `(unet stage, swin stage)` pairs, 1-based.
    pub pairing: Vec<(usize, usize)>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Add,
            enabled_stages: vec![1, 2, 3, 4],
            pairing: (1..=NUM_STAGES).map(|i| (i, i)).collect(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fusion: {m}")));
        let in_range = |s: usize| (1..=NUM_STAGES).contains(&s);
        let mut seen = [false; NUM_STAGES + 1];
        for &(i, j) in &self.pairing {
            if !in_range(i) || !in_range(j) {
                return bad(format!("pairing ({i}, {j}) is outside 1..={NUM_STAGES}"));
            }
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("unet stage {i} is paired twice"));
            }
        }
        let mut enabled = [false; NUM_STAGES + 1];
        for &s in &self.enabled_stages {
            if !in_range(s) || !seen[s] {
                return bad(format!("enabled stage {s} has no pairing"));
            }
            if std::mem::replace(&mut enabled[s], true) {
                return bad(format!("stage {s} is enabled twice"));
            }
        }
        Ok(())
    }

    pub fn is_enabled(&self, stage: usize) -> bool {
        self.enabled_stages.contains(&stage)
    }

    /// Swin stage paired with U-Net stage `i`.
    pub fn partner(&self, i: usize) -> Option<usize> {
        self.pairing.iter().find(|p| p.0 == i).map(|p| p.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtnConfig {
    pub unet: UnetConfig,
    pub swin: SwinConfig,
    pub fusion: FusionConfig,
    pub input_size: [usize; 3],
}

impl Default for CtnConfig {
    fn default() -> Self {
        CtnConfig {
            unet: UnetConfig::default(),
            swin: SwinConfig::default(),
            fusion: FusionConfig::default(),
            input_size: [64, 64, 64],
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl CtnConfig {
    /// Per-axis multiple every input dimension must satisfy.
    pub fn input_multiple(&self) -> [usize; 3] {
        let s = self.swin.input_multiple();
        std::array::from_fn(|a| UNET_STRIDE / gcd(UNET_STRIDE, s[a]) * s[a])
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.swin.validate()?;
        self.fusion.validate()?;
        if self.swin.in_channels != self.unet.in_channels {
            return Err(Error::Config("unet and swin must read the same input channels".into()));
        }
        let m = self.input_multiple();
        if (0..3).any(|a| self.input_size[a] == 0 || self.input_size[a] % m[a] != 0) {
            return Err(Error::Config(format!(
                "input_size {:?} must be a positive multiple of {m:?}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// `F_u + F_s` (element-wise).
pub fn fuse_add(tape: &Tape, f_u: Var, f_s: Var) -> Result<Var> {
    let (a, b) = (tape.shape(f_u), tape.shape(f_s));
    if a != b {
        return Err(Error::Shape(format!("fuse_add: {a:?} vs {b:?}")));
    }
    tape.add(f_u, f_s)
}

/// `Conv([F_u, F_s])` back to `F_u`'s channel count.
pub fn fuse_concat(p: &Bound<'_>, f_u: Var, f_s: Var, conv: &Conv3d) -> Result<Var> {
    let tape = p.tape();
    let (a, b) = (tape.shape(f_u), tape.shape(f_s));
    if a.len() != 5 || b.len() != 5 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!("fuse_concat: {a:?} vs {b:?}")));
    }
    let cat = tape.concat_channels(f_u, f_s)?;
    conv.forward(p, cat)
}

/// Trilinear resize to `dims` followed by a bias-free 1x1x1 projection.
pub fn reshape_to(p: &Bound<'_>, f_s: Var, dims: [usize; 3], proj: &Conv3d) -> Result<Var> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("reshape_to target {dims:?}")));
    }
    let r = p.tape().resize_trilinear(f_s, dims)?;
    proj.forward(p, r)
}

/// Parameters of one fusion point.
pub struct FusionStage {
    pub unet_stage: usize,
    pub swin_stage: usize,
    pub proj: Conv3d,
    pub conv: Option<Conv3d>,
}

/// U-Net with an optional parallel Swin branch fused into its encoder.
pub struct Ctn {
    cfg: CtnConfig,
    unet: Unet,
    swin: Option<SwinTransformer>,
    fusions: Vec<FusionStage>,
}

impl Ctn {
    /// Registers `unet.*`, `swin.*` and `fusion.*` parameters; the Swin branch and
    /// fusion layers exist only when some stage is enabled.
    pub fn new(cfg: &CtnConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let unet = Unet::new(&cfg.unet, store, seed)?;
        let mut stages: Vec<usize> = cfg.fusion.enabled_stages.clone();
        stages.sort_unstable();
        let swin = if stages.is_empty() {
            None
        } else {
            Some(SwinTransformer::new(&cfg.swin, store, seed)?)
        };
        let mut fusions = Vec::new();
        for i in stages {
            let j = cfg.fusion.partner(i).expect("validated pairing");
            let mut rng = init_rng(seed, &format!("fusion.stage{i}"));
            let cu = cfg.unet.stage_channels[i - 1];
            let cs = cfg.swin.stage_channels[j - 1];
            let name = format!("fusion.stage{i}");
            let proj = Conv3d::new(store, &format!("{name}.proj"), cs, cu, Conv3dGeometry::cube(1, 1, 0), false, &mut rng)?;
            let conv = match cfg.fusion.mode {
                FusionMode::Add => None,
                FusionMode::Concat => Some(Conv3d::new(
                    store,
                    &format!("{name}.conv"),
                    2 * cu,
                    cu,
                    Conv3dGeometry::cube(3, 1, 1),
                    true,
                    &mut rng,
                )?),
            };
            fusions.push(FusionStage {
                unet_stage: i,
                swin_stage: j,
                proj,
                conv,
            });
        }
        Ok(Ctn {
            cfg: cfg.clone(),
            unet,
            swin,
            fusions,
        })
    }

    pub fn config(&self) -> &CtnConfig {
        &self.cfg
    }

    pub fn unet(&self) -> &Unet {
        &self.unet
    }

    pub fn swin(&self) -> Option<&SwinTransformer> {
        self.swin.as_ref()
    }

    pub fn fusions(&self) -> &[FusionStage] {
        &self.fusions
    }

    /// Logits `[B, num_classes, D, H, W]`.
    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let tape = p.tape();
        let s = tape.shape(x);
        if s.len() != 5 || s[2..] != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "input {s:?} does not match input_size {:?}",
                self.cfg.input_size
            )));
        }
        let swin_out = match &self.swin {
            Some(swin) => swin.forward(p, x)?,
            None => Vec::new(),
        };
        let mut hook = |i: usize, y: Var| -> Result<Var> {
            let Some(f) = self.fusions.iter().find(|f| f.unet_stage == i + 1) else {
                return Ok(y);
            };
            let ys = tape.shape(y);
            let fs = reshape_to(p, swin_out[f.swin_stage - 1], [ys[2], ys[3], ys[4]], &f.proj)?;
            match &f.conv {
                None => fuse_add(tape, y, fs),
                Some(conv) => fuse_concat(p, y, fs, conv),
            }
        };
        let enc = self.unet.encode_with(p, x, &mut hook)?;
        self.unet.decode(p, &enc)
    }

    /// Inference without recording gradients.
    pub fn predict_logits(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&p, xv)?;
        Ok(tape.get(y))
    }
}
