//! 3D Swin Transformer branch.
//!
//! Tokens travel between layers as channel-last rows `[B * d * h * w, C]`. Window
//! partitioning, cyclic shifting, padding and head splitting are folded into
//! precomputed gather maps, cached per token-grid geometry.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, LayerNorm, Linear};
use crate::ops::{Conv3dGeometry, GatherMap};
use crate::params::{init_rng, Bound, ParamStore};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
/// Additive attention mask value for disallowed token pairs.
pub const MASK_VALUE: f64 = -1.0e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub in_channels: usize,
    pub patch_size: [usize; 3],
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: [usize; 3],
    pub mlp_ratio: f64,
    pub qkv_bias: bool,
    /// Shifted-window blocks add the input of the preceding block as residual.
    pub pair_input_residual: bool,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            in_channels: 1,
            patch_size: [4, 4, 4],
            stage_channels: [48, 96, 192, 384],
            stage_depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: [4, 4, 4],
            mlp_ratio: 4.0,
            qkv_bias: true,
            pair_input_residual: false,
        }
    }
}

impl SwinConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("swin: {m}")));
        let c = self.stage_channels;
        if self.in_channels == 0 || c[0] == 0 {
            return bad("channels must be positive".into());
        }
        if c.windows(2).any(|w| w[1] != 2 * w[0]) {
            return bad(format!("stage_channels must double per stage, got {c:?}"));
        }
        for j in 0..NUM_STAGES {
            let h = self.num_heads[j];
            if h == 0 || c[j] % h != 0 {
                return bad(format!("stage {} has {} channels, not divisible by {h} heads", j + 1, c[j]));
            }
            let d = self.stage_depths[j];
            if d == 0 || d % 2 != 0 {
                return bad(format!("stage {} depth {d} must be even and positive", j + 1));
            }
        }
        if self.patch_size.contains(&0) || self.window_size.contains(&0) {
            return bad("patch_size and window_size must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Input divisibility per axis: patch size times the three merges.
    pub fn input_multiple(&self) -> [usize; 3] {
        self.patch_size.map(|p| p * 8)
    }

    fn hidden(&self, c: usize) -> usize {
        ((c as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

fn idx3(dims: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

fn unidx3(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// How one token grid is tiled into (possibly shifted, padded) windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub grid: [usize; 3],
    /// Effective window: the configured window clamped to the grid.
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl WindowGeometry {
    /// Windows larger than the grid shrink to it; such axes are never shifted.
    pub fn new(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Self {
        let ew: [usize; 3] = std::array::from_fn(|a| window[a].min(grid[a]));
        let shift = std::array::from_fn(|a| if shifted && grid[a] > window[a] { ew[a] / 2 } else { 0 });
        Self::with_shift(grid, ew, shift)
    }

    /// Explicit window and shift (`shift < window`).
    pub fn with_shift(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Self {
        let padded = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        WindowGeometry {
            grid,
            window,
            shift,
            padded,
        }
    }

    pub fn windows_per_axis(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.padded[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.windows_per_axis().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != [0; 3]
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.grid
    }

    /// `(window, slot)` holding grid position `r`.
    pub fn locate(&self, r: [usize; 3]) -> (usize, usize) {
        let p: [usize; 3] = std::array::from_fn(|a| (r[a] + self.padded[a] - self.shift[a]) % self.padded[a]);
        let w = std::array::from_fn(|a| p[a] / self.window[a]);
        let t = std::array::from_fn(|a| p[a] % self.window[a]);
        (idx3(self.windows_per_axis(), w), idx3(self.window, t))
    }

    /// Grid position shown in `(window, slot)`, or `None` for padding.
    pub fn source(&self, win: usize, slot: usize) -> Option<[usize; 3]> {
        let w = unidx3(self.windows_per_axis(), win);
        let t = unidx3(self.window, slot);
        let q: [usize; 3] = std::array::from_fn(|a| (w[a] * self.window[a] + t[a] + self.shift[a]) % self.padded[a]);
        (0..3).all(|a| q[a] < self.grid[a]).then_some(q)
    }

    /// Region of a position in the shifted frame; tokens may attend only within a region.
    fn region(&self, win: usize, slot: usize) -> usize {
        let w = unidx3(self.windows_per_axis(), win);
        let t = unidx3(self.window, slot);
        let r: [usize; 3] = std::array::from_fn(|a| {
            let p = w[a] * self.window[a] + t[a];
            if self.shift[a] == 0 || p < self.padded[a] - self.window[a] {
                0
            } else if p < self.padded[a] - self.shift[a] {
                1
            } else {
                2
            }
        });
        idx3([3, 3, 3], r)
    }

    /// Additive mask `[num_windows, T, T]`: zero when query and key share a region
    /// and the key is real (or both are padding), [`MASK_VALUE`] otherwise.
    pub fn attention_mask(&self) -> Option<Tensor> {
        if !self.is_shifted() && !self.is_padded() {
            return None;
        }
        let (nw, t) = (self.num_windows(), self.tokens_per_window());
        let mut m = Tensor::zeros(&[nw, t, t]);
        let data = m.data_mut();
        for w in 0..nw {
            let info: Vec<(usize, bool)> = (0..t)
                .map(|s| (self.region(w, s), self.source(w, s).is_none()))
                .collect();
            for (a, &(ra, pa)) in info.iter().enumerate() {
                for (b, &(rb, pb)) in info.iter().enumerate() {
                    if ra != rb || (pb && !pa) {
                        data[(w * t + a) * t + b] = MASK_VALUE;
                    }
                }
            }
        }
        Some(m)
    }
}

/// Partitions a channel-first token grid `[B, C, d, h, w]` into windows
/// `[B * nW, T, C]` (zero-filled padding), after rolling by `-shift`.
pub fn window_partition(t: &Tensor, window: [usize; 3], shift: [usize; 3]) -> Result<Tensor> {
    let [b, c, d, h, w] = t.dims5()?;
    let geo = WindowGeometry::with_shift([d, h, w], window, shift);
    let (nw, tw, n) = (geo.num_windows(), geo.tokens_per_window(), d * h * w);
    let map = GatherMap::from_fn(t.len(), &[b * nw, tw, c], |i| {
        let ch = i % c;
        let slot = (i / c) % tw;
        let g = i / (c * tw);
        let r = geo.source(g % nw, slot)?;
        Some(((g / nw) * c + ch) * n + idx3(geo.grid, r))
    });
    Tensor::from_vec(&[b * nw, tw, c], map.apply(t.data()))
}

/// Inverse of [`window_partition`] for a grid of `shape = [B, C, d, h, w]`.
pub fn window_unpartition(windows: &Tensor, shape: [usize; 5], window: [usize; 3], shift: [usize; 3]) -> Result<Tensor> {
    let [b, c, d, h, w] = shape;
    let geo = WindowGeometry::with_shift([d, h, w], window, shift);
    let (nw, tw, n) = (geo.num_windows(), geo.tokens_per_window(), d * h * w);
    if windows.shape() != [b * nw, tw, c] {
        return Err(Error::Shape(format!("{:?} are not windows of {shape:?}", windows.shape())));
    }
    let map = GatherMap::from_fn(windows.len(), &shape, |i| {
        let r = unidx3(geo.grid, i % n);
        let (ch, bb) = ((i / n) % c, i / (n * c));
        let (win, slot) = geo.locate(r);
        Some(((bb * nw + win) * tw + slot) * c + ch)
    });
    Tensor::from_vec(&shape, map.apply(windows.data()))
}

/// Gather maps for one attention layout.
struct WindowPlan {
    q: Rc<GatherMap>,
    kt: Rc<GatherMap>,
    v: Rc<GatherMap>,
    back: Rc<GatherMap>,
    bias: Rc<GatherMap>,
    mask: Option<Rc<Tensor>>,
    geo: WindowGeometry,
}

type PlanKey = (usize, [usize; 3], bool, usize, usize);

impl WindowPlan {
    fn build(batch: usize, grid: [usize; 3], cfg_window: [usize; 3], shifted: bool, c: usize, heads: usize) -> Self {
        let geo = WindowGeometry::new(grid, cfg_window, shifted);
        let (nw, t, n) = (geo.num_windows(), geo.tokens_per_window(), geo.num_tokens());
        let hd = c / heads;
        let g_total = batch * nw * heads;
        let in_len = batch * n * 3 * c;
        // Token row feeding (group, slot), if real.
        let row = |g: usize, slot: usize| -> Option<usize> {
            let b = g / (nw * heads);
            let r = geo.source((g / heads) % nw, slot)?;
            Some(b * n + idx3(grid, r))
        };
        let q = GatherMap::from_fn(in_len, &[g_total, t, hd], |i| {
            let (e, slot, g) = (i % hd, (i / hd) % t, i / (hd * t));
            Some(row(g, slot)? * 3 * c + (g % heads) * hd + e)
        });
        let kt = GatherMap::from_fn(in_len, &[g_total, hd, t], |i| {
            let (slot, e, g) = (i % t, (i / t) % hd, i / (hd * t));
            Some(row(g, slot)? * 3 * c + c + (g % heads) * hd + e)
        });
        let v = GatherMap::from_fn(in_len, &[g_total, t, hd], |i| {
            let (e, slot, g) = (i % hd, (i / hd) % t, i / (hd * t));
            Some(row(g, slot)? * 3 * c + 2 * c + (g % heads) * hd + e)
        });
        let back = GatherMap::from_fn(g_total * t * hd, &[batch * n, c], |i| {
            let (ch, tok) = (i % c, i / c);
            let (b, r) = (tok / n, unidx3(grid, tok % n));
            let (win, slot) = geo.locate(r);
            Some((((b * nw + win) * heads + ch / hd) * t + slot) * hd + ch % hd)
        });
        // Relative offsets index a table sized by the configured window.
        let span: [usize; 3] = cfg_window.map(|w| 2 * w - 1);
        let table_len = span.iter().product::<usize>();
        let bias = GatherMap::from_fn(table_len * heads, &[heads, t, t], |i| {
            let (t2, t1, h) = (i % t, (i / t) % t, i / (t * t));
            let (a, b) = (unidx3(geo.window, t1), unidx3(geo.window, t2));
            let off: [usize; 3] = std::array::from_fn(|k| a[k] + cfg_window[k] - 1 - b[k]);
            Some(idx3(span, off) * heads + h)
        });
        WindowPlan {
            q: Rc::new(q),
            kt: Rc::new(kt),
            v: Rc::new(v),
            back: Rc::new(back),
            bias: Rc::new(bias),
            mask: geo.attention_mask().map(Rc::new),
            geo,
        }
    }
}

/// Window attention of one block.
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// Relative position bias table `[(2wd-1)(2wh-1)(2ww-1), heads]`.
    pub rel_bias: String,
    pub heads: usize,
    pub channels: usize,
    pub shifted: bool,
}

/// Output of [`WindowAttention::forward`].
pub struct AttentionTrace {
    pub out: Var,
    /// Attention probabilities `[B * nW * heads, T, T]`.
    pub probs: Var,
    pub geometry: WindowGeometry,
}

impl WindowAttention {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &SwinConfig,
        c: usize,
        heads: usize,
        shifted: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let qkv = Linear::new(store, &format!("{name}.qkv"), c, 3 * c, cfg.qkv_bias, rng)?;
        let proj = Linear::new(store, &format!("{name}.proj"), c, c, true, rng)?;
        let rel_bias = format!("{name}.rel_bias");
        let span: usize = cfg.window_size.iter().map(|w| 2 * w - 1).product();
        store.insert(&rel_bias, Tensor::trunc_normal(&[span, heads], 0.02, rng))?;
        Ok(WindowAttention {
            qkv,
            proj,
            rel_bias,
            heads,
            channels: c,
            shifted,
        })
    }
}

struct MlpBlock {
    fc1: Linear,
    fc2: Linear,
}

/// One pre-norm transformer block: attention and MLP sub-blocks, each with a residual.
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    mlp: MlpBlock,
}

struct Stage {
    blocks: Vec<SwinBlock>,
    merge: Option<(LayerNorm, Linear)>,
}

/// Tiny 3D Swin Transformer producing four stage feature maps.
pub struct SwinTransformer {
    cfg: SwinConfig,
    embed: Conv3d,
    stages: Vec<Stage>,
    plans: RefCell<HashMap<PlanKey, Rc<WindowPlan>>>,
}

impl SwinTransformer {
    /// Registers parameters under `swin.*`, drawn from the `swin` stream of `seed`.
    pub fn new(cfg: &SwinConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init_rng(seed, "swin");
        let p = cfg.patch_size;
        let geom = Conv3dGeometry {
            kernel: p,
            stride: p,
            padding: [0; 3],
        };
        let embed = Conv3d::new(store, "swin.patch_embed", cfg.in_channels, cfg.stage_channels[0], geom, true, &mut rng)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for j in 0..NUM_STAGES {
            let c = cfg.stage_channels[j];
            let mut blocks = Vec::with_capacity(cfg.stage_depths[j]);
            for k in 0..cfg.stage_depths[j] {
                let name = format!("swin.stage{}.block{k}", j + 1);
                let attn = WindowAttention::new(store, &format!("{name}.attn"), cfg, c, cfg.num_heads[j], k % 2 == 1, &mut rng)?;
                let hidden = cfg.hidden(c);
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), c)?,
                    attn,
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), c)?,
                    mlp: MlpBlock {
                        fc1: Linear::new(store, &format!("{name}.mlp.fc1"), c, hidden, true, &mut rng)?,
                        fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, c, true, &mut rng)?,
                    },
                });
            }
            let merge = if j + 1 < NUM_STAGES {
                let name = format!("swin.stage{}.merge", j + 1);
                Some((
                    LayerNorm::new(store, &format!("{name}.norm"), 8 * c)?,
                    Linear::new(store, &format!("{name}.reduction"), 8 * c, 2 * c, false, &mut rng)?,
                ))
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(SwinTransformer {
            cfg: cfg.clone(),
            embed,
            stages,
            plans: RefCell::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SwinConfig {
        &self.cfg
    }

    /// Blocks of stage `j` (0-based).
    pub fn blocks(&self, j: usize) -> &[SwinBlock] {
        &self.stages[j].blocks
    }

    fn plan(&self, batch: usize, grid: [usize; 3], attn: &WindowAttention) -> Rc<WindowPlan> {
        let key = (batch, grid, attn.shifted, attn.channels, attn.heads);
        self.plans
            .borrow_mut()
            .entry(key)
            .or_insert_with(|| {
                Rc::new(WindowPlan::build(batch, grid, self.cfg.window_size, attn.shifted, attn.channels, attn.heads))
            })
            .clone()
    }

    /// Window attention on normalised rows `h` (`[B * N, C]`) of a `[B, grid]` token
    /// grid, without residual.
    pub fn attention(&self, p: &Bound<'_>, attn: &WindowAttention, h: Var, batch: usize, grid: [usize; 3]) -> Result<AttentionTrace> {
        let tape = p.tape();
        let plan = self.plan(batch, grid, attn);
        let (nw, t) = (plan.geo.num_windows(), plan.geo.tokens_per_window());
        let heads = attn.heads;
        let hd = attn.channels / heads;
        let qkv = attn.qkv.forward(p, h)?;
        let q = tape.gather(qkv, plan.q.clone())?;
        let q = tape.scale(q, 1.0 / (hd as f64).sqrt());
        let kt = tape.gather(qkv, plan.kt.clone())?;
        let v = tape.gather(qkv, plan.v.clone())?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.reshape(scores, &[batch * nw, heads, t, t])?;
        let bias = tape.gather(p.var(&attn.rel_bias)?, plan.bias.clone())?;
        let scores = tape.add_broadcast(scores, bias)?;
        let mut scores = tape.reshape(scores, &[batch * nw * heads, t, t])?;
        if let Some(mask) = &plan.mask {
            scores = tape.add_window_mask(scores, mask.clone(), heads)?;
        }
        let probs = tape.softmax_last(scores);
        let ctx = tape.bmm(probs, v)?;
        let merged = tape.gather(ctx, plan.back.clone())?;
        let out = attn.proj.forward(p, merged)?;
        Ok(AttentionTrace {
            out,
            probs,
            geometry: plan.geo.clone(),
        })
    }

    /// One block on rows `z`; `residual` is what the attention output is added to.
    pub fn block_forward(&self, p: &Bound<'_>, block: &SwinBlock, z: Var, residual: Var, batch: usize, grid: [usize; 3]) -> Result<Var> {
        let tape = p.tape();
        let h = block.norm1.forward(p, z)?;
        let a = self.attention(p, &block.attn, h, batch, grid)?.out;
        let zhat = tape.add(a, residual)?;
        let m = block.norm2.forward(p, zhat)?;
        let m = block.mlp.fc1.forward(p, m)?;
        let m = tape.gelu(m);
        let m = block.mlp.fc2.forward(p, m)?;
        tape.add(zhat, m)
    }

    /// Patch embedding: `[B, C_in, D, H, W]` to channel-first tokens `[B, C, D/p, H/p, W/p]`.
    pub fn patch_embed(&self, p: &Bound<'_>, x: Var) -> Result<Var> {
        let s = p.tape().shape(x);
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!("swin expects [B, {}, D, H, W], got {s:?}", self.cfg.in_channels)));
        }
        if (0..3).any(|a| s[2 + a] == 0 || s[2 + a] % self.cfg.patch_size[a] != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} are not divisible by patch size {:?}",
                &s[2..],
                self.cfg.patch_size
            )));
        }
        self.embed.forward(p, x)
    }

    /// Stage feature maps `F_s^1..F_s^4`, channel-first, taken before merging.
    pub fn forward(&self, p: &Bound<'_>, x: Var) -> Result<Vec<Var>> {
        let tape = p.tape();
        let s = tape.shape(x);
        let m = self.cfg.input_multiple();
        if s.len() == 5 && (0..3).any(|a| s[2 + a] % m[a] != 0) {
            return Err(Error::Shape(format!("swin input dims {:?} must be multiples of {m:?}", &s[2..])));
        }
        let tokens = self.patch_embed(p, x)?;
        let ts = tape.shape(tokens);
        let batch = ts[0];
        let mut grid = [ts[2], ts[3], ts[4]];
        let mut c = ts[1];
        let rows = tape.permute(tokens, &[0, 2, 3, 4, 1])?;
        let mut z = tape.reshape(rows, &[batch * grid.iter().product::<usize>(), c])?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            let mut prev_input = z;
            for (k, block) in stage.blocks.iter().enumerate() {
                let residual = if self.cfg.pair_input_residual && k % 2 == 1 { prev_input } else { z };
                prev_input = z;
                z = self.block_forward(p, block, z, residual, batch, grid)?;
            }
            let fm = tape.reshape(z, &[batch, grid[0], grid[1], grid[2], c])?;
            outs.push(tape.permute(fm, &[0, 4, 1, 2, 3])?);
            if let Some((norm, reduction)) = &stage.merge {
                let merged = patch_merge_rows(tape, z, batch, grid, c)?;
                let merged = norm.forward(p, merged)?;
                z = reduction.forward(p, merged)?;
                grid = grid.map(|g| g / 2);
                c *= 2;
            }
        }
        Ok(outs)
    }
}

/// Gathers each 2x2x2 neighbourhood of rows `[B * N, C]` into `[B * N / 8, 8C]`;
/// channel `o * C + c` holds neighbour `o = 4 dd + 2 dh + dw`.
pub fn patch_merge_rows(tape: &Tape, z: Var, batch: usize, grid: [usize; 3], c: usize) -> Result<Var> {
    if grid.iter().any(|g| g % 2 != 0) {
        return Err(Error::Shape(format!("patch merge needs even token dims, got {grid:?}")));
    }
    let half = grid.map(|g| g / 2);
    let (n, m) = (grid.iter().product::<usize>(), half.iter().product::<usize>());
    let map = GatherMap::from_fn(batch * n * c, &[batch * m, 8 * c], |i| {
        let (ch, row) = (i % (8 * c), i / (8 * c));
        let (o, cc) = (ch / c, ch % c);
        let (b, q) = (row / m, unidx3(half, row % m));
        let r = [2 * q[0] + o / 4, 2 * q[1] + (o / 2) % 2, 2 * q[2] + o % 2];
        Some((b * n + idx3(grid, r)) * c + cc)
    });
    tape.gather(z, Rc::new(map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_row;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn partition_round_trip_with_shift_and_padding() {
        let t = Tensor::randn(&[2, 3, 5, 4, 6], 1.0, &mut rng(1));
        for (window, shift) in [([2, 2, 2], [0, 0, 0]), ([4, 4, 4], [2, 2, 2]), ([5, 4, 6], [0; 3])] {
            let w = window_partition(&t, window, shift).unwrap();
            let back = window_unpartition(&w, [2, 3, 5, 4, 6], window, shift).unwrap();
            assert_eq!(back, t);
        }
        let geo = WindowGeometry::new([8, 8, 8], [4, 4, 4], false);
        assert_eq!((geo.num_windows(), geo.tokens_per_window()), (8, 64));
        let geo = WindowGeometry::new([2, 2, 2], [4, 4, 4], true);
        assert_eq!((geo.num_windows(), geo.shift), (1, [0; 3]));
    }

    #[test]
    fn mask_allows_exactly_same_shifted_tile() {
        let geo = WindowGeometry::new([8, 8, 8], [4, 4, 4], true);
        let m = geo.attention_mask().unwrap();
        let t = geo.tokens_per_window();
        let tile = |r: [usize; 3]| r.map(|v| (v as isize - 2).div_euclid(4));
        for w in 0..geo.num_windows() {
            for a in 0..t {
                for b in 0..t {
                    let (ra, rb) = (geo.source(w, a).unwrap(), geo.source(w, b).unwrap());
                    let allowed = m.data()[(w * t + a) * t + b] == 0.0;
                    assert_eq!(allowed, tile(ra) == tile(rb));
                }
            }
        }
    }

    #[test]
    fn merge_gathers_neighbourhoods() {
        let tape = Tape::no_grad();
        let (grid, c) = ([4, 4, 4], 2);
        let x = Tensor::randn(&[64, c], 1.0, &mut rng(2));
        let z = tape.constant(x.clone());
        let y = tape.get(patch_merge_rows(&tape, z, 1, grid, c).unwrap());
        assert_eq!(y.shape(), [8, 16]);
        for row in 0..8 {
            let q = unidx3([2, 2, 2], row);
            for o in 0..8 {
                let r = [2 * q[0] + o / 4, 2 * q[1] + (o / 2) % 2, 2 * q[2] + o % 2];
                for cc in 0..c {
                    assert_eq!(y.data()[row * 16 + o * c + cc], x.data()[idx3(grid, r) * c + cc]);
                }
            }
        }
        assert!(patch_merge_rows(&tape, z, 1, [4, 4, 3], c).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = SwinConfig {
            stage_channels: [8, 16, 32, 64],
            num_heads: [2, 2, 4, 4],
            ..SwinConfig::default()
        };
        let mut store = ParamStore::new();
        let net = SwinTransformer::new(&cfg, &mut store, 0).unwrap();
        let tape = Tape::no_grad();
        let p = Bound::new(&tape, &store);
        let grid = [6, 8, 8];
        let h = tape.constant(Tensor::randn(&[6 * 8 * 8, 8], 1.0, &mut rng(3)));
        for block in net.blocks(0) {
            let tr = net.attention(&p, &block.attn, h, 1, grid).unwrap();
            let probs = tape.get(tr.probs);
            let t = tr.geometry.tokens_per_window();
            for row in probs.data().chunks(t) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0));
            }
        }
        let mut row = vec![0.0, MASK_VALUE];
        softmax_row(&mut row);
        assert!(row[1] < 1e-7);
    }

    #[test]
    fn config_rules() {
        assert!(SwinConfig::default().validate().is_ok());
        let odd = SwinConfig {
            stage_depths: [2, 3, 2, 2],
            ..SwinConfig::default()
        };
        assert!(odd.validate().is_err());
        let heads = SwinConfig {
            num_heads: [5, 6, 12, 24],
            ..SwinConfig::default()
        };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn pair_input_residual_changes_the_output() {
        let base = SwinConfig {
            stage_channels: [8, 16, 32, 64],
            stage_depths: [2, 2, 2, 2],
            num_heads: [1, 2, 4, 8],
            ..SwinConfig::default()
        };
        let alt = SwinConfig {
            pair_input_residual: true,
            ..base.clone()
        };
        let x = Tensor::randn(&[1, 1, 32, 32, 32], 1.0, &mut rng(3));
        let run = |cfg: &SwinConfig| {
            let mut store = ParamStore::new();
            let swin = SwinTransformer::new(cfg, &mut store, 4).unwrap();
            let tape = Tape::no_grad();
            let p = Bound::new(&tape, &store);
            let xv = tape.constant(x.clone());
            let outs = swin.forward(&p, xv).unwrap();
            outs.into_iter().map(|v| tape.get(v)).collect::<Vec<_>>()
        };
        let (a, b) = (run(&base), run(&alt));
        assert_eq!(a[0].shape(), b[0].shape());
        assert!(a[0].max_abs_diff(&b[0]) > 1e-6);
    }
}
