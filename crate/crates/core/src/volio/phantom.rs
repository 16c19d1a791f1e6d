//! Procedural aorta + coronary-tree phantoms.
//!
//! The aorta is a vertical tube along the depth axis whose centreline sweeps a
//! gentle helix. The coronary tree is a binary tree of quadratic Bezier tubes
//! whose root starts inside the aorta; each generation shortens and thins.

use libm::{cos, sin, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelMask, Volume, AORTA, BACKGROUND, CORONARY};
use crate::error::{Error, Result};
use crate::grid::{index, largest_component_26, voxel_count};

type P3 = [f64; 3];

const AORTA_SEGMENTS: usize = 48;
const LENGTH_SHRINK: f64 = 0.7;
const RADIUS_SHRINK: f64 = 0.85;
/// Thinnest tube radius; at or above half the voxel diagonal a rasterised tube stays 26-connected.
const MIN_TUBE_RADIUS: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub grid_size: usize,
    pub aorta_radius_range: (f64, f64),
    pub coronary_radius_range: (f64, f64),
    pub branch_depth: usize,
    pub noise_sigma: f64,
    pub foreground_intensity: f64,
    pub background_intensity: f64,
    /// Voxel spacing in millimetres.
    pub spacing: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            grid_size: 64,
            aorta_radius_range: (5.0, 7.0),
            coronary_radius_range: (1.5, 2.5),
            branch_depth: 3,
            noise_sigma: 0.1,
            foreground_intensity: 1.0,
            background_intensity: 0.0,
            spacing: [1.0; 3],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (amin, amax) = self.aorta_radius_range;
        let (cmin, cmax) = self.coronary_radius_range;
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if !(amin >= 3.0 && amin <= amax) {
            return bad("aorta_radius_range needs 3 <= min <= max");
        }
        if !(cmin >= 1.0 && cmin <= cmax) {
            return bad("coronary_radius_range needs 1 <= min <= max");
        }
        if cmax >= amin {
            return bad("coronary radii must be smaller than the aorta");
        }
        if self.branch_depth == 0 {
            return bad("branch_depth must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative");
        }
        if !self.spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return bad("spacing must be positive");
        }
        // Aorta diameter, margins and room for the tree.
        if (self.grid_size as f64) < 4.0 * amax + 8.0 {
            return bad("radii too large for the grid; tubes would leave the volume");
        }
        Ok(())
    }
}

fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: P3) -> P3 {
    let n = sqrt(dot(a, a));
    if n > 0.0 {
        mul(a, 1.0 / n)
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Rasterises tubes into a label grid.
struct Canvas {
    n: usize,
    labels: Vec<u8>,
}

impl Canvas {
    fn clamp(&self, p: P3, r: f64) -> P3 {
        let lo = r + 1.0;
        let hi = self.n as f64 - 2.0 - r;
        p.map(|v| v.clamp(lo, hi))
    }

    /// Marks every voxel centre within `r` of segment `a`-`b`.
    fn capsule(&mut self, a: P3, b: P3, r: f64, label: u8) {
        let n = self.n as isize;
        let ab = sub(b, a);
        let len2 = dot(ab, ab);
        let lo: [isize; 3] = std::array::from_fn(|k| ((a[k].min(b[k]) - r).floor() as isize).max(0));
        let hi: [isize; 3] = std::array::from_fn(|k| ((a[k].max(b[k]) + r).ceil() as isize).min(n - 1));
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = [z as f64, y as f64, x as f64];
                    let t = if len2 > 0.0 {
                        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let d = sub(p, add(a, mul(ab, t)));
                    if dot(d, d) <= r * r {
                        let i = index([self.n; 3], z as usize, y as usize, x as usize);
                        self.labels[i] = self.labels[i].max(label);
                    }
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[P3], r: f64, label: u8) {
        for w in pts.windows(2) {
            self.capsule(w[0], w[1], r, label);
        }
    }
}

fn bezier(p0: P3, p1: P3, p2: P3, t: f64) -> P3 {
    let u = 1.0 - t;
    add(add(mul(p0, u * u), mul(p1, 2.0 * u * t)), mul(p2, t * t))
}

/// Random unit vector orthogonal to `d`.
fn perpendicular(d: P3, rng: &mut ChaCha8Rng) -> P3 {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let w = sub(v, mul(d, dot(v, d)));
        if dot(w, w) > 1e-3 {
            return normalize(w);
        }
    }
}

struct Branch {
    start: P3,
    dir: P3,
    length: f64,
    radius: f64,
    generation: usize,
}

fn grow_tree(canvas: &mut Canvas, root: Branch, depth: usize, rng: &mut ChaCha8Rng) {
    let mut stack = vec![root];
    while let Some(b) = stack.pop() {
        let p0 = b.start;
        let p2 = canvas.clamp(add(p0, mul(b.dir, b.length)), b.radius);
        let bend = perpendicular(b.dir, rng);
        let p1 = canvas.clamp(
            add(mul(add(p0, p2), 0.5), mul(bend, b.length * rng.random_range(-0.25..0.25))),
            b.radius,
        );
        let steps = (b.length.ceil() as usize).max(4);
        let pts: Vec<P3> = (0..=steps).map(|k| bezier(p0, p1, p2, k as f64 / steps as f64)).collect();
        canvas.polyline(&pts, b.radius, CORONARY);
        if b.generation + 1 >= depth {
            continue;
        }
        let tangent = normalize(sub(p2, p1));
        let axis = perpendicular(tangent, rng);
        for side in [1.0, -1.0] {
            let angle = rng.random_range(0.35..0.7);
            let dir = normalize(add(mul(tangent, cos(angle)), mul(axis, side * sin(angle))));
            stack.push(Branch {
                start: p2,
                dir,
                length: b.length * LENGTH_SHRINK,
                radius: (b.radius * RADIUS_SHRINK).max(MIN_TUBE_RADIUS),
                generation: b.generation + 1,
            });
        }
    }
}

/// Generates one phantom; identical specs give bit-identical outputs.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let n = spec.grid_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = Canvas {
        n,
        labels: vec![BACKGROUND; voxel_count([n; 3])],
    };

    let ra = rng.random_range(spec.aorta_radius_range.0..=spec.aorta_radius_range.1);
    let cy = nf * rng.random_range(0.37..0.47);
    let cx = nf * rng.random_range(0.37..0.47);
    let amp = nf * rng.random_range(0.03..0.08);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (z0, z1) = (ra + 1.0, nf - 2.0 - ra);
    let aorta_at = |t: f64| -> P3 {
        let a = std::f64::consts::PI * t + phase;
        [z0 + t * (z1 - z0), cy + amp * sin(a), cx + amp * cos(a)]
    };
    let aorta: Vec<P3> = (0..=AORTA_SEGMENTS)
        .map(|k| canvas.clamp(aorta_at(k as f64 / AORTA_SEGMENTS as f64), ra))
        .collect();

    let t0 = rng.random_range(0.35..0.65);
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation = rng.random_range(-0.3..0.3);
    let dir = [sin(elevation), cos(elevation) * sin(azimuth), cos(elevation) * cos(azimuth)];
    let root = Branch {
        start: canvas.clamp(aorta_at(t0), ra),
        dir,
        length: ra + nf * rng.random_range(0.25..0.35),
        radius: rng.random_range(spec.coronary_radius_range.0..=spec.coronary_radius_range.1),
        generation: 0,
    };
    grow_tree(&mut canvas, root, spec.branch_depth, &mut rng);

    // The aorta overrides coronary voxels it overlaps.
    canvas.polyline(&aorta, ra, AORTA);
    let coronary: Vec<bool> = canvas.labels.iter().map(|&l| l == CORONARY).collect();
    let keep = largest_component_26(&coronary, [n; 3]);
    for (l, (&was, &kept)) in canvas.labels.iter_mut().zip(coronary.iter().zip(&keep)) {
        if was && !kept {
            *l = BACKGROUND;
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f32> = canvas
        .labels
        .iter()
        .map(|&l| {
            let mean = if l == BACKGROUND {
                spec.background_intensity
            } else {
                spec.foreground_intensity
            };
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (mean + eps) as f32
        })
        .collect();
    let volume = Volume::new(data, [n; 3], spec.spacing, [0.0; 3])?;
    let mask = LabelMask::new(canvas.labels, [n; 3], spec.spacing)?;
    Ok((volume, mask))
}
