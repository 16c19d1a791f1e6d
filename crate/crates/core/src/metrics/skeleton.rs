//! Topology-preserving 3D thinning after Lee, Kashyap and Chu (1994), following
//! the sweep order of scikit-image's `skeletonize` for volumes.

use std::sync::OnceLock;

use super::{check_pair, BinaryMask, Metric};
use crate::error::Result;
use crate::grid::index;

const CENTER: usize = 13;

/// Border directions in sweep order, as `(dz, dy, dx)`.
const BORDERS: [[isize; 3]; 6] = [
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [0, 0, -1],
    [1, 0, 0],
    [-1, 0, 0],
];

fn nidx(d: [isize; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

/// Eight times the Euler characteristic contributed at one lattice corner by the
/// 2x2x2 voxel configuration around it (bit `4 ez + 2 ey + ex`, `e = 1` on the
/// positive side): vertex minus half the covered incident edges plus a quarter
/// of the covered incident faces minus an eighth of the voxels.
fn corner_euler8(config: u8) -> i32 {
    let on = |e: [usize; 3]| config >> (e[0] * 4 + e[1] * 2 + e[2]) & 1 == 1;
    let all: Vec<[usize; 3]> = (0..8).map(|b| [b >> 2, (b >> 1) & 1, b & 1]).collect();
    let vertex = i32::from(config != 0);
    let mut edges = 0;
    for axis in 0..3 {
        for side in 0..2 {
            edges += i32::from(all.iter().any(|e| e[axis] == side && on(*e)));
        }
    }
    let mut faces = 0;
    for (a1, a2) in [(0, 1), (0, 2), (1, 2)] {
        for s1 in 0..2 {
            for s2 in 0..2 {
                faces += i32::from(all.iter().any(|e| e[a1] == s1 && e[a2] == s2 && on(*e)));
            }
        }
    }
    8 * vertex - 4 * edges + 2 * faces - config.count_ones() as i32
}

/// For each of the eight corners of the centre voxel, the 27-neighbourhood
/// indices of its 2x2x2 block, in local bit order.
fn octants() -> &'static [[usize; 8]; 8] {
    static OCT: OnceLock<[[usize; 8]; 8]> = OnceLock::new();
    OCT.get_or_init(|| {
        std::array::from_fn(|o| {
            let s = [o >> 2, (o >> 1) & 1, o & 1].map(|b| if b == 1 { 1isize } else { -1 });
            std::array::from_fn(|bit| {
                let e = [bit >> 2, (bit >> 1) & 1, bit & 1];
                // e = 1 means the positive side of the corner at centre + s/2.
                let d: [isize; 3] = std::array::from_fn(|a| match (s[a], e[a]) {
                    (1, 0) | (-1, 1) => 0,
                    (1, _) => 1,
                    _ => -1,
                });
                nidx(d)
            })
        })
    })
}

fn euler_table() -> &'static [i32; 256] {
    static LUT: OnceLock<[i32; 256]> = OnceLock::new();
    LUT.get_or_init(|| std::array::from_fn(|c| corner_euler8(c as u8)))
}

/// Removing the centre leaves the Euler characteristic unchanged.
fn is_euler_invariant(n: &[bool; 27]) -> bool {
    let lut = euler_table();
    let mut delta = 0;
    for oct in octants() {
        let mut with = 0u8;
        let mut center_bit = 0u8;
        for (bit, &k) in oct.iter().enumerate() {
            if n[k] {
                with |= 1 << bit;
            }
            if k == CENTER {
                center_bit = 1 << bit;
            }
        }
        delta += lut[with as usize] - lut[(with & !center_bit) as usize];
    }
    delta == 0
}

fn is_endpoint(n: &[bool; 27]) -> bool {
    n.iter().enumerate().filter(|&(k, &v)| k != CENTER && v).count() == 1
}

fn adjacency() -> &'static [Vec<usize>; 27] {
    static ADJ: OnceLock<[Vec<usize>; 27]> = OnceLock::new();
    ADJ.get_or_init(|| {
        std::array::from_fn(|a| {
            let pa = [a / 9, (a / 3) % 3, a % 3];
            (0..27)
                .filter(|&b| {
                    let pb = [b / 9, (b / 3) % 3, b % 3];
                    b != a && b != CENTER && (0..3).all(|k| pa[k].abs_diff(pb[k]) <= 1)
                })
                .collect()
        })
    })
}

/// At most one 26-connected object component among the 26 neighbours.
fn is_simple(n: &[bool; 27]) -> bool {
    let adj = adjacency();
    let mut seen = [false; 27];
    let mut components = 0;
    let mut stack = Vec::with_capacity(26);
    for start in 0..27 {
        if start == CENTER || !n[start] || seen[start] {
            continue;
        }
        components += 1;
        if components > 1 {
            return false;
        }
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            for &j in &adj[k] {
                if n[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    true
}

fn neighborhood(img: &[bool], shape: [usize; 3], p: [usize; 3]) -> [bool; 27] {
    let mut n = [false; 27];
    for (k, v) in n.iter_mut().enumerate() {
        let q = [p[0] as isize + (k / 9) as isize - 1, p[1] as isize + ((k / 3) % 3) as isize - 1, p[2] as isize + (k % 3) as isize - 1];
        if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a]) {
            *v = img[index(shape, q[0] as usize, q[1] as usize, q[2] as usize)];
        }
    }
    n
}

/// Thins `m` to a one-voxel-wide skeleton preserving 26-connected topology.
pub fn skeletonize(m: &BinaryMask) -> BinaryMask {
    let shape = m.shape();
    let mut img = m.data().to_vec();
    let mut candidates = Vec::new();
    loop {
        let mut unchanged = 0;
        for dir in BORDERS {
            candidates.clear();
            for z in 0..shape[0] {
                for y in 0..shape[1] {
                    for x in 0..shape[2] {
                        if !img[index(shape, z, y, x)] {
                            continue;
                        }
                        let q = [z as isize + dir[0], y as isize + dir[1], x as isize + dir[2]];
                        let inside = (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < shape[a]);
                        if inside && img[index(shape, q[0] as usize, q[1] as usize, q[2] as usize)] {
                            continue;
                        }
                        let n = neighborhood(&img, shape, [z, y, x]);
                        if is_endpoint(&n) || !is_euler_invariant(&n) || !is_simple(&n) {
                            continue;
                        }
                        candidates.push([z, y, x]);
                    }
                }
            }
            // Deleting one candidate can make the next one non-simple.
            let mut changed = false;
            for &p in &candidates {
                if is_simple(&neighborhood(&img, shape, p)) {
                    img[index(shape, p[0], p[1], p[2])] = false;
                    changed = true;
                }
            }
            if !changed {
                unchanged += 1;
            }
        }
        if unchanged == BORDERS.len() {
            break;
        }
    }
    BinaryMask::new(img, shape, m.spacing).expect("same geometry")
}

/// Skeleton recall `|S ∩ Q(G)| / |Q(G)|` and precision `|G ∩ Q(S)| / |Q(S)|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkeletonScores {
    pub sr: Metric,
    pub sp: Metric,
}

fn rate(hit: usize, total: usize) -> Metric {
    if total == 0 {
        Metric {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Metric {
            value: hit as f64 / total as f64,
            degenerate: false,
        }
    }
}

/// Empty skeletons give a rate of 0, flagged degenerate.
pub fn skeleton_metrics(s: &BinaryMask, g: &BinaryMask) -> Result<SkeletonScores> {
    check_pair(s, g)?;
    let (qs, qg) = (skeletonize(s), skeletonize(g));
    Ok(SkeletonScores {
        sr: rate(s.intersection_count(&qg), qg.count()),
        sp: rate(g.intersection_count(&qs), qs.count()),
    })
}
