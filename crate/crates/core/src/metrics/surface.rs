use super::{check_pair, BinaryMask};
use crate::error::{Error, Result};
use crate::grid::{coords, index, offset, FACE_OFFSETS};

/// Foreground voxels with a background or out-of-bounds face neighbour.
pub fn extract_surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let shape = m.shape();
    let data = m.data();
    (0..data.len())
        .filter(|&i| data[i])
        .map(|i| coords(shape, i))
        .filter(|&p| {
            FACE_OFFSETS.iter().any(|&o| match offset(shape, p, o) {
                None => true,
                Some(q) => !data[index(shape, q[0], q[1], q[2])],
            })
        })
        .collect()
}

/// Exact squared distance transform of one line (Felzenszwalb–Huttenlocher lower
/// envelope) for samples spaced `step` apart; infinite `f` entries are not sites.
fn dt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        while let Some(&p) = v.last() {
            let s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    // z[k] is the left boundary of parabola v[k].
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(i) {
            k += 1;
        }
        let d = pos(i) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared spacing-scaled Euclidean distance from every voxel to the nearest of `points`.
pub fn distance_to_set(points: &[[usize; 3]], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut field = vec![f64::INFINITY; shape.iter().product()];
    for p in points {
        field[index(shape, p[0], p[1], p[2])] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in (0..3).rev() {
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..field.len() {
            // Visit each line once, from its first element.
            if (start / stride) % len != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = field[start + k * stride];
            }
            dt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (k, o) in out.iter().enumerate() {
                field[start + k * stride] = *o;
            }
        }
    }
    field
}

/// Average symmetric surface distance in millimetres:
/// `(sum_{g in T(G)} d(g, T(S)) + sum_{s in T(S)} d(s, T(G))) / (|T(S)| + |T(G)|)`.
pub fn assd(s: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    check_pair(s, g)?;
    let (ts, tg) = (extract_surface(s), extract_surface(g));
    if ts.is_empty() || tg.is_empty() {
        return Err(Error::Degenerate("surface distance with an empty mask".into()));
    }
    let shape = s.shape();
    let to_s = distance_to_set(&ts, shape, s.spacing);
    let to_g = distance_to_set(&tg, shape, s.spacing);
    let sum_dir = |pts: &[[usize; 3]], field: &[f64]| -> f64 {
        pts.iter().map(|p| field[index(shape, p[0], p[1], p[2])].sqrt()).sum()
    };
    Ok((sum_dir(&tg, &to_s) + sum_dir(&ts, &to_g)) / (ts.len() + tg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn cube(n: usize, k: usize) -> BinaryMask {
        let s = [n; 3];
        let data = (0..n * n * n)
            .map(|i| {
                let p = coords(s, i);
                p.iter().all(|&v| v >= 1 && v < 1 + k)
            })
            .collect();
        BinaryMask::new(data, s, [1.0; 3]).unwrap()
    }

    #[test]
    fn surface_counts() {
        assert_eq!(extract_surface(&cube(3, 1)).len(), 1);
        assert_eq!(extract_surface(&cube(5, 3)).len(), 26);
        assert_eq!(extract_surface(&cube(7, 5)).len(), 98);
        assert!(extract_surface(&BinaryMask::empty([2, 2, 2], [1.0; 3]).unwrap()).is_empty());
    }

    #[test]
    fn distance_field_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let shape = [5, 7, 6];
        let spacing = [0.7, 1.3, 2.0];
        for _ in 0..20 {
            let pts: Vec<[usize; 3]> = (0..rng.random_range(1..6))
                .map(|_| [rng.random_range(0..5), rng.random_range(0..7), rng.random_range(0..6)])
                .collect();
            let field = distance_to_set(&pts, shape, spacing);
            for (i, &d) in field.iter().enumerate() {
                let p = coords(shape, i);
                let want = pts
                    .iter()
                    .map(|q| (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn assd_of_points_three_apart() {
        let shape = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[4] = true;
        let (a, b) = (
            BinaryMask::new(a, shape, [1.0; 3]).unwrap(),
            BinaryMask::new(b, shape, [1.0; 3]).unwrap(),
        );
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        let e = BinaryMask::empty(shape, [1.0; 3]).unwrap();
        assert!(matches!(assd(&a, &e), Err(Error::Degenerate(_))));
    }
}
