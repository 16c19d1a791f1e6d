use super::{LabelMask, Volume};
use crate::error::{Error, Result};
use crate::grid::{index, voxel_count};
use crate::ops::resize_trilinear_forward;
use crate::tensor::Tensor;

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::Shape(format!("resize target {target:?} has a zero dimension")));
    }
    Ok(())
}

fn rescale_spacing(spacing: [f64; 3], from: [usize; 3], to: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| spacing[a] * from[a] as f64 / to[a] as f64)
}

/// Trilinear resize keeping the physical extent.
pub fn resize_volume(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_target(target)?;
    let shape = volume.shape();
    if shape == target {
        return Ok(volume.clone());
    }
    let x = Tensor::from_vec(&shape, volume.data().iter().map(|&v| f64::from(v)).collect())?;
    let y = resize_trilinear_forward(&x, target)?;
    Volume::new(
        y.data().iter().map(|&v| v as f32).collect(),
        target,
        rescale_spacing(volume.spacing, shape, target),
        volume.origin,
    )
}

/// Nearest-neighbour source index with half-pixel centres: `floor((2o + 1) I / 2O)`.
fn nearest(o: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * o + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

/// Nearest-neighbour resize; labels are copied, never blended.
pub fn resize_mask(mask: &LabelMask, target: [usize; 3]) -> Result<LabelMask> {
    check_target(target)?;
    let shape = mask.shape();
    if shape == target {
        return Ok(mask.clone());
    }
    let maps: [Vec<usize>; 3] = std::array::from_fn(|a| (0..target[a]).map(|o| nearest(o, shape[a], target[a])).collect());
    let mut data = Vec::with_capacity(voxel_count(target));
    for &z in &maps[0] {
        for &y in &maps[1] {
            for &x in &maps[2] {
                data.push(mask.data()[index(shape, z, y, x)]);
            }
        }
    }
    LabelMask::new(data, target, rescale_spacing(mask.spacing, shape, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::new(vec![2.5; 4 * 5 * 6], [4, 5, 6], [1.0; 3], [0.0; 3]).unwrap();
        let r = resize_volume(&v, [7, 3, 9]).unwrap();
        assert!(r.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
        assert_eq!(r.spacing, [4.0 / 7.0, 5.0 / 3.0, 6.0 / 9.0]);
    }

    #[test]
    fn depth_ramp_upsamples_to_analytic_values() {
        let (d, n) = (8usize, 16usize);
        let data = (0..d * 4).map(|i| (i / 4) as f32).collect();
        let v = Volume::new(data, [d, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let r = resize_volume(&v, [n, 2, 2]).unwrap();
        for o in 0..n {
            // half-pixel source coordinate, clamped to the sample range
            let src = ((o as f64 + 0.5) * d as f64 / n as f64 - 0.5).clamp(0.0, (d - 1) as f64);
            assert!((f64::from(r.data()[o * 4]) - src).abs() < 1e-5);
        }
    }

    #[test]
    fn checkerboard_downsample_matches_brute_force() {
        let s = [6, 6, 6];
        let data: Vec<u8> = (0..216)
            .map(|i| {
                let [z, y, x] = crate::grid::coords(s, i);
                ((z + y + x) % 3) as u8
            })
            .collect();
        let m = LabelMask::new(data.clone(), s, [1.0; 3]).unwrap();
        let t = [3, 3, 3];
        let r = resize_mask(&m, t).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    // centre of output voxel o maps to input coordinate (o + 0.5) * 2
                    let src = |o: usize| ((o as f64 + 0.5) * 2.0).floor() as usize;
                    assert_eq!(r.data()[index(t, z, y, x)], data[index(s, src(z), src(y), src(x))]);
                }
            }
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let m = LabelMask::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert!(resize_mask(&m, [2, 0, 2]).is_err());
    }
}
