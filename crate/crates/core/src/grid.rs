//! Index arithmetic and connectivity on dense `[D, H, W]` voxel grids.

use std::collections::VecDeque;

/// Row-major linear index of `(z, y, x)`.
#[inline]
pub fn index(shape: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// Inverse of [`index`].
#[inline]
pub fn coords(shape: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % shape[2];
    let y = (i / shape[2]) % shape[1];
    [i / (shape[1] * shape[2]), y, x]
}

pub fn voxel_count(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// The six face-neighbour offsets.
pub const FACE_OFFSETS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// All 26 offsets of the 3x3x3 neighbourhood, excluding the centre.
pub fn neighbor_offsets_26() -> impl Iterator<Item = [isize; 3]> {
    (0..27)
        .filter(|&k| k != 13)
        .map(|k| [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1])
}

/// `p + off` if it lies inside `shape`.
#[inline]
pub fn offset(shape: [usize; 3], p: [usize; 3], off: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + off[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// 26-connected component labelling: returns per-voxel labels (0 = background,
/// components numbered from 1 in raster order of their first voxel) and the count.
pub fn components_26(mask: &[bool], shape: [usize; 3]) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), voxel_count(shape));
    let offs: Vec<[isize; 3]> = neighbor_offsets_26().collect();
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let p = coords(shape, i);
            for &o in &offs {
                if let Some(q) = offset(shape, p, o) {
                    let j = index(shape, q[0], q[1], q[2]);
                    if mask[j] && labels[j] == 0 {
                        labels[j] = count;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Number of 26-connected foreground components.
pub fn count_components_26(mask: &[bool], shape: [usize; 3]) -> usize {
    components_26(mask, shape).1
}

/// Keeps only the largest 26-connected component (ties go to the earliest).
pub fn largest_component_26(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let (labels, n) = components_26(mask, shape);
    if n <= 1 {
        return mask.to_vec();
    }
    let mut sizes = vec![0usize; n + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let best = (1..=n).fold(1, |b, l| if sizes[l] > sizes[b] { l } else { b }) as u32;
    labels.iter().map(|&l| l == best).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let s = [3, 4, 5];
        for i in 0..60 {
            let [z, y, x] = coords(s, i);
            assert_eq!(index(s, z, y, x), i);
        }
    }

    #[test]
    fn diagonal_voxels_are_26_connected() {
        let s = [3, 3, 3];
        let mut m = vec![false; 27];
        m[index(s, 0, 0, 0)] = true;
        m[index(s, 1, 1, 1)] = true;
        m[index(s, 2, 2, 0)] = true;
        assert_eq!(count_components_26(&m, s), 1);
        m[index(s, 1, 1, 1)] = false;
        assert_eq!(count_components_26(&m, s), 2);
    }

    #[test]
    fn largest_component_is_kept() {
        let s = [1, 1, 7];
        let m = [true, false, true, true, true, false, true];
        let kept = largest_component_26(&m, s);
        assert_eq!(kept, [false, false, true, true, true, false, false]);
        assert_eq!(neighbor_offsets_26().count(), 26);
    }
}
