use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::Ctn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volio::{read_label, read_volume, resize_mask, resize_volume, LabelMask, Manifest, Split, Volume};

/// A normalised network input and its label at model resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 1, D, H, W]`.
    pub image: Tensor,
    pub label: LabelMask,
}

impl Sample {
    /// Resizes to `size` and applies per-volume z-scoring.
    pub fn new(id: impl Into<String>, volume: &Volume, label: &LabelMask, size: [usize; 3]) -> Result<Self> {
        if volume.shape() != label.shape() {
            return Err(Error::Shape(format!("volume {:?} vs label {:?}", volume.shape(), label.shape())));
        }
        let v = resize_volume(volume, size)?;
        let mut l = resize_mask(label, size)?;
        l.spacing = v.spacing;
        Ok(Sample {
            id: id.into(),
            image: zscore(&v.to_tensor()),
            label: l,
        })
    }
}

/// `(x - mean) / std` over the whole tensor; a constant input maps to zeros.
pub fn zscore(x: &Tensor) -> Tensor {
    let n = x.len().max(1) as f64;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        return Tensor::zeros(x.shape());
    }
    x.map(|v| (v - mean) / std)
}

fn flip_axes<T: Copy>(data: &[T], shape: [usize; 3], flip: [bool; 3]) -> Vec<T> {
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        let sz = if flip[0] { d - 1 - z } else { z };
        for y in 0..h {
            let sy = if flip[1] { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if flip[2] { w - 1 - x } else { x };
                out.push(data[(sz * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Mirrors image and label together along each axis where `flip` is set.
pub fn flip_sample(s: &Sample, flip: [bool; 3]) -> Sample {
    if !flip.iter().any(|&f| f) {
        return s.clone();
    }
    let shape = s.label.shape();
    let image = Tensor::from_vec(s.image.shape(), flip_axes(s.image.data(), shape, flip)).expect("same shape");
    let label = LabelMask::new(flip_axes(s.label.data(), shape, flip), shape, s.label.spacing).expect("labels unchanged");
    Sample {
        id: s.id.clone(),
        image,
        label,
    }
}

/// Draws one flip decision per axis.
pub(crate) fn draw_flips<R: Rng>(rng: &mut R, prob: [f64; 3]) -> [bool; 3] {
    prob.map(|p| rng.random::<f64>() < p)
}

/// Class index of the largest logit per voxel (ties go to the lower class).
pub fn argmax_labels(logits: &Tensor, spacing: [f64; 3]) -> Result<LabelMask> {
    let [b, k, d, h, w] = logits.dims5()?;
    if b != 1 {
        return Err(Error::Shape(format!("argmax expects one volume, got batch {b}")));
    }
    let n = d * h * w;
    let z = logits.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if z[c * n + v] > z[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(labels, [d, h, w], spacing)
}

/// Segments `volume`: resize to the model input, run the network, take the
/// argmax and resize the labels back with nearest-neighbour sampling.
pub fn predict_mask(model: &Ctn, params: &ParamStore, volume: &Volume) -> Result<LabelMask> {
    let size = model.config().input_size;
    let v = resize_volume(volume, size)?;
    let logits = model.predict_logits(params, &zscore(&v.to_tensor()))?;
    let small = argmax_labels(&logits, v.spacing)?;
    let mut out = resize_mask(&small, volume.shape())?;
    out.spacing = volume.spacing;
    Ok(out)
}

/// Training and validation samples held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

fn load_split(manifest: &Manifest, split: Split, size: [usize; 3]) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| {
            let image = manifest.resolve(&e.image);
            let (volume, _) = read_volume(&image)?;
            let label = read_label(&manifest.resolve(&e.label))?;
            Sample::new(sample_id(&image), &volume, &label, size)
        })
        .collect()
}

pub(crate) fn sample_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".hdr.json").trim_end_matches(".raw").to_string()
}

impl Dataset {
    /// Loads the train and val splits. Without a val split the last
    /// `val_fraction` of the train entries (at least one, when there are two or
    /// more) is held out.
    pub fn from_manifest(manifest: &Manifest, size: [usize; 3], val_fraction: f64) -> Result<Self> {
        let mut train = load_split(manifest, Split::Train, size)?;
        if train.is_empty() {
            return Err(Error::Dataset("the train split is empty".into()));
        }
        let mut val = load_split(manifest, Split::Val, size)?;
        if val.is_empty() && train.len() >= 2 && val_fraction > 0.0 {
            let k = ((train.len() as f64 * val_fraction).round() as usize).clamp(1, train.len() - 1);
            val = train.split_off(train.len() - k);
        }
        Ok(Dataset { train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_moments() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let z = zscore(&x);
        assert!(z.sum().abs() < 1e-12);
        assert!((z.norm_sq() / 4.0 - 1.0).abs() < 1e-12);
        assert_eq!(zscore(&Tensor::full(&[3], 5.0)), Tensor::zeros(&[3]));
    }

    #[test]
    fn flips_are_involutions_and_move_voxels_together() {
        let shape = [2, 3, 4];
        let img = Tensor::from_vec(&[1, 1, 2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let lab = LabelMask::new((0..24).map(|i| (i % 3) as u8).collect(), shape, [1.0; 3]).unwrap();
        let s = Sample { id: "a".into(), image: img, label: lab };
        let f = flip_sample(&s, [true, false, true]);
        assert_eq!(f.image.data()[0], 3.0 + 12.0);
        for (v, l) in f.image.data().iter().zip(f.label.data()) {
            assert_eq!((*v as usize % 3) as u8, *l);
        }
        assert_eq!(flip_sample(&f, [true, false, true]), s);
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let z = Tensor::from_vec(&[1, 3, 1, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&z, [1.0; 3]).unwrap().data(), &[0, 1]);
    }
}
