//! Volumes, label masks, their on-disk format, resizing and synthetic phantoms.

mod io;
mod manifest;
mod phantom;
mod resize;

pub use io::{header_path, raw_path, read_label, read_volume, write_label, write_volume, Dtype, Header};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, PhantomSpec};
pub use resize::{resize_mask, resize_volume};

use crate::error::{Error, Result};
use crate::grid::voxel_count;
use crate::tensor::Tensor;

/// Label values.
pub const BACKGROUND: u8 = 0;
pub const AORTA: u8 = 1;
pub const CORONARY: u8 = 2;
pub const NUM_CLASSES: usize = 3;

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Config(format!("spacing must be positive, got {spacing:?}")))
    }
}

fn check_len(shape: [usize; 3], len: usize) -> Result<()> {
    if shape.contains(&0) || voxel_count(shape) != len {
        return Err(Error::Shape(format!("{len} elements cannot fill shape {shape:?}")));
    }
    Ok(())
}

/// Intensity grid `[D, H, W]` in C order with physical geometry in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_len(shape, data.len())?;
        check_spacing(spacing)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            origin,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// `[1, 1, D, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.shape;
        Tensor::from_vec(&[1, 1, d, h, w], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("volume shape is consistent")
    }
}

/// Label grid over {background, aorta, coronary}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    data: Vec<u8>,
    shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl LabelMask {
    pub fn new(data: Vec<u8>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        check_len(shape, data.len())?;
        check_spacing(spacing)?;
        if let Some(index) = data.iter().position(|&v| v > CORONARY) {
            return Err(Error::LabelValue {
                value: data[index],
                index,
            });
        }
        Ok(LabelMask { data, shape, spacing })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(vec![BACKGROUND; voxel_count(shape)], shape, spacing)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Voxels whose label is in `classes`.
    pub fn binary(&self, classes: &[u8]) -> Vec<bool> {
        self.data.iter().map(|v| classes.contains(v)).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}
