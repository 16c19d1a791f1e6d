//! Overlap, surface-distance and skeleton metrics for label masks.

mod overlap;
mod report;
mod skeleton;
mod surface;

pub use overlap::dice;
pub use report::{evaluate, CohortMean, CohortReport, CohortRow, EvalOptions, MetricFlags, MetricsReport, SkeletonScope};
pub use skeleton::{skeleton_metrics, skeletonize, SkeletonScores};
pub use surface::{assd, distance_to_set, extract_surface};

use crate::error::{Error, Result};
use crate::grid::voxel_count;
use crate::volio::LabelMask;

/// Boolean voxel grid with spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    data: Vec<bool>,
    shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(data: Vec<bool>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if voxel_count(shape) != data.len() {
            return Err(Error::Shape(format!("{} voxels for shape {shape:?}", data.len())));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(BinaryMask { data, shape, spacing })
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(vec![false; voxel_count(shape)], shape, spacing)
    }

    /// Voxels of `labels` whose value is in `classes`.
    pub fn from_labels(labels: &LabelMask, classes: &[u8]) -> Self {
        BinaryMask {
            data: labels.binary(classes),
            shape: labels.shape(),
            spacing: labels.spacing,
        }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }
}

fn check_pair(s: &BinaryMask, g: &BinaryMask) -> Result<()> {
    if s.shape != g.shape {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", s.shape, g.shape)));
    }
    Ok(())
}

/// A rate plus whether it was defined by convention rather than by the formula.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}
