use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Label value for points without a ground-truth class.
pub const UNCLASSIFIED: i32 = -1;

/// Width of the per-point network input: r, g, b and an indicator channel.
pub const FEATURE_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    /// RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    /// Validates lengths and finiteness; colors are clamped into `[0, 1]`.
    pub fn new(positions: Vec<Point3>, mut colors: Vec<[f64; 3]>, labels: Option<Vec<i32>>) -> Result<Self> {
        if colors.len() != positions.len() {
            return Err(Error::dim("PointCloud", &[positions.len(), 3], &[colors.len(), 3]));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::dim("PointCloud", &[positions.len()], &[l.len()]));
            }
            if let Some(bad) = l.iter().find(|&&c| c < UNCLASSIFIED) {
                return Err(Error::Validation(format!("label {bad} below -1")));
            }
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Validation(format!("point {i} has a non-finite coordinate")));
        }
        for c in colors.iter_mut().flatten() {
            *c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
        }
        Ok(Self {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn label(&self, i: usize) -> Option<i32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Checks every label is `-1` or a valid class id.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(bad) = self
            .labels
            .iter()
            .flatten()
            .find(|&&c| c != UNCLASSIFIED && (c < 0 || c as usize >= num_classes))
        {
            return Err(Error::Validation(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)`. Panics on an empty cloud.
    pub fn bounding_box(&self) -> (Point3, Point3) {
        bounding_box(&self.positions)
    }

    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::dim("with_labels", &[self.len()], &[labels.len()]));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

pub fn bounding_box(points: &[Point3]) -> (Point3, Point3) {
    assert!(!points.is_empty(), "bounding box of an empty point set");
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
