//! Precomputed multi-resolution geometry of subclouds: per-level supports,
//! kernel correlations, pooling maps and upsampling indices.
//!
//! Geometry is built once per subcloud and stacked per batch; stacking only
//! shifts indices, so no neighborhood ever crosses a subcloud boundary.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::kernel_correlation;
use super::kernel::{build_kernel_disposition, KernelDisposition};
use crate::cloudstore::{grid_subsample_points, nearest_indices, radius_neighbors, Point3, PoolingMap};
use crate::error::{Error, Result};
use crate::numerics::KernelCorrelation;

/// Geometric hyper-parameters shared by every network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    /// Grid cell of the input resolution (meters); level `l` uses `cell·2^l`.
    pub first_cell: f64,
    /// Convolution radius as a multiple of the level cell.
    pub radius_factor: f64,
    pub kernel_points: usize,
    /// Kernel influence distance, in units of the convolution radius.
    pub kernel_sigma: f64,
    pub kernel_seed: u64,
    pub neighbor_cap: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            first_cell: 0.04,
            radius_factor: 2.5,
            kernel_points: 15,
            kernel_sigma: 0.3,
            kernel_seed: 42,
            neighbor_cap: crate::cloudstore::DEFAULT_NEIGHBOR_CAP,
        }
    }
}

impl GeometryConfig {
    pub fn cell(&self, level: usize) -> f64 {
        self.first_cell * (1u64 << level) as f64
    }

    pub fn radius(&self, level: usize) -> f64 {
        self.radius_factor * self.cell(level)
    }

    pub fn disposition(&self) -> Result<KernelDisposition> {
        build_kernel_disposition(self.kernel_points, self.kernel_sigma, self.kernel_seed)
    }
}

#[derive(Clone, Debug)]
pub struct LevelGeometry {
    pub points: Vec<Point3>,
    /// Self-convolution of this level at its own radius.
    pub conv: KernelCorrelation,
}

/// Link between level `l` (fine) and `l + 1` (coarse).
#[derive(Clone, Debug)]
pub struct TransitionGeometry {
    /// Coarse queries against fine supports at the fine radius.
    pub down_conv: KernelCorrelation,
    /// Fine members of each coarse point.
    pub pool: PoolingMap,
    /// Nearest coarse point of each fine point.
    pub up: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SubcloudGeometry {
    pub levels: Vec<LevelGeometry>,
    pub transitions: Vec<TransitionGeometry>,
}

impl SubcloudGeometry {
    /// `points` are the input-resolution points of one subcloud; coarser
    /// levels come from grid subsampling at twice the previous cell.
    pub fn build(points: &[Point3], config: &GeometryConfig, disp: &KernelDisposition, num_levels: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("subcloud geometry"));
        }
        if num_levels == 0 {
            return Err(Error::Validation("at least one level is required".into()));
        }
        let cap = Some(config.neighbor_cap);
        let mut level_points = vec![points.to_vec()];
        let mut pools = Vec::new();
        for l in 1..num_levels {
            let (coarse, pool) = grid_subsample_points(&level_points[l - 1], config.cell(l))?;
            level_points.push(coarse);
            pools.push(pool);
        }
        let mut levels = Vec::with_capacity(num_levels);
        for (l, pts) in level_points.iter().enumerate() {
            let r = config.radius(l);
            let nb = radius_neighbors(pts, pts, r, cap)?;
            levels.push(LevelGeometry {
                points: pts.clone(),
                conv: kernel_correlation(pts, pts, &nb, disp, r)?,
            });
        }
        let mut transitions = Vec::with_capacity(num_levels - 1);
        for (l, pool) in pools.into_iter().enumerate() {
            let (fine, coarse) = (&level_points[l], &level_points[l + 1]);
            let r = config.radius(l);
            let nb = radius_neighbors(coarse, fine, r, cap)?;
            transitions.push(TransitionGeometry {
                down_conv: kernel_correlation(coarse, fine, &nb, disp, r)?,
                pool,
                up: nearest_indices(fine, coarse)?,
            });
        }
        Ok(SubcloudGeometry { levels, transitions })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Build geometry for many subclouds in parallel (order preserved).
pub fn build_geometries(
    subclouds: &[Vec<Point3>],
    config: &GeometryConfig,
    disp: &KernelDisposition,
    num_levels: usize,
) -> Result<Vec<SubcloudGeometry>> {
    subclouds
        .par_iter()
        .map(|pts| SubcloudGeometry::build(pts, config, disp, num_levels))
        .collect()
}

#[derive(Clone, Debug)]
pub struct StackedLevel {
    pub points: Vec<Point3>,
    /// Points contributed by each subcloud, in stacking order.
    pub lengths: Vec<usize>,
    pub conv: Arc<KernelCorrelation>,
}

impl StackedLevel {
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.lengths
            .iter()
            .map(|&n| {
                let o = acc;
                acc += n;
                o
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct StackedTransition {
    pub down_conv: Arc<KernelCorrelation>,
    pub pool: Arc<PoolingMap>,
    pub up: Arc<Vec<usize>>,
}

/// Geometry of a whole batch of stacked subclouds.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<StackedLevel>,
    pub transitions: Vec<StackedTransition>,
}

fn stack_correlations(parts: &[&KernelCorrelation]) -> KernelCorrelation {
    let mut out = KernelCorrelation {
        kernel_size: parts.first().map_or(0, |p| p.kernel_size),
        offsets: vec![0],
        ..Default::default()
    };
    for p in parts {
        let shift = out.num_supports as u32;
        let base = out.weight.len();
        out.offsets.extend(p.offsets[1..].iter().map(|o| o + base));
        out.support.extend(p.support.iter().map(|s| s + shift));
        out.kernel.extend_from_slice(&p.kernel);
        out.weight.extend_from_slice(&p.weight);
        out.num_queries += p.num_queries;
        out.num_supports += p.num_supports;
    }
    out
}

impl Pyramid {
    pub fn stack(parts: &[&SubcloudGeometry]) -> Result<Pyramid> {
        let first = parts.first().ok_or(Error::EmptyInput("stacking zero subclouds"))?;
        let num_levels = first.num_levels();
        if parts.iter().any(|p| p.num_levels() != num_levels) {
            return Err(Error::Contract("subclouds stacked with different level counts".into()));
        }
        let mut levels = Vec::with_capacity(num_levels);
        for l in 0..num_levels {
            let convs: Vec<&KernelCorrelation> = parts.iter().map(|p| &p.levels[l].conv).collect();
            levels.push(StackedLevel {
                points: parts.iter().flat_map(|p| p.levels[l].points.iter().copied()).collect(),
                lengths: parts.iter().map(|p| p.levels[l].points.len()).collect(),
                conv: Arc::new(stack_correlations(&convs)),
            });
        }
        let mut transitions = Vec::with_capacity(num_levels.saturating_sub(1));
        for l in 0..num_levels.saturating_sub(1) {
            let convs: Vec<&KernelCorrelation> = parts.iter().map(|p| &p.transitions[l].down_conv).collect();
            let mut pool = Vec::new();
            let mut up = Vec::new();
            let (mut fine_off, mut coarse_off) = (0, 0);
            for p in parts {
                let t = &p.transitions[l];
                pool.extend(t.pool.iter().map(|g| g.iter().map(|i| i + fine_off).collect::<Vec<_>>()));
                up.extend(t.up.iter().map(|i| i + coarse_off));
                fine_off += p.levels[l].points.len();
                coarse_off += p.levels[l + 1].points.len();
            }
            transitions.push(StackedTransition {
                down_conv: Arc::new(stack_correlations(&convs)),
                pool: Arc::new(pool),
                up: Arc::new(up),
            });
        }
        Ok(Pyramid { levels, transitions })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_subclouds(&self) -> usize {
        self.levels.first().map_or(0, |l| l.lengths.len())
    }
}
