//! Point clouds, file I/O, voxel-grid subsampling and radius queries.

mod cloud;
mod grid;
mod io;
mod kdtree;

pub use cloud::{bounding_box, dist2, Point3, PointCloud, FEATURE_DIM, UNCLASSIFIED};
pub use grid::{grid_subsample, grid_subsample_points, majority_label, PoolingMap};
pub use io::{format_tsv, load_cloud, load_cloud_auto, parse_tsv, save_cloud, CloudFormat};
pub use kdtree::{nearest_indices, radius_neighbors, KdTree, NeighborIndex, DEFAULT_NEIGHBOR_CAP, LEAF_SIZE};
