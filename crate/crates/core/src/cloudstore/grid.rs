use std::collections::BTreeMap;

use super::cloud::{Point3, PointCloud, UNCLASSIFIED};
use crate::error::{Error, Result};

/// For each subsampled point, the indices of the input points merged into it.
pub type PoolingMap = Vec<Vec<usize>>;

fn voxel_groups(points: &[Point3], cell: f64) -> Result<PoolingMap> {
    if !(cell > 0.0) {
        return Err(Error::Validation(format!("grid cell {cell} must be positive")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ];
        cells.entry(key).or_default().push(i);
    }
    Ok(cells.into_values().collect())
}

fn barycenter(values: &[[f64; 3]], members: &[usize]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for &i in members {
        for a in 0..3 {
            acc[a] += values[i][a];
        }
    }
    let n = members.len() as f64;
    acc.map(|x| x / n)
}

/// Most frequent class among members, ignoring `-1`; ties go to the smaller
/// class id and an all-unclassified voxel stays unclassified.
pub fn majority_label(labels: &[i32], members: &[usize]) -> i32 {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &i in members {
        if labels[i] != UNCLASSIFIED {
            *counts.entry(labels[i]).or_default() += 1;
        }
    }
    let mut best = (UNCLASSIFIED, 0);
    for (label, count) in counts {
        if count > best.1 {
            best = (label, count);
        }
    }
    best.0
}

/// Voxel-barycenter subsampling of bare positions.
pub fn grid_subsample_points(points: &[Point3], cell: f64) -> Result<(Vec<Point3>, PoolingMap)> {
    let groups = voxel_groups(points, cell)?;
    let centers = groups.iter().map(|g| barycenter(points, g)).collect();
    Ok((centers, groups))
}

/// One output point per occupied voxel: barycenter of positions and colors,
/// majority-vote label. Output order follows the voxel key.
pub fn grid_subsample(cloud: &PointCloud, cell: f64) -> Result<(PointCloud, PoolingMap)> {
    let groups = voxel_groups(&cloud.positions, cell)?;
    let positions = groups.iter().map(|g| barycenter(&cloud.positions, g)).collect();
    let colors = groups.iter().map(|g| barycenter(&cloud.colors, g)).collect();
    let labels = cloud
        .labels
        .as_ref()
        .map(|l| groups.iter().map(|g| majority_label(l, g)).collect());
    Ok((
        PointCloud {
            positions,
            colors,
            labels,
        },
        groups,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_points_merge_into_barycenter() {
        let cloud = PointCloud::new(
            vec![[0.0, 0.0, 0.0], [0.01, 0.0, 0.0]],
            vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            Some(vec![3, 3]),
        )
        .unwrap();
        let (sub, pool) = grid_subsample(&cloud, 0.1).unwrap();
        assert_eq!(sub.len(), 1);
        assert!((sub.positions[0][0] - 0.005).abs() < 1e-15);
        assert_eq!(sub.colors[0], [0.5, 0.0, 0.5]);
        assert_eq!(sub.labels, Some(vec![3]));
        assert_eq!(pool, vec![vec![0, 1]]);
    }

    #[test]
    fn separated_points_are_kept() {
        let pts = vec![[0.05, 0.05, 0.05], [0.35, 0.05, 0.05], [0.05, 0.95, 0.55]];
        let (out, pool) = grid_subsample_points(&pts, 0.1).unwrap();
        assert_eq!(out.len(), 3);
        let mut out_sorted = out.clone();
        out_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut in_sorted = pts.clone();
        in_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in out_sorted.iter().zip(&in_sorted) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
        assert!(pool.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn lattice_counts() {
        // 10³ lattice at 0.05 spacing, offset half a step off the cell walls
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    pts.push([0.025 + 0.05 * i as f64, 0.025 + 0.05 * j as f64, 0.025 + 0.05 * k as f64]);
                }
            }
        }
        let (out, pool) = grid_subsample_points(&pts, 0.1).unwrap();
        assert_eq!(out.len(), 125);
        assert!(pool.iter().all(|g| g.len() == 8));
    }

    #[test]
    fn majority_vote_ties_and_unclassified() {
        assert_eq!(majority_label(&[2, 1, 2, 1, -1, -1, -1], &[0, 1, 2, 3, 4, 5, 6]), 1);
        assert_eq!(majority_label(&[-1, -1], &[0, 1]), -1);
        assert_eq!(majority_label(&[4, -1, -1], &[0, 1, 2]), 4);
    }

    #[test]
    fn rejects_bad_cell() {
        assert!(grid_subsample_points(&[[0.0; 3]], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pooling_map_partitions_input(seed in any::<u64>(), n in 1usize..500, cell in 0.02f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)]).collect();
            let (out, pool) = grid_subsample_points(&pts, cell).unwrap();
            prop_assert!(out.len() <= n);
            prop_assert_eq!(out.len(), pool.len());
            let mut seen = vec![0usize; n];
            for g in &pool {
                prop_assert!(!g.is_empty());
                for &i in g {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
