use std::sync::Arc;

use super::kernel::KernelDisposition;
use crate::cloudstore::{nearest_indices, NeighborIndex, Point3, PointCloud, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::numerics::{KernelCorrelation, Tape, Var};

/// Nonzero kernel influences `h(y_ij, x̃_k)` for every query/neighbor pair,
/// with `y_ij = (p_j − q_i) / radius`.
pub fn kernel_correlation(
    queries: &[Point3],
    supports: &[Point3],
    neighbors: &NeighborIndex,
    disp: &KernelDisposition,
    radius: f64,
) -> Result<KernelCorrelation> {
    if neighbors.len() != queries.len() {
        return Err(Error::dim("kernel_correlation", &[queries.len(), 3], &[neighbors.len()]));
    }
    if disp.len() > u16::MAX as usize {
        return Err(Error::Validation(format!("{} kernel points is too many", disp.len())));
    }
    let mut corr = KernelCorrelation {
        num_queries: queries.len(),
        num_supports: supports.len(),
        kernel_size: disp.len(),
        offsets: Vec::with_capacity(queries.len() + 1),
        ..Default::default()
    };
    corr.offsets.push(0);
    let inv = 1.0 / radius;
    for (q, list) in queries.iter().zip(&neighbors.lists) {
        for &j in list {
            let p = supports
                .get(j)
                .ok_or_else(|| Error::Validation(format!("neighbor {j} outside {} supports", supports.len())))?;
            let y = [(p[0] - q[0]) * inv, (p[1] - q[1]) * inv, (p[2] - q[2]) * inv];
            for k in 0..disp.len() {
                let h = disp.influence(&y, k);
                if h > 0.0 {
                    corr.support.push(j as u32);
                    corr.kernel.push(k as u16);
                    corr.weight.push(h);
                }
            }
        }
        corr.offsets.push(corr.weight.len());
    }
    Ok(corr)
}

/// Rigid kernel-point convolution:
/// `out_i = Σ_j Σ_k h(y_ij, x̃_k) · feats_j · W_k`, zero rows for empty
/// neighborhoods. `weights` has shape `[K, Cin, Cout]`.
#[allow(clippy::too_many_arguments)]
pub fn kpconv_forward(
    tape: &mut Tape,
    queries: &[Point3],
    supports: &[Point3],
    feats: Var,
    neighbors: &NeighborIndex,
    weights: Var,
    disp: &KernelDisposition,
    radius: f64,
) -> Result<Var> {
    let (rows, _) = tape.dims(feats);
    if rows != supports.len() {
        return Err(Error::dim("kpconv_forward", tape.shape(feats), &[supports.len(), 3]));
    }
    let corr = kernel_correlation(queries, supports, neighbors, disp, radius)?;
    tape.kernel_conv(feats, weights, Arc::new(corr))
}

/// Network input rows `(r, g, b, indicator)`.
///
/// With `black_indicator` off the indicator is a constant 1; with it on, the
/// indicator is 1 only for pure black points.
pub fn input_features(cloud: &PointCloud, black_indicator: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * FEATURE_DIM);
    for c in &cloud.colors {
        out.extend_from_slice(c);
        let indicator = if !black_indicator || c.iter().all(|&x| x == 0.0) { 1.0 } else { 0.0 };
        out.push(indicator);
    }
    out
}

/// Each fine point copies the row of its nearest coarse point (ties → lowest
/// index); gradients scatter back to the chosen rows.
pub fn upsample_nearest(tape: &mut Tape, coarse_feats: Var, fine_positions: &[Point3], coarse_positions: &[Point3]) -> Result<Var> {
    if coarse_positions.is_empty() {
        return Err(Error::EmptyInput("upsampling from an empty coarse cloud"));
    }
    let (rows, _) = tape.dims(coarse_feats);
    if rows != coarse_positions.len() {
        return Err(Error::dim("upsample_nearest", tape.shape(coarse_feats), &[coarse_positions.len(), 3]));
    }
    let index = nearest_indices(fine_positions, coarse_positions)?;
    tape.gather_rows(coarse_feats, Arc::new(index))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cloudstore::{dist2, radius_neighbors};
    use crate::kpnet::build_kernel_disposition;
    use crate::numerics::check_gradients;

    fn center_kernel() -> KernelDisposition {
        KernelDisposition {
            points: vec![[0.0; 3]],
            sigma: 0.3,
        }
    }

    #[test]
    fn colocated_support_with_identity_weights() {
        let mut t = Tape::new();
        let p = [[0.2, 0.3, 0.4]];
        let nb = radius_neighbors(&p, &p, 0.5, None).unwrap();
        let feats = t.constant(vec![1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let w = t.constant(vec![1, 3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = kpconv_forward(&mut t, &p, &p, feats, &nb, w, &center_kernel(), 0.5).unwrap();
        assert_eq!(t.value(out), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn support_outside_kernel_influence_contributes_nothing() {
        let mut t = Tape::new();
        let q = [[0.0; 3]];
        let s = [[0.4, 0.0, 0.0]];
        let nb = radius_neighbors(&q, &s, 1.0, None).unwrap();
        assert_eq!(nb.lists, vec![vec![0]]);
        let feats = t.leaf(vec![1, 2], vec![3.0, 4.0], true).unwrap();
        let w = t.leaf(vec![1, 2, 2], vec![1.0; 4], true).unwrap();
        let out = kpconv_forward(&mut t, &q, &s, feats, &nb, w, &center_kernel(), 1.0).unwrap();
        assert_eq!(t.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn empty_neighborhood_gives_zero_rows_and_gradients() {
        let mut t = Tape::new();
        let q = [[5.0, 5.0, 5.0], [0.0; 3]];
        let s = [[0.0; 3], [0.05, 0.0, 0.0]];
        let nb = radius_neighbors(&q, &s, 0.5, None).unwrap();
        let feats = t.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
        let w = t.leaf(vec![1, 2, 2], vec![0.5; 4], true).unwrap();
        let out = kpconv_forward(&mut t, &q, &s, feats, &nb, w, &center_kernel(), 0.5).unwrap();
        assert_eq!(&t.value(out)[..2], &[0.0, 0.0]);
        let first = t.rows(out, 0, 1).unwrap();
        let l = t.sum_all(first);
        t.backward(l).unwrap();
        assert!(t.grad(feats).unwrap().iter().all(|&g| g == 0.0));
        assert!(t.grad(w).unwrap().iter().all(|&g| g == 0.0));
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let disp = build_kernel_disposition(15, 0.3, 1).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 30);
            let nb = radius_neighbors(&pts, &pts, 0.45, Some(40)).unwrap();
            let (cin, cout) = (3, 4);
            let f: Vec<f64> = (0..30 * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..15 * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = check_gradients(&[(vec![30, cin], f), (vec![15, cin, cout], w)], 1e-5, |t, v| {
                kpconv_forward(t, &pts, &pts, v[0], &nb, v[1], &disp, 0.45)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn permuting_supports_leaves_output_unchanged() {
        let disp = build_kernel_disposition(15, 0.3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let supports = random_points(&mut rng, 50);
        let queries = random_points(&mut rng, 20);
        let feats: Vec<f64> = (0..50 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..15 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |supports: &[Point3], feats: Vec<f64>| {
            let mut t = Tape::new();
            let nb = radius_neighbors(&queries, supports, 0.4, None).unwrap();
            let f = t.constant(vec![supports.len(), 2], feats).unwrap();
            let wv = t.constant(vec![15, 2, 3], w.clone()).unwrap();
            let out = kpconv_forward(&mut t, &queries, supports, f, &nb, wv, &disp, 0.4).unwrap();
            t.value(out).to_vec()
        };
        let base = run(&supports, feats.clone());

        let mut perm: Vec<usize> = (0..50).collect();
        perm.reverse();
        perm.swap(3, 17);
        let shuffled: Vec<Point3> = perm.iter().map(|&i| supports[i]).collect();
        let shuffled_feats: Vec<f64> = perm.iter().flat_map(|&i| feats[i * 2..i * 2 + 2].to_vec()).collect();
        let other = run(&shuffled, shuffled_feats);
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_feature_rows() {
        let cloud = PointCloud::new(vec![[0.0; 3]; 3], vec![[1.0; 3], [0.0; 3], [0.2, 0.4, 0.6]], None).unwrap();
        let f = input_features(&cloud, false);
        assert_eq!(f.len(), 3 * FEATURE_DIM);
        assert_eq!(&f[..8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(f[11], 1.0);
        let g = input_features(&cloud, true);
        assert_eq!((g[3], g[7], g[11]), (0.0, 1.0, 0.0));
    }

    #[test]
    fn upsampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coarse = random_points(&mut rng, 100);
        let vals: Vec<f64> = (0..100 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let c = t.constant(vec![100, 3], vals.clone()).unwrap();
        let same = upsample_nearest(&mut t, c, &coarse, &coarse).unwrap();
        assert_eq!(t.value(same), &vals[..]);

        let one = t.constant(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let fine = random_points(&mut rng, 400);
        let up = upsample_nearest(&mut t, one, &fine, &[[0.5; 3]]).unwrap();
        assert!(t.value(up).chunks(3).all(|r| r == [7.0, 8.0, 9.0]));

        let up = upsample_nearest(&mut t, c, &fine, &coarse).unwrap();
        for (row, p) in t.value(up).chunks(3).zip(&fine) {
            let mut best = 0;
            for j in 1..coarse.len() {
                if dist2(&coarse[j], p) < dist2(&coarse[best], p) {
                    best = j;
                }
            }
            assert_eq!(row, &vals[best * 3..best * 3 + 3]);
        }
        let empty = t.constant(vec![0, 3], vec![]).unwrap();
        assert!(upsample_nearest(&mut t, empty, &fine, &[]).is_err());
    }
}
