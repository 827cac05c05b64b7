//! Fully connected CRF over points with Potts compatibility, inferred by
//! synchronous mean-field updates.
//!
//! Pairwise kernel between points `i` and `j`:
//! `w1·exp(−‖Δp‖²/2θα² − ‖Δc‖²/2θβ²) + w2·exp(−‖Δp‖²/2θγ²)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloudstore::{dist2, PointCloud};
use crate::error::{Error, Result};
use crate::mprm::{PathId, PseudoLabel, ScoreMap};
use crate::numerics::softmax_in_place;

/// Clouds up to this size keep the full pairwise kernel in memory.
const KERNEL_CACHE_POINTS: usize = 4096;

/// Unary cost of a class outside the weak label: large but finite, so the
/// marginals stay normalizable.
pub const MASKED_PENALTY: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    /// Bilateral (position and color) weight.
    pub w1: f64,
    /// Bilateral position bandwidth (m).
    pub theta_alpha: f64,
    /// Bilateral color bandwidth (colors in [0, 1]).
    pub theta_beta: f64,
    /// Smoothness weight.
    pub w2: f64,
    /// Smoothness bandwidth (m).
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Largest point count refined in one exact pass.
    pub max_exact_points: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            w1: 10.0,
            theta_alpha: 0.5,
            theta_beta: 0.1,
            w2: 3.0,
            theta_gamma: 0.1,
            iterations: 10,
            max_exact_points: 20_000,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Config(format!("crf weights must be nonnegative (w1={}, w2={})", self.w1, self.w2)));
        }
        for (name, v) in [("theta_alpha", self.theta_alpha), ("theta_beta", self.theta_beta), ("theta_gamma", self.theta_gamma)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("crf bandwidth {name}={v} must be positive")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("crf needs at least one iteration".into()));
        }
        Ok(())
    }

    /// Pairwise kernel from squared position and color distances.
    #[inline]
    pub fn kernel(&self, dp2: f64, dc2: f64) -> f64 {
        let a = 2.0 * self.theta_alpha * self.theta_alpha;
        let b = 2.0 * self.theta_beta * self.theta_beta;
        let g = 2.0 * self.theta_gamma * self.theta_gamma;
        self.w1 * (-dp2 / a - dc2 / b).exp() + self.w2 * (-dp2 / g).exp()
    }

    pub fn kernel_between(&self, cloud: &PointCloud, i: usize, j: usize) -> f64 {
        self.kernel(dist2(&cloud.positions[i], &cloud.positions[j]), dist2(&cloud.colors[i], &cloud.colors[j]))
    }
}

/// Approximate marginals `Q`, one normalized row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField {
    pub classes: usize,
    pub q: Vec<f64>,
}

impl MarginalField {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.q[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> usize {
        self.q.len() / self.classes.max(1)
    }
}

/// `−log softmax` of the positive-class scores; masked classes get
/// [`MASKED_PENALTY`].
pub fn unary_potentials(map: &ScoreMap) -> Result<Vec<f64>> {
    if let Some(v) = map.scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite unary score {v}")));
    }
    let mut out = vec![0.0; map.scores.len()];
    for i in 0..map.rows {
        let pos = map.positive_row(i);
        if !pos.iter().any(|&p| p) {
            return Err(Error::Validation(format!("point {i} has no positive class")));
        }
        let row = map.row(i);
        let max = row.iter().zip(pos).filter(|(_, &p)| p).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().zip(pos).filter(|(_, &p)| p).map(|(&s, _)| (s - max).exp()).sum::<f64>().ln();
        for c in 0..map.classes {
            out[i * map.classes + c] = if pos[c] { lse - row[c] } else { MASKED_PENALTY };
        }
    }
    Ok(out)
}

/// Run mean field, calling `observe(iteration, field)` after initialization
/// (iteration 0) and after each update.
pub fn mean_field<F>(cloud: &PointCloud, map: &ScoreMap, config: &CrfConfig, mut observe: F) -> Result<MarginalField>
where
    F: FnMut(usize, &MarginalField),
{
    config.validate()?;
    let n = cloud.len();
    if map.rows != n {
        return Err(Error::dim("crf", &[n, map.classes], &[map.rows, map.classes]));
    }
    if n > config.max_exact_points {
        return Err(Error::Contract(format!("{n} points exceed the exact crf budget of {}", config.max_exact_points)));
    }
    let l = map.classes;
    let unary = unary_potentials(map)?;
    let mut field = MarginalField {
        classes: l,
        q: unary.iter().map(|u| -u).collect(),
    };
    field.q.par_chunks_mut(l).for_each(softmax_in_place);
    observe(0, &field);
    let cache: Option<Vec<f64>> = (n <= KERNEL_CACHE_POINTS && config.iterations > 1).then(|| {
        let mut k = vec![0.0; n * n];
        k.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                if j != i {
                    *v = config.kernel_between(cloud, i, j);
                }
            }
        });
        k
    });
    for it in 1..=config.iterations {
        let prev = &field.q;
        let mut next = vec![0.0; n * l];
        next.par_chunks_mut(l).enumerate().for_each(|(i, row)| {
            // Potts: Σ_{l'≠l} Σ_j k_ij Q_j(l') = Σ_j k_ij − Σ_j k_ij Q_j(l); the
            // first term is shared by every class and cancels in normalization.
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = match &cache {
                    Some(c) => c[i * n + j],
                    None => config.kernel_between(cloud, i, j),
                };
                if k == 0.0 {
                    continue;
                }
                for (r, q) in row.iter_mut().zip(&prev[j * l..(j + 1) * l]) {
                    *r += k * q;
                }
            }
            for (c, r) in row.iter_mut().enumerate() {
                *r -= unary[i * l + c];
            }
            softmax_in_place(row);
        });
        field.q = next;
        observe(it, &field);
    }
    Ok(field)
}

fn labels_from_field(field: &MarginalField, map: &ScoreMap) -> PseudoLabel {
    let mut labels = Vec::with_capacity(map.rows);
    let mut scores = Vec::with_capacity(map.rows);
    for i in 0..map.rows {
        let mut best: Option<(usize, f64)> = None;
        for (c, (&q, &p)) in field.row(i).iter().zip(map.positive_row(i)).enumerate() {
            if p && best.is_none_or(|(_, b)| q > b) {
                best = Some((c, q));
            }
        }
        let (c, q) = best.expect("unary_potentials checked every row");
        labels.push(c as i32);
        scores.push(q);
    }
    PseudoLabel { labels, scores }
}

/// Refine masked scores into labels: argmax of the final marginals over
/// each point's positive classes.
pub fn crf_refine(cloud: &PointCloud, map: &ScoreMap, config: &CrfConfig) -> Result<PseudoLabel> {
    let field = mean_field(cloud, map, config, |_, _| {})?;
    Ok(labels_from_field(&field, map))
}

/// Refine each subcloud on its own and keep, per point and class, the
/// largest marginal over the subclouds covering it.
pub fn crf_refine_partitioned(cloud: &PointCloud, map: &ScoreMap, subclouds: &[Vec<usize>], config: &CrfConfig) -> Result<PseudoLabel> {
    if map.rows != cloud.len() {
        return Err(Error::dim("crf", &[cloud.len(), map.classes], &[map.rows, map.classes]));
    }
    let l = map.classes;
    let fields = subclouds
        .par_iter()
        .map(|members| {
            let sub = cloud.subset(members);
            let submap = map.gather(members, map.level);
            mean_field(&sub, &submap, config, |_, _| {})
        })
        .collect::<Result<Vec<_>>>()?;
    let mut merged = MarginalField {
        classes: l,
        q: vec![f64::NEG_INFINITY; cloud.len() * l],
    };
    for (members, f) in subclouds.iter().zip(&fields) {
        for (r, &p) in members.iter().enumerate() {
            for c in 0..l {
                let m = &mut merged.q[p * l + c];
                *m = m.max(f.q[r * l + c]);
            }
        }
    }
    if let Some(p) = (0..cloud.len()).find(|&p| merged.q[p * l] == f64::NEG_INFINITY) {
        return Err(Error::Contract(format!("point {p} is not covered by any subcloud")));
    }
    Ok(labels_from_field(&merged, map))
}

/// Exact refinement when the cloud fits the budget, otherwise per subcloud.
pub fn crf_refine_auto(cloud: &PointCloud, map: &ScoreMap, subclouds: &[Vec<usize>], config: &CrfConfig) -> Result<PseudoLabel> {
    if cloud.len() <= config.max_exact_points {
        crf_refine(cloud, map, config)
    } else {
        crf_refine_partitioned(cloud, map, subclouds, config)
    }
}

/// Scores for refining bare labels: `logit` for the assigned class, zero for
/// the others, masked to the classes present in `labels`.
pub fn scores_from_labels(labels: &[i32], num_classes: usize, logit: f64) -> Result<ScoreMap> {
    let present = crate::weaksup::WeakLabel::from_point_labels(num_classes, labels.iter().copied())?;
    if labels.iter().any(|&l| l < 0) {
        return Err(Error::Validation("every point needs a label to be refined".into()));
    }
    let mut scores = vec![0.0; labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        scores[i * num_classes + l as usize] = logit;
    }
    ScoreMap::masked(labels.len(), scores, &present, PathId::Fused, 0)
}
