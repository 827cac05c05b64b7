use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloudstore::{nearest_indices, Point3};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::weaksup::WeakLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathId {
    Plain,
    Spatial,
    Channel,
    Pointwise,
    Fused,
}

impl PathId {
    /// The four trainable heads, in head order.
    pub const HEADS: [PathId; 4] = [PathId::Plain, PathId::Spatial, PathId::Channel, PathId::Pointwise];

    pub fn name(self) -> &'static str {
        match self {
            PathId::Plain => "plain",
            PathId::Spatial => "spatial",
            PathId::Channel => "channel",
            PathId::Pointwise => "pointwise",
            PathId::Fused => "fused",
        }
    }

    pub fn head_index(self) -> Option<usize> {
        PathId::HEADS.iter().position(|&p| p == self)
    }
}

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PathId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plain" | "pcam" => Ok(PathId::Plain),
            "spatial" | "sa" => Ok(PathId::Spatial),
            "channel" | "ca" => Ok(PathId::Channel),
            "pointwise" | "pa" => Ok(PathId::Pointwise),
            other => Err(Error::Config(format!("unknown path '{other}' (plain, spatial, channel, pointwise, all)"))),
        }
    }
}

/// Parse a comma-separated path list; `all` selects the four heads.
pub fn parse_paths(s: &str) -> Result<Vec<PathId>> {
    if s.trim() == "all" {
        return Ok(PathId::HEADS.to_vec());
    }
    let mut out: Vec<PathId> = s.split(',').map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("empty path list".into()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Max,
    Sum,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max" => Ok(Fusion::Max),
            "sum" => Ok(Fusion::Sum),
            other => Err(Error::Config(format!("unknown fusion '{other}' (max, sum)"))),
        }
    }
}

/// Per-point class scores with a per-entry positive-class mask. Entries of
/// negative classes are held at exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub classes: usize,
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
    pub path: PathId,
    /// Resolution level the rows index.
    pub level: usize,
}

impl ScoreMap {
    /// Mask raw `rows × classes` scores with one weak label for every row.
    pub fn masked(rows: usize, scores: Vec<f64>, label: &WeakLabel, path: PathId, level: usize) -> Result<ScoreMap> {
        let classes = label.num_classes();
        if scores.len() != rows * classes {
            return Err(Error::dim("score map", &[rows, classes], &[scores.len()]));
        }
        if label.is_empty() {
            return Err(Error::Validation("weak label has no positive class".into()));
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite class score {v}")));
        }
        let positive: Vec<bool> = (0..rows).flat_map(|_| label.bits().iter().copied()).collect();
        let scores = scores.iter().zip(&positive).map(|(&s, &p)| if p { s } else { 0.0 }).collect();
        Ok(ScoreMap {
            rows,
            classes,
            scores,
            positive,
            path,
            level,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.classes..(i + 1) * self.classes]
    }

    pub fn positive_row(&self, i: usize) -> &[bool] {
        &self.positive[i * self.classes..(i + 1) * self.classes]
    }

    /// Row `i` of the result is row `index[i]` of `self`.
    pub fn gather(&self, index: &[usize], level: usize) -> ScoreMap {
        let mut scores = Vec::with_capacity(index.len() * self.classes);
        let mut positive = Vec::with_capacity(index.len() * self.classes);
        for &j in index {
            scores.extend_from_slice(self.row(j));
            positive.extend_from_slice(self.positive_row(j));
        }
        ScoreMap {
            rows: index.len(),
            classes: self.classes,
            scores,
            positive,
            path: self.path,
            level,
        }
    }

    /// Highest-scoring positive class per row, ties to the smallest id.
    pub fn argmax(&self) -> Result<PseudoLabel> {
        let mut labels = Vec::with_capacity(self.rows);
        let mut scores = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let mut best: Option<(usize, f64)> = None;
            for (c, (&s, &p)) in self.row(i).iter().zip(self.positive_row(i)).enumerate() {
                if p && best.is_none_or(|(_, b)| s > b) {
                    best = Some((c, s));
                }
            }
            let (c, s) = best.ok_or_else(|| Error::Validation(format!("row {i} has no positive class")))?;
            labels.push(c as i32);
            scores.push(s);
        }
        Ok(PseudoLabel { labels, scores })
    }
}

/// Per-point class assignments with the winning score.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: Vec<i32>,
    pub scores: Vec<f64>,
}

/// `scores = feats · classifier`, masked by the weak label.
pub fn compute_pcam(tape: &mut Tape, feats: Var, classifier: Var, label: &WeakLabel, path: PathId, level: usize) -> Result<ScoreMap> {
    if label.is_empty() {
        return Err(Error::Validation("weak label has no positive class".into()));
    }
    let (_, classes) = tape.dims(classifier);
    if classes != label.num_classes() {
        return Err(Error::dim("compute_pcam", tape.shape(classifier), &[label.num_classes()]));
    }
    let s = tape.matmul(feats, classifier)?;
    let rows = tape.dims(s).0;
    ScoreMap::masked(rows, tape.value(s).to_vec(), label, path, level)
}

/// Element-wise max (or sum) of score maps with identical shape and mask.
pub fn fuse_pcams(maps: &[ScoreMap], fusion: Fusion) -> Result<ScoreMap> {
    let first = maps.first().ok_or(Error::EmptyInput("fusing zero score maps"))?;
    for m in &maps[1..] {
        if (m.rows, m.classes) != (first.rows, first.classes) {
            return Err(Error::dim("fuse_pcams", &[first.rows, first.classes], &[m.rows, m.classes]));
        }
        if m.positive != first.positive {
            return Err(Error::Contract("fused score maps carry different masks".into()));
        }
    }
    let mut out = first.clone();
    out.path = PathId::Fused;
    for m in &maps[1..] {
        for (o, &s) in out.scores.iter_mut().zip(&m.scores) {
            *o = match fusion {
                Fusion::Max => o.max(s),
                Fusion::Sum => *o + s,
            };
        }
    }
    Ok(out)
}

/// Nearest upsampling of a masked map to `fine_positions`, then argmax.
pub fn pseudo_labels_from_pcam(map: &ScoreMap, fine_positions: &[Point3], coarse_positions: &[Point3]) -> Result<PseudoLabel> {
    if coarse_positions.len() != map.rows {
        return Err(Error::dim("pseudo_labels_from_pcam", &[map.rows, map.classes], &[coarse_positions.len(), 3]));
    }
    if coarse_positions.is_empty() {
        return Err(Error::EmptyInput("upsampling from an empty coarse cloud"));
    }
    let index = nearest_indices(fine_positions, coarse_positions)?;
    map.gather(&index, 0).argmax()
}

/// Combine per-subcloud maps (rows indexed by `member_indices`) into one map
/// over `num_points` scene points.
///
/// A class stays positive for a point when every covering subcloud lists it;
/// if the covering labels share no class, their union is used instead. Each
/// positive entry takes the max over the covering subclouds that list it.
pub fn merge_overlapping_subclouds(num_points: usize, parts: &[(&[usize], &ScoreMap)]) -> Result<ScoreMap> {
    let (_, first) = parts.first().ok_or(Error::EmptyInput("merging zero subclouds"))?;
    let classes = first.classes;
    let mut best = vec![f64::NEG_INFINITY; num_points * classes];
    let mut all = vec![true; num_points * classes];
    let mut any = vec![false; num_points * classes];
    let mut covered = vec![false; num_points];
    for (members, map) in parts {
        if map.classes != classes || map.rows != members.len() {
            return Err(Error::dim("merge_overlapping_subclouds", &[members.len(), classes], &[map.rows, map.classes]));
        }
        for (r, &p) in members.iter().enumerate() {
            if p >= num_points {
                return Err(Error::Validation(format!("member index {p} outside {num_points} points")));
            }
            covered[p] = true;
            for c in 0..classes {
                let k = p * classes + c;
                let pos = map.positive[r * classes + c];
                all[k] &= pos;
                if pos {
                    any[k] = true;
                    best[k] = best[k].max(map.scores[r * classes + c]);
                }
            }
        }
    }
    if let Some(p) = covered.iter().position(|&c| !c) {
        return Err(Error::Contract(format!("point {p} is not covered by any subcloud")));
    }
    let mut positive = Vec::with_capacity(num_points * classes);
    for p in 0..num_points {
        let row = p * classes..(p + 1) * classes;
        if all[row.clone()].iter().any(|&b| b) {
            positive.extend_from_slice(&all[row]);
        } else {
            positive.extend_from_slice(&any[row]);
        }
    }
    let scores = best.iter().zip(&positive).map(|(&s, &pos)| if pos { s } else { 0.0 }).collect();
    Ok(ScoreMap {
        rows: num_points,
        classes,
        scores,
        positive,
        path: first.path,
        level: 0,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cloudstore::dist2;

    fn random_map(rng: &mut ChaCha8Rng, rows: usize, label: &WeakLabel, path: PathId) -> ScoreMap {
        let scores = (0..rows * label.num_classes()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        ScoreMap::masked(rows, scores, label, path, 2).unwrap()
    }

    fn random_label(rng: &mut ChaCha8Rng, classes: usize) -> WeakLabel {
        loop {
            let l = WeakLabel::from_bits((0..classes).map(|_| rng.gen_bool(0.5)).collect());
            if !l.is_empty() {
                return l;
            }
        }
    }

    #[test]
    fn masking_zeroes_negative_columns() {
        let mut t = Tape::new();
        let f = t.constant(vec![3, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let w = t.constant(vec![2, 4], (0..8).map(|v| v as f64 - 3.0).collect()).unwrap();
        let label = WeakLabel::from_classes(4, &[2]);
        let m = compute_pcam(&mut t, f, w, &label, PathId::Plain, 0).unwrap();
        for i in 0..3 {
            for c in [0, 1, 3] {
                assert_eq!(m.row(i)[c], 0.0);
            }
        }
        assert!(compute_pcam(&mut t, f, w, &WeakLabel::empty(4), PathId::Plain, 0).is_err());
    }

    #[test]
    fn one_hot_features_reproduce_pattern() {
        let mut t = Tape::new();
        let f = t.constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let w = t.constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = compute_pcam(&mut t, f, w, &WeakLabel::all(3), PathId::Plain, 0).unwrap();
        assert_eq!(m.scores, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn scores_are_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, c, k) = (20, 7, 5);
        let f: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..c * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let fv = t.constant(vec![n, c], f.clone()).unwrap();
        let wv = t.constant(vec![c, k], w.clone()).unwrap();
        let m = compute_pcam(&mut t, fv, wv, &WeakLabel::all(k), PathId::Plain, 0).unwrap();
        for p in 0..n {
            for cls in 0..k {
                let dot: f64 = (0..c).map(|i| f[p * c + i] * w[i * k + cls]).sum();
                assert!((m.row(p)[cls] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let label = WeakLabel::from_classes(5, &[0, 3, 4]);
        let maps: Vec<ScoreMap> = PathId::HEADS.iter().map(|&p| random_map(&mut rng, 30, &label, p)).collect();
        let fused = fuse_pcams(&maps, Fusion::Max).unwrap();
        assert_eq!(fused.path, PathId::Fused);
        for k in 0..fused.scores.len() {
            let want = maps[0].scores[k].max(maps[1].scores[k]).max(maps[2].scores[k]).max(maps[3].scores[k]);
            assert_eq!(fused.scores[k], want);
            assert!(maps.iter().all(|m| fused.scores[k] >= m.scores[k]));
        }
        let same = vec![maps[0].clone(); 4];
        assert_eq!(fuse_pcams(&same, Fusion::Max).unwrap().scores, maps[0].scores);
        let short = random_map(&mut rng, 29, &label, PathId::Plain);
        assert!(fuse_pcams(&[maps[0].clone(), short], Fusion::Max).is_err());
    }

    #[test]
    fn hand_built_argmax() {
        let label = WeakLabel::all(2);
        let m = ScoreMap::masked(2, vec![2.0, 1.0, 0.0, 3.0], &label, PathId::Fused, 0).unwrap();
        let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
        let pl = pseudo_labels_from_pcam(&m, &pts, &pts).unwrap();
        assert_eq!(pl.labels, vec![0, 1]);
        assert_eq!(pl.scores, vec![2.0, 3.0]);
        let tie = ScoreMap::masked(1, vec![1.0, 1.0], &label, PathId::Fused, 0).unwrap();
        assert_eq!(tie.argmax().unwrap().labels, vec![0]);
    }

    #[test]
    fn single_positive_class_labels_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let label = WeakLabel::from_classes(6, &[4]);
        let m = random_map(&mut rng, 10, &label, PathId::Fused);
        let coarse: Vec<Point3> = (0..10).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
        let fine: Vec<Point3> = (0..50).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
        let pl = pseudo_labels_from_pcam(&m, &fine, &coarse).unwrap();
        assert!(pl.labels.iter().all(|&l| l == 4));
    }

    #[test]
    fn upsampled_argmax_matches_brute_force() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let label = random_label(&mut rng, 6);
            let m = random_map(&mut rng, 25, &label, PathId::Fused);
            let coarse: Vec<Point3> = (0..25).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
            let fine: Vec<Point3> = (0..80).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
            let pl = pseudo_labels_from_pcam(&m, &fine, &coarse).unwrap();
            for (p, &got) in fine.iter().zip(&pl.labels) {
                let mut nearest = 0;
                for j in 1..coarse.len() {
                    if dist2(p, &coarse[j]) < dist2(p, &coarse[nearest]) {
                        nearest = j;
                    }
                }
                let mut want = None;
                for c in label.classes() {
                    let s = m.row(nearest)[c];
                    if want.is_none_or(|(_, b)| s > b) {
                        want = Some((c, s));
                    }
                }
                assert_eq!(got, want.unwrap().0 as i32);
            }
        }
    }

    #[test]
    fn argmax_ignores_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let label = WeakLabel::from_classes(4, &[1, 2, 3]);
        let m = random_map(&mut rng, 40, &label, PathId::Fused);
        let mut scaled = m.clone();
        scaled.scores.iter_mut().for_each(|s| *s *= 3.5);
        assert_eq!(m.argmax().unwrap().labels, scaled.argmax().unwrap().labels);
    }

    #[test]
    fn merge_cases() {
        let label = WeakLabel::all(2);
        let a = ScoreMap::masked(2, vec![0.1, 0.2, 0.3, 0.4], &label, PathId::Fused, 0).unwrap();
        let b = ScoreMap::masked(1, vec![0.5, 0.6], &label, PathId::Fused, 0).unwrap();
        let disjoint = merge_overlapping_subclouds(3, &[(&[0, 2], &a), (&[1], &b)]).unwrap();
        assert_eq!(disjoint.scores, vec![0.1, 0.2, 0.5, 0.6, 0.3, 0.4]);

        let c = ScoreMap::masked(1, vec![0.2, 0.0], &label, PathId::Fused, 0).unwrap();
        let d = ScoreMap::masked(1, vec![0.7, 0.0], &label, PathId::Fused, 0).unwrap();
        let over = merge_overlapping_subclouds(1, &[(&[0], &c), (&[0], &d)]).unwrap();
        assert_eq!(over.scores[0], 0.7);

        match merge_overlapping_subclouds(3, &[(&[0, 2], &a)]) {
            Err(Error::Contract(msg)) => assert!(msg.contains("point 1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn merge_matches_brute_force() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let label = random_label(&mut rng, 5);
            let mut parts = Vec::new();
            for s in 0..6 {
                let mut members: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.4)).collect();
                // guarantee coverage with a stripe per subcloud
                members.extend(s * 10..s * 10 + 10);
                members.sort();
                members.dedup();
                let map = random_map(&mut rng, members.len(), &label, PathId::Fused);
                parts.push((members, map));
            }
            let refs: Vec<(&[usize], &ScoreMap)> = parts.iter().map(|(m, s)| (m.as_slice(), s)).collect();
            let merged = merge_overlapping_subclouds(n, &refs).unwrap();
            for p in 0..n {
                for c in 0..5 {
                    let mut want = if label.contains(c) { f64::NEG_INFINITY } else { 0.0 };
                    if label.contains(c) {
                        for (members, map) in &parts {
                            if let Some(r) = members.iter().position(|&m| m == p) {
                                want = want.max(map.row(r)[c]);
                            }
                        }
                    }
                    assert_eq!(merged.row(p)[c], want);
                }
            }
        }
    }

    #[test]
    fn merge_intersects_subcloud_labels() {
        let a = ScoreMap::masked(1, vec![5.0, 1.0, 0.0], &WeakLabel::from_classes(3, &[0, 1]), PathId::Fused, 0).unwrap();
        let b = ScoreMap::masked(1, vec![0.0, 2.0, 3.0], &WeakLabel::from_classes(3, &[1, 2]), PathId::Fused, 0).unwrap();
        let m = merge_overlapping_subclouds(1, &[(&[0], &a), (&[0], &b)]).unwrap();
        assert_eq!(m.positive, vec![false, true, false]);
        assert_eq!(m.scores, vec![0.0, 2.0, 0.0]);
        assert_eq!(m.argmax().unwrap().labels, vec![1]);
    }

    #[test]
    fn path_lists() {
        assert_eq!(parse_paths("all").unwrap(), PathId::HEADS.to_vec());
        assert_eq!(parse_paths("spatial,plain,plain").unwrap(), vec![PathId::Plain, PathId::Spatial]);
        assert!(matches!(parse_paths("plain,bogus"), Err(Error::Config(_))));
        assert_eq!("sum".parse::<Fusion>().unwrap(), Fusion::Sum);
    }
}
