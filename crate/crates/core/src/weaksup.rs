//! Cloud-level weak labels: seed-grid subcloud sampling, scene and subcloud
//! multi-hot labels, and class-frequency statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloudstore::{KdTree, Point3, PointCloud, UNCLASSIFIED};
use crate::error::{Error, Result};

/// Multi-hot class-presence vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeakLabel(Vec<bool>);

impl WeakLabel {
    pub fn empty(num_classes: usize) -> Self {
        WeakLabel(vec![false; num_classes])
    }

    pub fn all(num_classes: usize) -> Self {
        WeakLabel(vec![true; num_classes])
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Self {
        let mut l = Self::empty(num_classes);
        for &c in classes {
            l.0[c] = true;
        }
        l
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        WeakLabel(bits)
    }

    /// Classes present among `labels`, ignoring unclassified points.
    pub fn from_point_labels(num_classes: usize, labels: impl IntoIterator<Item = i32>) -> Result<Self> {
        let mut l = Self::empty(num_classes);
        for c in labels {
            if c == UNCLASSIFIED {
                continue;
            }
            let c = usize::try_from(c)
                .ok()
                .filter(|&c| c < num_classes)
                .ok_or_else(|| Error::Validation(format!("label {c} outside 0..{num_classes}")))?;
            l.0[c] = true;
        }
        Ok(l)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0[class]
    }

    pub fn set(&mut self, class: usize, present: bool) {
        self.0[class] = present;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(c, _)| c)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// No positive class at all.
    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &WeakLabel) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &WeakLabel) -> WeakLabel {
        WeakLabel(self.0.iter().zip(&other.0).map(|(&a, &b)| a || b).collect())
    }

    pub fn intersection(&self, other: &WeakLabel) -> WeakLabel {
        WeakLabel(self.0.iter().zip(&other.0).map(|(&a, &b)| a && b).collect())
    }

    /// 0/1 targets for a sigmoid cross-entropy.
    pub fn targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_bits_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&b| b as u8).collect()
    }
}

/// Regularly spaced seeding points over a scene's bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedGrid {
    pub counts: [usize; 3],
    pub coords: [Vec<f64>; 3],
    pub min: Point3,
    pub extent: [f64; 3],
    pub radius: f64,
}

impl SeedGrid {
    pub fn num_seeds(&self) -> usize {
        self.counts.iter().product()
    }

    /// Seeds in x-major, then y, then z order.
    pub fn seeds(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.num_seeds());
        for &x in &self.coords[0] {
            for &y in &self.coords[1] {
                for &z in &self.coords[2] {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }
}

/// Seeds per axis: `⌈l / r⌉` (at least one), placed at cell centers
/// `min + (k + ½)·l/n` so every point of the box lies within `r` of a seed.
pub fn build_seed_grid(cloud: &PointCloud, radius: f64) -> Result<SeedGrid> {
    if !(radius > 0.0) {
        return Err(Error::Validation(format!("subcloud radius {radius} must be positive")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("seed grid over an empty cloud"));
    }
    let (lo, hi) = cloud.bounding_box();
    let mut counts = [1usize; 3];
    let mut coords: [Vec<f64>; 3] = Default::default();
    let mut extent = [0.0; 3];
    for a in 0..3 {
        let l = hi[a] - lo[a];
        extent[a] = l;
        let n = ((l / radius).ceil() as usize).max(1);
        counts[a] = n;
        let step = l / n as f64;
        coords[a] = (0..n).map(|k| lo[a] + (k as f64 + 0.5) * step).collect();
    }
    Ok(SeedGrid {
        counts,
        coords,
        min: lo,
        extent,
        radius,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubcloudSample {
    pub seed: Point3,
    pub radius: f64,
    /// Indices into the parent cloud, in ascending order.
    pub member_indices: Vec<usize>,
    pub weak_label: Option<WeakLabel>,
}

impl SubcloudSample {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SubcloudSet {
    pub samples: Vec<SubcloudSample>,
    /// Seeds whose ball contained no point.
    pub dropped_empty: usize,
}

fn members(tree: &KdTree, seed: &Point3, radius: f64) -> Vec<usize> {
    let mut m: Vec<usize> = tree.within(seed, radius).into_iter().map(|(i, _)| i).collect();
    m.sort_unstable();
    m
}

fn label_of(cloud: &PointCloud, members: &[usize], num_classes: usize) -> Result<WeakLabel> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("labelled subclouds requested from an unlabelled cloud".into()))?;
    WeakLabel::from_point_labels(num_classes, members.iter().map(|&i| labels[i]))
}

/// One subcloud `{p : ‖p − q‖ < r}` per seed of `grid`; seeds with no member
/// are dropped. With `num_classes` set, each sample carries the classes of
/// its members.
pub fn sample_subclouds(cloud: &PointCloud, grid: &SeedGrid, num_classes: Option<usize>) -> Result<SubcloudSet> {
    if num_classes.is_some() && !cloud.has_labels() {
        return Err(Error::Contract("labelled subclouds requested from an unlabelled cloud".into()));
    }
    let tree = KdTree::build(&cloud.positions);
    let mut set = SubcloudSet::default();
    for seed in grid.seeds() {
        let member_indices = members(&tree, &seed, grid.radius);
        if member_indices.is_empty() {
            set.dropped_empty += 1;
            continue;
        }
        let weak_label = num_classes
            .map(|n| label_of(cloud, &member_indices, n))
            .transpose()?;
        set.samples.push(SubcloudSample {
            seed,
            radius: grid.radius,
            member_indices,
            weak_label,
        });
    }
    Ok(set)
}

/// Subclouds around seeds drawn uniformly from the bounding box (rejecting
/// empty balls), each tagged with the given scene-level label.
pub fn random_subclouds<R: Rng + ?Sized>(
    cloud: &PointCloud,
    radius: f64,
    count: usize,
    scene_label: &WeakLabel,
    rng: &mut R,
) -> Result<Vec<SubcloudSample>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("random subclouds of an empty cloud"));
    }
    let tree = KdTree::build(&cloud.positions);
    let (lo, hi) = cloud.bounding_box();
    let mut out = Vec::with_capacity(count);
    let max_attempts = 1000 * count.max(1);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Numeric(format!("no nonempty subcloud after {max_attempts} random seeds")));
        }
        let seed = [0, 1, 2].map(|a| if hi[a] > lo[a] { rng.gen_range(lo[a]..=hi[a]) } else { lo[a] });
        let member_indices = members(&tree, &seed, radius);
        if member_indices.is_empty() {
            continue;
        }
        out.push(SubcloudSample {
            seed,
            radius,
            member_indices,
            weak_label: Some(scene_label.clone()),
        });
    }
    Ok(out)
}

/// Classes present anywhere in a labelled scene.
pub fn scene_weak_label(cloud: &PointCloud, num_classes: usize) -> Result<WeakLabel> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("scene label of an unlabelled cloud".into()))?;
    let label = WeakLabel::from_point_labels(num_classes, labels.iter().copied())?;
    if label.is_empty() {
        return Err(Error::Validation("every point is unclassified".into()));
    }
    Ok(label)
}

/// Fraction of labels containing each class.
pub fn class_frequencies(labels: &[WeakLabel]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or(Error::EmptyInput("class frequencies"))?;
    let mut counts = vec![0usize; first.num_classes()];
    for l in labels {
        if l.num_classes() != counts.len() {
            return Err(Error::dim("class_frequencies", &[counts.len()], &[l.num_classes()]));
        }
        for c in l.classes() {
            counts[c] += 1;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / labels.len() as f64).collect())
}

/// Published class frequencies (%) over a large indoor-scan benchmark:
/// `(class, scene-level, subcloud-level)` at a 2 m subcloud radius.
/// Reference data only; nothing here recomputes it.
pub const REFERENCE_FREQUENCIES: [(&str, f64, f64); 20] = [
    ("wall", 97.3, 77.6),
    ("floor", 99.3, 51.5),
    ("cabinet", 46.9, 17.8),
    ("bed", 20.4, 8.3),
    ("chair", 66.4, 28.0),
    ("sofa", 23.2, 8.6),
    ("table", 51.8, 19.2),
    ("door", 72.7, 24.7),
    ("window", 50.7, 18.0),
    ("bookshelf", 14.3, 5.6),
    ("picture", 26.7, 7.7),
    ("counter", 14.9, 5.1),
    ("desk", 27.2, 9.1),
    ("curtain", 16.1, 5.8),
    ("refrigerator", 14.7, 3.7),
    ("shower curtain", 8.8, 1.9),
    ("toilet", 15.7, 2.6),
    ("sink", 26.8, 4.7),
    ("bathtub", 94.0, 1.7),
    ("other", 74.0, 20.9),
];

/// One JSON-lines record describing a labelled subcloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub scene_id: String,
    pub seed: Point3,
    pub radius: f64,
    pub label_bits: Vec<u8>,
    pub member_count: usize,
}

impl WeakLabelRecord {
    pub fn new(scene_id: &str, sample: &SubcloudSample) -> Self {
        WeakLabelRecord {
            scene_id: scene_id.to_string(),
            seed: sample.seed,
            radius: sample.radius,
            label_bits: sample.weak_label.as_ref().map(WeakLabel::to_bits_u8).unwrap_or_default(),
            member_count: sample.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cloudstore::dist2;

    fn box_cloud(extent: [f64; 3]) -> PointCloud {
        PointCloud::new(vec![[0.0; 3], extent], vec![[0.0; 3]; 2], Some(vec![0, 1])).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: [f64; 3], classes: i32) -> PointCloud {
        let pos = (0..n)
            .map(|_| [0, 1, 2].map(|a| rng.gen_range(0.0..extent[a])))
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(-1..classes)).collect();
        PointCloud::new(pos, vec![[0.5; 3]; n], Some(labels)).unwrap()
    }

    #[test]
    fn average_scene_box_gives_eighteen_seeds() {
        let grid = build_seed_grid(&box_cloud([5.5, 5.1, 2.4]), 2.0).unwrap();
        assert_eq!(grid.counts, [3, 3, 2]);
        assert_eq!(grid.num_seeds(), 18);
        assert_eq!(grid.seeds().len(), 18);
    }

    #[test]
    fn small_box_gets_one_central_seed() {
        let grid = build_seed_grid(&box_cloud([1.0, 1.0, 1.0]), 2.0).unwrap();
        assert_eq!(grid.seeds(), vec![[0.5, 0.5, 0.5]]);
    }

    #[test]
    fn flat_axis_gets_one_seed() {
        let grid = build_seed_grid(&box_cloud([4.0, 3.0, 0.0]), 2.0).unwrap();
        assert_eq!(grid.counts, [2, 2, 1]);
    }

    #[test]
    fn seed_grid_covers_every_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2000);
        let cloud = random_cloud(&mut rng, 2000, [6.0, 6.0, 3.0], 3);
        let grid = build_seed_grid(&cloud, 2.0).unwrap();
        let seeds = grid.seeds();
        for p in &cloud.positions {
            assert!(seeds.iter().any(|s| dist2(s, p) < 4.0));
        }
    }

    #[test]
    fn single_point_subcloud() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], Some(vec![4])).unwrap();
        let grid = build_seed_grid(&cloud, 1.0).unwrap();
        let set = sample_subclouds(&cloud, &grid, Some(6)).unwrap();
        assert_eq!(set.samples.len(), 1);
        assert_eq!(set.samples[0].member_indices, vec![0]);
        assert_eq!(set.samples[0].weak_label, Some(WeakLabel::from_classes(6, &[4])));
    }

    #[test]
    fn boundary_points_are_excluded_and_empty_seeds_dropped() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0]], vec![[0.0; 3]], None).unwrap();
        let grid = SeedGrid {
            counts: [1, 1, 1],
            coords: [vec![0.0], vec![0.0], vec![0.0]],
            min: [0.0; 3],
            extent: [0.0; 3],
            radius: 1.0,
        };
        let set = sample_subclouds(&cloud, &grid, None).unwrap();
        assert!(set.samples.is_empty());
        assert_eq!(set.dropped_empty, 1);
    }

    #[test]
    fn unlabelled_cloud_cannot_yield_labelled_subclouds() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], None).unwrap();
        let grid = build_seed_grid(&cloud, 1.0).unwrap();
        assert!(matches!(sample_subclouds(&cloud, &grid, Some(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn subclouds_overlap_cover_and_respect_scene_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 1500, [5.0, 4.0, 2.5], 5);
        let grid = build_seed_grid(&cloud, 1.5).unwrap();
        let set = sample_subclouds(&cloud, &grid, Some(5)).unwrap();
        let total: usize = set.samples.iter().map(SubcloudSample::len).sum();
        assert!(total >= cloud.len());

        let scene = scene_weak_label(&cloud, 5).unwrap();
        let mut union = WeakLabel::empty(5);
        for s in &set.samples {
            let l = s.weak_label.as_ref().unwrap();
            assert!(l.is_subset_of(&scene));
            union = union.union(l);
            for &i in &s.member_indices {
                assert!(dist2(&cloud.positions[i], &s.seed) < s.radius * s.radius);
            }
        }
        assert_eq!(union, scene);

        let again = sample_subclouds(&cloud, &grid, Some(5)).unwrap();
        assert_eq!(again.samples, set.samples);
    }

    #[test]
    fn scene_label_examples() {
        let c = PointCloud::new(vec![[0.0; 3]; 3], vec![[0.0; 3]; 3], Some(vec![0, 0, 3])).unwrap();
        assert_eq!(scene_weak_label(&c, 5).unwrap(), WeakLabel::from_classes(5, &[0, 3]));
        let c = PointCloud::new(vec![[0.0; 3]; 2], vec![[0.0; 3]; 2], Some(vec![-1, 5])).unwrap();
        assert_eq!(scene_weak_label(&c, 6).unwrap(), WeakLabel::from_classes(6, &[5]));
        let c = PointCloud::new(vec![[0.0; 3]; 2], vec![[0.0; 3]; 2], Some(vec![-1, -1])).unwrap();
        assert!(scene_weak_label(&c, 6).is_err());
    }

    #[test]
    fn frequencies() {
        let all = vec![WeakLabel::all(4); 3];
        assert_eq!(class_frequencies(&all).unwrap(), vec![1.0; 4]);
        let mixed = vec![WeakLabel::from_classes(3, &[0]), WeakLabel::from_classes(3, &[0, 2])];
        assert_eq!(class_frequencies(&mixed).unwrap(), vec![1.0, 0.0, 0.5]);
        assert!(class_frequencies(&[]).is_err());
    }

    #[test]
    fn reference_table_shows_dominant_class_drop() {
        let (_, wall_scene, wall_sub) = REFERENCE_FREQUENCIES[0];
        let (_, floor_scene, floor_sub) = REFERENCE_FREQUENCIES[1];
        assert_eq!((wall_scene, wall_sub), (97.3, 77.6));
        assert_eq!((floor_scene, floor_sub), (99.3, 51.5));
        assert!(REFERENCE_FREQUENCIES.iter().all(|(_, s, c)| c < s));
    }

    #[test]
    fn random_subclouds_are_nonempty_and_carry_scene_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 300, [4.0, 4.0, 2.0], 3);
        let label = scene_weak_label(&cloud, 3).unwrap();
        let subs = random_subclouds(&cloud, 1.0, 12, &label, &mut rng).unwrap();
        assert_eq!(subs.len(), 12);
        assert!(subs.iter().all(|s| !s.is_empty() && s.weak_label.as_ref() == Some(&label)));
    }
}
