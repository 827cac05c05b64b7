//! Synthetic indoor scenes built from labelled surface primitives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloudstore::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Class table of the generator: `(name, base color)`.
pub const CLASSES: [(&str, [f64; 3]); 6] = [
    ("floor", [0.55, 0.45, 0.35]),
    ("wall", [0.85, 0.85, 0.80]),
    ("table", [0.60, 0.30, 0.10]),
    ("chair", [0.20, 0.30, 0.70]),
    ("cabinet", [0.30, 0.60, 0.30]),
    ("sofa", [0.70, 0.20, 0.25]),
];

pub const FLOOR: i32 = 0;
pub const WALL: i32 = 1;

pub fn class_names() -> Vec<String> {
    CLASSES.iter().map(|(n, _)| n.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Horizontal rectangle at height `z`.
    Plane { min: [f64; 2], max: [f64; 2], z: f64 },
    /// Axis-aligned box surface without its bottom face.
    Box { min: Point3, max: Point3 },
}

impl Shape {
    fn faces(&self) -> Vec<(f64, Face)> {
        match *self {
            Shape::Plane { min, max, z } => {
                vec![((max[0] - min[0]) * (max[1] - min[1]), Face { origin: [min[0], min[1], z], u: [max[0] - min[0], 0.0, 0.0], v: [0.0, max[1] - min[1], 0.0] })]
            }
            Shape::Box { min, max } => {
                let d = [max[0] - min[0], max[1] - min[1], max[2] - min[2]];
                vec![
                    (d[0] * d[1], Face { origin: [min[0], min[1], max[2]], u: [d[0], 0.0, 0.0], v: [0.0, d[1], 0.0] }),
                    (d[0] * d[2], Face { origin: min, u: [d[0], 0.0, 0.0], v: [0.0, 0.0, d[2]] }),
                    (d[0] * d[2], Face { origin: [min[0], max[1], min[2]], u: [d[0], 0.0, 0.0], v: [0.0, 0.0, d[2]] }),
                    (d[1] * d[2], Face { origin: min, u: [0.0, d[1], 0.0], v: [0.0, 0.0, d[2]] }),
                    (d[1] * d[2], Face { origin: [max[0], min[1], min[2]], u: [0.0, d[1], 0.0], v: [0.0, 0.0, d[2]] }),
                ]
            }
        }
    }

    pub fn area(&self) -> f64 {
        self.faces().iter().map(|(a, _)| a).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct Face {
    origin: Point3,
    u: Point3,
    v: Point3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub class: i32,
    pub shape: Shape,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub primitives: Vec<Primitive>,
    /// Points per square meter of surface.
    pub density: f64,
    /// Standard deviation of positional noise (m).
    pub noise: f64,
    /// Standard deviation of per-point color noise.
    pub color_jitter: f64,
}

/// Sample a labelled cloud from `recipe`; identical seeds give identical
/// clouds.
pub fn generate_scene(recipe: &SceneRecipe, seed: u64) -> Result<PointCloud> {
    if recipe.primitives.is_empty() {
        return Err(Error::EmptyInput("scene recipe without primitives"));
    }
    if !(recipe.density > 0.0) || recipe.noise < 0.0 || recipe.color_jitter < 0.0 {
        return Err(Error::Validation("recipe density must be positive and noise levels nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos_noise = Normal::new(0.0, recipe.noise).map_err(|e| Error::Validation(e.to_string()))?;
    let col_noise = Normal::new(0.0, recipe.color_jitter).map_err(|e| Error::Validation(e.to_string()))?;
    let (mut positions, mut colors, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for prim in &recipe.primitives {
        let faces = prim.shape.faces();
        let total: f64 = faces.iter().map(|(a, _)| a).sum();
        let count = (recipe.density * total).round() as usize;
        for _ in 0..count {
            let mut pick = rng.gen_range(0.0..total);
            let face = faces
                .iter()
                .find(|(a, _)| {
                    let hit = pick < *a;
                    pick -= a;
                    hit
                })
                .map_or(faces[faces.len() - 1].1, |(_, f)| *f);
            let (s, t): (f64, f64) = (rng.gen(), rng.gen());
            let p = [0, 1, 2].map(|a| face.origin[a] + s * face.u[a] + t * face.v[a] + pos_noise.sample(&mut rng));
            let c = prim.color.map(|x| x + col_noise.sample(&mut rng));
            positions.push(p);
            colors.push(c);
            labels.push(prim.class);
        }
    }
    PointCloud::new(positions, colors, Some(labels))
}

/// Parameters of [`room_recipe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomConfig {
    pub min_size: f64,
    pub max_size: f64,
    pub wall_height: f64,
    pub density: f64,
    pub noise: f64,
    pub color_jitter: f64,
    pub min_classes: usize,
    pub max_classes: usize,
}

impl Default for RoomConfig {
    fn default() -> Self {
        RoomConfig {
            min_size: 3.0,
            max_size: 4.5,
            wall_height: 1.5,
            density: 120.0,
            noise: 0.005,
            color_jitter: 0.03,
            min_classes: 2,
            max_classes: 4,
        }
    }
}

fn furniture_box(class: i32, rng: &mut ChaCha8Rng) -> Point3 {
    match class {
        2 => [rng.gen_range(0.8..1.4), rng.gen_range(0.6..1.0), 0.75],
        3 => [0.5, 0.5, rng.gen_range(0.45..0.9)],
        4 => [rng.gen_range(0.4..0.8), rng.gen_range(0.8..1.4), rng.gen_range(0.9..1.3)],
        _ => [rng.gen_range(1.4..2.0), 0.9, 0.8],
    }
}

/// A random room: floor always, then a random set of walls and furniture so
/// that the scene holds between `min_classes` and `max_classes` classes.
pub fn room_recipe(config: &RoomConfig, seed: u64) -> Result<SceneRecipe> {
    if config.min_classes < 2 || config.max_classes < config.min_classes || config.max_classes > CLASSES.len() {
        return Err(Error::Config(format!(
            "room classes must satisfy 2 <= min ({}) <= max ({}) <= {}",
            config.min_classes,
            config.max_classes,
            CLASSES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4e);
    let sx = rng.gen_range(config.min_size..=config.max_size);
    let sy = rng.gen_range(config.min_size..=config.max_size);
    let n_classes = rng.gen_range(config.min_classes..=config.max_classes);
    let mut others: Vec<i32> = (1..CLASSES.len() as i32).collect();
    others.shuffle(&mut rng);
    let chosen = &others[..n_classes - 1];
    let mut prims = vec![Primitive {
        class: FLOOR,
        shape: Shape::Plane { min: [0.0, 0.0], max: [sx, sy], z: 0.0 },
        color: CLASSES[0].1,
    }];
    let mut placed: Vec<(Point3, Point3)> = Vec::new();
    for &class in chosen {
        let color = CLASSES[class as usize].1;
        if class == WALL {
            let t = 0.1;
            let h = config.wall_height;
            prims.push(Primitive { class, shape: Shape::Box { min: [-t, 0.0, 0.0], max: [0.0, sy, h] }, color });
            prims.push(Primitive { class, shape: Shape::Box { min: [0.0, sy, 0.0], max: [sx, sy + t, h] }, color });
            continue;
        }
        let copies = if class == 3 { 2 } else { 1 };
        for _ in 0..copies {
            let d = furniture_box(class, &mut rng);
            for _ in 0..200 {
                let x = rng.gen_range(0.2..(sx - d[0] - 0.2).max(0.21));
                let y = rng.gen_range(0.2..(sy - d[1] - 0.2).max(0.21));
                let (lo, hi) = ([x, y, 0.0], [x + d[0], y + d[1], d[2]]);
                let clear = placed
                    .iter()
                    .all(|(a, b)| hi[0] + 0.2 < a[0] || b[0] + 0.2 < lo[0] || hi[1] + 0.2 < a[1] || b[1] + 0.2 < lo[1]);
                if clear {
                    placed.push((lo, hi));
                    prims.push(Primitive { class, shape: Shape::Box { min: lo, max: hi }, color });
                    break;
                }
            }
        }
    }
    Ok(SceneRecipe {
        primitives: prims,
        density: config.density,
        noise: config.noise,
        color_jitter: config.color_jitter,
    })
}

/// `count` rooms named `scene_000`, `scene_001`, ...; room `i` uses seed
/// `seed·1000 + i` for both its recipe and its sampling.
pub fn generate_rooms(config: &RoomConfig, count: usize, seed: u64) -> Result<Vec<(String, PointCloud)>> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            Ok((format!("scene_{i:03}"), generate_scene(&room_recipe(config, s)?, s)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn floor_only_count() {
        let recipe = SceneRecipe {
            primitives: vec![Primitive {
                class: FLOOR,
                shape: Shape::Plane { min: [0.0, 0.0], max: [4.0, 4.0], z: 0.0 },
                color: CLASSES[0].1,
            }],
            density: 100.0,
            noise: 0.0,
            color_jitter: 0.0,
        };
        let cloud = generate_scene(&recipe, 1).unwrap();
        assert_eq!(cloud.len(), 1600);
        assert!(cloud.labels.as_ref().unwrap().iter().all(|&l| l == FLOOR));
        assert!(cloud.positions.iter().all(|p| p[2] == 0.0 && (0.0..=4.0).contains(&p[0])));
    }

    #[test]
    fn floor_and_box_give_two_labels() {
        let recipe = SceneRecipe {
            primitives: vec![
                Primitive { class: FLOOR, shape: Shape::Plane { min: [0.0, 0.0], max: [3.0, 3.0], z: 0.0 }, color: CLASSES[0].1 },
                Primitive { class: 4, shape: Shape::Box { min: [1.0, 1.0, 0.0], max: [1.5, 2.0, 1.0] }, color: CLASSES[4].1 },
            ],
            density: 50.0,
            noise: 0.01,
            color_jitter: 0.02,
        };
        let cloud = generate_scene(&recipe, 2).unwrap();
        let labels: BTreeSet<i32> = cloud.labels.unwrap().into_iter().collect();
        assert_eq!(labels, BTreeSet::from([FLOOR, 4]));
    }

    #[test]
    fn generation_is_deterministic() {
        let recipe = room_recipe(&RoomConfig::default(), 5).unwrap();
        assert_eq!(generate_scene(&recipe, 9).unwrap(), generate_scene(&recipe, 9).unwrap());
        assert_ne!(generate_scene(&recipe, 9).unwrap().positions, generate_scene(&recipe, 10).unwrap().positions);
    }

    #[test]
    fn rooms_hold_two_to_four_classes() {
        for seed in 0..30 {
            let recipe = room_recipe(&RoomConfig::default(), seed).unwrap();
            let cloud = generate_scene(&recipe, seed).unwrap();
            let labels: BTreeSet<i32> = cloud.labels.unwrap().into_iter().collect();
            assert!((2..=4).contains(&labels.len()), "seed {seed}: {labels:?}");
            assert!(labels.contains(&FLOOR));
        }
    }

    #[test]
    fn empty_recipe_is_rejected() {
        let recipe = SceneRecipe { primitives: vec![], density: 1.0, noise: 0.0, color_jitter: 0.0 };
        assert!(matches!(generate_scene(&recipe, 0), Err(Error::EmptyInput(_))));
    }
}
