use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{LabelLevel, PipelineConfig};
use crate::cloudstore::{grid_subsample, load_cloud_auto, save_cloud, CloudFormat, Point3, PointCloud, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::kpnet::{input_features, GeometryConfig, KernelDisposition, Pyramid, SubcloudGeometry};
use crate::numerics::{Tape, Var};
use crate::weaksup::{build_seed_grid, sample_subclouds, scene_weak_label, SubcloudSample, WeakLabel};

/// A labelled scene at network input resolution with its seed-grid subclouds.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub cloud: PointCloud,
    pub scene_label: WeakLabel,
    /// Seed-grid subclouds, each carrying the classes of its own members.
    pub subclouds: Vec<SubcloudSample>,
}

impl PreparedScene {
    /// With `subsample`, `raw` is first reduced to one point per input cell.
    pub fn new(id: impl Into<String>, raw: &PointCloud, config: &PipelineConfig, subsample: bool) -> Result<Self> {
        let cloud = if subsample {
            grid_subsample(raw, config.geometry.first_cell)?.0
        } else {
            raw.clone()
        };
        cloud.check_labels(config.num_classes)?;
        let scene_label = scene_weak_label(&cloud, config.num_classes)?;
        let grid = build_seed_grid(&cloud, config.data.radius)?;
        let subclouds = sample_subclouds(&cloud, &grid, Some(config.num_classes))?.samples;
        Ok(PreparedScene {
            id: id.into(),
            cloud,
            scene_label,
            subclouds,
        })
    }

    /// Label used to mask the maps of subcloud `s`.
    pub fn mask_label(&self, s: usize, level: LabelLevel) -> &WeakLabel {
        match level {
            LabelLevel::Subcloud => self.subclouds[s].weak_label.as_ref().expect("seed-grid samples are labelled"),
            LabelLevel::Scene => &self.scene_label,
        }
    }

    pub fn member_lists(&self) -> Vec<Vec<usize>> {
        self.subclouds.iter().map(|s| s.member_indices.clone()).collect()
    }

    pub fn ground_truth(&self) -> Result<&[i32]> {
        self.cloud
            .labels
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("scene {} has no labels", self.id)))
    }
}

/// Network input of a set of member points.
#[derive(Clone, Debug)]
pub struct SubcloudInput {
    pub geometry: SubcloudGeometry,
    pub features: Vec<f64>,
}

impl SubcloudInput {
    pub fn build(
        cloud: &PointCloud,
        members: &[usize],
        geometry: &GeometryConfig,
        disp: &KernelDisposition,
        levels: usize,
        black_indicator: bool,
    ) -> Result<Self> {
        let sub = cloud.subset(members);
        Ok(SubcloudInput {
            geometry: SubcloudGeometry::build(&sub.positions, geometry, disp, levels)?,
            features: input_features(&sub, black_indicator),
        })
    }

    pub fn len(&self) -> usize {
        self.geometry.levels[0].points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self, level: usize) -> &[Point3] {
        &self.geometry.levels[level].points
    }
}

/// Inputs for many member lists of one cloud, built in parallel.
pub fn build_inputs(
    cloud: &PointCloud,
    members: &[&[usize]],
    config: &PipelineConfig,
    disp: &KernelDisposition,
    levels: usize,
) -> Result<Vec<SubcloudInput>> {
    members
        .par_iter()
        .map(|m| SubcloudInput::build(cloud, m, &config.geometry, disp, levels, config.data.black_indicator))
        .collect()
}

/// Stack `inputs` into one pyramid and put their features on `tape`.
pub fn stack_inputs(tape: &mut Tape, inputs: &[&SubcloudInput]) -> Result<(Pyramid, Var)> {
    let geoms: Vec<&SubcloudGeometry> = inputs.iter().map(|i| &i.geometry).collect();
    let pyr = Pyramid::stack(&geoms)?;
    let feats: Vec<f64> = inputs.iter().flat_map(|i| i.features.iter().copied()).collect();
    let x = tape.constant(vec![feats.len() / FEATURE_DIM, FEATURE_DIM], feats)?;
    Ok((pyr, x))
}

/// Cloud files of `dir` in name order.
pub fn list_clouds(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("tsv" | "ply")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Validation(format!("no .tsv or .ply clouds in {}", dir.display())));
    }
    Ok(out)
}

pub fn scene_id(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Load and prepare every cloud of `dir`.
pub fn load_scenes(dir: &Path, config: &PipelineConfig, subsample: bool) -> Result<Vec<PreparedScene>> {
    list_clouds(dir)?
        .par_iter()
        .map(|p| PreparedScene::new(scene_id(p), &load_cloud_auto(p)?, config, subsample))
        .collect()
}

/// Write `cloud` as `<dir>/<id>.tsv`.
pub fn save_scene(dir: &Path, id: &str, cloud: &PointCloud) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{id}.tsv"));
    save_cloud(&path, cloud, CloudFormat::XyzrgblTsv)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::scene::{generate_scene, room_recipe};

    #[test]
    fn prepared_scene_covers_every_point() {
        let config = PipelineConfig::default();
        let raw = generate_scene(&room_recipe(&config.scenes.room, 3).unwrap(), 3).unwrap();
        let scene = PreparedScene::new("s", &raw, &config, true).unwrap();
        assert!(scene.cloud.len() <= raw.len());
        let mut covered = vec![false; scene.cloud.len()];
        for s in &scene.subclouds {
            for &m in &s.member_indices {
                covered[m] = true;
            }
            assert!(s.weak_label.as_ref().unwrap().is_subset_of(&scene.scene_label));
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn unlabelled_cloud_is_rejected() {
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], None).unwrap();
        assert!(PreparedScene::new("s", &cloud, &PipelineConfig::default(), false).is_err());
    }
}
