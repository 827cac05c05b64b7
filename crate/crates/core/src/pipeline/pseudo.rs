use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::stack_batches;
use super::config::{LabelLevel, PipelineConfig};
use super::dataset::{build_inputs, save_scene, stack_inputs, PreparedScene, SubcloudInput};
use super::metrics::Metrics;
use crate::cloudstore::{nearest_indices, PointCloud};
use crate::crf::{crf_refine_auto, CrfConfig};
use crate::error::{Error, Result};
use crate::kpnet::ClassificationBackbone;
use crate::mprm::{fuse_pcams, merge_overlapping_subclouds, Fusion, MprmModel, PathId, PseudoLabel, ScoreMap};
use crate::numerics::Tape;
use crate::weaksup::WeakLabel;

/// Per-subcloud score maps of one scene, upsampled to the subcloud members:
/// `maps[subcloud][k]` belongs to `paths[k]`.
#[derive(Clone, Debug)]
pub struct SceneMaps {
    pub paths: Vec<PathId>,
    pub maps: Vec<Vec<ScoreMap>>,
}

/// Evaluation-mode maps of `paths` for every seed-grid subcloud of `scene`.
pub fn scene_maps(model: &MprmModel, scene: &PreparedScene, config: &PipelineConfig, paths: &[PathId]) -> Result<SceneMaps> {
    let disp = config.geometry.disposition()?;
    let members: Vec<&[usize]> = scene.subclouds.iter().map(|s| s.member_indices.as_slice()).collect();
    let inputs = build_inputs(&scene.cloud, &members, config, &disp, ClassificationBackbone::NUM_LEVELS)?;
    let coarse = ClassificationBackbone::NUM_LEVELS - 1;
    let sizes: Vec<usize> = inputs.iter().map(SubcloudInput::len).collect();
    let mut maps = Vec::with_capacity(inputs.len());
    for range in stack_batches(&sizes, config.classifier.batch_points) {
        let batch: Vec<&SubcloudInput> = inputs[range.clone()].iter().collect();
        let labels: Vec<WeakLabel> = range.clone().map(|s| scene.mask_label(s, config.data.level).clone()).collect();
        let mut tape = Tape::new();
        let (pyr, x) = stack_inputs(&mut tape, &batch)?;
        let per_subcloud = model.pcams(&pyr, x, &mut tape, &labels, paths)?;
        for (input, path_maps) in batch.iter().zip(per_subcloud) {
            let index = nearest_indices(input.positions(0), input.positions(coarse))?;
            maps.push(path_maps.iter().map(|m| m.gather(&index, 0)).collect());
        }
    }
    Ok(SceneMaps {
        paths: paths.to_vec(),
        maps,
    })
}

/// Fuse the selected paths per subcloud, merge across overlapping subclouds
/// and take the argmax, optionally after CRF refinement.
pub fn pseudo_labels(
    scene: &PreparedScene,
    maps: &SceneMaps,
    paths: &[PathId],
    fusion: Fusion,
    crf: Option<&CrfConfig>,
) -> Result<PseudoLabel> {
    let picks: Vec<usize> = paths
        .iter()
        .map(|p| {
            maps.paths
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::Contract(format!("path {p} was not computed")))
        })
        .collect::<Result<_>>()?;
    let fused: Vec<ScoreMap> = maps
        .maps
        .iter()
        .map(|m| {
            let chosen: Vec<ScoreMap> = picks.iter().map(|&k| m[k].clone()).collect();
            fuse_pcams(&chosen, fusion)
        })
        .collect::<Result<_>>()?;
    let parts: Vec<(&[usize], &ScoreMap)> = scene
        .subclouds
        .iter()
        .zip(&fused)
        .map(|(s, m)| (s.member_indices.as_slice(), m))
        .collect();
    let merged = merge_overlapping_subclouds(scene.cloud.len(), &parts)?;
    match crf {
        Some(c) => crf_refine_auto(&scene.cloud, &merged, &scene.member_lists(), c),
        None => merged.argmax(),
    }
}

/// Pseudo labels of one scene with their score against ground truth.
#[derive(Clone, Debug)]
pub struct ScenePseudoLabels {
    pub id: String,
    pub labels: Vec<i32>,
    pub metrics: Metrics,
}

impl ScenePseudoLabels {
    pub fn cloud(&self, scene: &PreparedScene) -> Result<PointCloud> {
        scene.cloud.clone().with_labels(self.labels.clone())
    }
}

/// Summary written next to the pseudo-label clouds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub paths: Vec<PathId>,
    pub fusion: Fusion,
    pub crf: bool,
    pub label_level: LabelLevel,
    pub metrics: Metrics,
    pub scenes: BTreeMap<String, f64>,
}

/// Scene-parallel pseudo-label generation with the paths, fusion and CRF
/// switch of `config.pcam`.
pub fn generate_pseudo_labels(
    model: &MprmModel,
    scenes: &[PreparedScene],
    config: &PipelineConfig,
) -> Result<(Vec<ScenePseudoLabels>, PseudoLabelReport)> {
    let paths = config.pcam.path_list()?;
    let crf = config.pcam.crf.then_some(&config.crf);
    let results: Vec<ScenePseudoLabels> = scenes
        .par_iter()
        .map(|scene| {
            let maps = scene_maps(model, scene, config, &paths)?;
            let pl = pseudo_labels(scene, &maps, &paths, config.pcam.fusion, crf)?;
            let mut metrics = Metrics::new(config.num_classes);
            metrics.add(&pl.labels, scene.ground_truth()?)?;
            Ok(ScenePseudoLabels {
                id: scene.id.clone(),
                labels: pl.labels,
                metrics,
            })
        })
        .collect::<Result<_>>()?;
    let mut metrics = Metrics::new(config.num_classes);
    for r in &results {
        metrics.merge(&r.metrics)?;
    }
    let report = PseudoLabelReport {
        paths,
        fusion: config.pcam.fusion,
        crf: config.pcam.crf,
        label_level: config.data.level,
        metrics,
        scenes: results.iter().map(|r| (r.id.clone(), r.metrics.miou)).collect(),
    };
    Ok((results, report))
}

/// Per-class point counts of a pseudo-labelled cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub points: usize,
    pub counts: Vec<u64>,
}

impl ClassCounts {
    pub fn of(labels: &[i32], num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for &l in labels {
            if l >= 0 && (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
        ClassCounts {
            points: labels.len(),
            counts,
        }
    }
}

/// Write `<id>.tsv` with pseudo classes in the label column and a
/// `<id>.counts.json` sidecar.
pub fn save_pseudo_labels(dir: &Path, scene: &PreparedScene, labels: &[i32], num_classes: usize) -> Result<()> {
    let cloud = scene.cloud.clone().with_labels(labels.to_vec())?;
    save_scene(dir, &scene.id, &cloud)?;
    let sidecar = dir.join(format!("{}.counts.json", scene.id));
    let text = serde_json::to_string_pretty(&ClassCounts::of(labels, num_classes))?;
    std::fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))
}
