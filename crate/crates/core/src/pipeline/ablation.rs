use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::dataset::PreparedScene;
use super::metrics::Metrics;
use super::pseudo::{pseudo_labels, scene_maps, SceneMaps};
use crate::error::Result;
use crate::mprm::{Fusion, MprmModel, PathId};

/// One row of the path ablation: which heads were fused and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub paths: Vec<PathId>,
    pub fusion: Fusion,
    pub metrics: Metrics,
}

impl AblationRow {
    pub fn name(&self) -> String {
        let names: Vec<&str> = self.paths.iter().map(|p| p.name()).collect();
        let mut s = names.join("+");
        if self.paths.len() > 1 {
            let _ = write!(s, " ({})", if self.fusion == Fusion::Max { "max" } else { "sum" });
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub crf: bool,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<40} {:>6}", "paths", "mIoU");
        for n in class_names {
            let _ = write!(out, " {:>8}", n);
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<40} {:>6.1}", row.name(), 100.0 * row.metrics.miou);
            for v in &row.metrics.iou {
                match v {
                    Some(v) => {
                        let _ = write!(out, " {:>8.1}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Single paths, plain combined with each attention path, all four by max
/// and all four by sum.
pub fn ablation_rows() -> Vec<(Vec<PathId>, Fusion)> {
    use PathId::*;
    let mut rows: Vec<(Vec<PathId>, Fusion)> = PathId::HEADS.iter().map(|&p| (vec![p], Fusion::Max)).collect();
    for p in [Spatial, Channel, Pointwise] {
        rows.push((vec![Plain, p], Fusion::Max));
    }
    rows.push((PathId::HEADS.to_vec(), Fusion::Max));
    rows.push((PathId::HEADS.to_vec(), Fusion::Sum));
    rows
}

/// Score every ablation row from one model trained with all four heads;
/// each scene's maps are computed once and reused across rows.
pub fn ablate(model: &MprmModel, scenes: &[PreparedScene], config: &PipelineConfig) -> Result<AblationReport> {
    let crf = config.pcam.crf.then_some(&config.crf);
    let rows = ablation_rows();
    let per_scene: Vec<Vec<Metrics>> = scenes
        .par_iter()
        .map(|scene| {
            let maps: SceneMaps = scene_maps(model, scene, config, &PathId::HEADS)?;
            let truth = scene.ground_truth()?;
            rows.iter()
                .map(|(paths, fusion)| {
                    let pl = pseudo_labels(scene, &maps, paths, *fusion, crf)?;
                    let mut m = Metrics::new(config.num_classes);
                    m.add(&pl.labels, truth)?;
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(rows.len());
    for (r, (paths, fusion)) in rows.into_iter().enumerate() {
        let mut metrics = Metrics::new(config.num_classes);
        for scene in &per_scene {
            metrics.merge(&scene[r])?;
        }
        out.push(AblationRow { paths, fusion, metrics });
    }
    Ok(AblationReport {
        crf: config.pcam.crf,
        rows: out,
    })
}
