use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::stack_batches;
use super::config::{LabelLevel, PipelineConfig};
use super::dataset::{build_inputs, stack_inputs, PreparedScene, SubcloudInput};
use super::optim::Sgd;
use crate::error::{Error, Result};
use crate::kpnet::{ClassificationBackbone, KernelDisposition};
use crate::mprm::{MprmModel, PathId};
use crate::numerics::Tape;
use crate::weaksup::{random_subclouds, WeakLabel};

/// Mean training losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// `(path, mean loss)` per head; empty for the segmenter.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<(PathId, f64)>,
    pub batches: usize,
}

pub(crate) fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(crate) fn non_finite(stage: &str, epoch: usize, batch: usize) -> Error {
    Error::Numeric(format!("{stage} diverged: non-finite loss or gradient at epoch {epoch}, batch {batch}"))
}

struct Item {
    input: SubcloudInput,
    label: WeakLabel,
}

fn seed_grid_items(scenes: &[PreparedScene], config: &PipelineConfig, disp: &KernelDisposition) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    for scene in scenes {
        let members: Vec<&[usize]> = scene.subclouds.iter().map(|s| s.member_indices.as_slice()).collect();
        let inputs = build_inputs(&scene.cloud, &members, config, disp, ClassificationBackbone::NUM_LEVELS)?;
        for (s, input) in inputs.into_iter().enumerate() {
            out.push(Item {
                input,
                label: scene.mask_label(s, config.data.level).clone(),
            });
        }
    }
    Ok(out)
}

fn random_items(scenes: &[PreparedScene], config: &PipelineConfig, disp: &KernelDisposition, epoch: usize) -> Result<Vec<Item>> {
    let mut rng = epoch_rng(config.seed, epoch, 0x5eed);
    let mut out = Vec::new();
    for scene in scenes {
        let count = match config.data.scene_subclouds {
            0 => scene.subclouds.len(),
            n => n,
        };
        let samples = random_subclouds(&scene.cloud, config.data.radius, count, &scene.scene_label, &mut rng)?;
        let members: Vec<&[usize]> = samples.iter().map(|s| s.member_indices.as_slice()).collect();
        let inputs = build_inputs(&scene.cloud, &members, config, disp, ClassificationBackbone::NUM_LEVELS)?;
        out.extend(inputs.into_iter().map(|input| Item {
            input,
            label: scene.scene_label.clone(),
        }));
    }
    Ok(out)
}

/// Train the multi-path classifier on weak labels. Subcloud mode uses the
/// seed-grid subclouds with their own labels; scene mode redraws random
/// subclouds carrying the scene label every epoch. `on_epoch` sees each
/// epoch's log as soon as it is complete.
pub fn train_classifier(
    scenes: &[PreparedScene],
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(MprmModel, Vec<EpochLog>)> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("classifier training without scenes"));
    }
    let mut model = MprmModel::new(&config.geometry, &config.mprm, config.num_classes, config.seed)?;
    let disp = config.geometry.disposition()?;
    let stage = &config.classifier;
    let mut sgd = Sgd::new(&model.store, stage.optim.momentum);
    let fixed = match config.data.level {
        LabelLevel::Subcloud => Some(seed_grid_items(scenes, config, &disp)?),
        LabelLevel::Scene => None,
    };
    let mut logs = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let drawn;
        let items = match &fixed {
            Some(items) => items,
            None => {
                drawn = random_items(scenes, config, &disp, epoch)?;
                &drawn
            }
        };
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch, 0x0de5));
        let sizes: Vec<usize> = order.iter().map(|&i| items[i].input.len()).collect();
        let lr = stage.optim.learning_rate(epoch);
        let batches = stack_batches(&sizes, stage.batch_points);
        let mut total = 0.0;
        let mut heads = vec![0.0; PathId::HEADS.len()];
        for (b, range) in batches.iter().enumerate() {
            let chosen: Vec<&Item> = order[range.clone()].iter().map(|&i| &items[i]).collect();
            let inputs: Vec<&SubcloudInput> = chosen.iter().map(|it| &it.input).collect();
            let labels: Vec<WeakLabel> = chosen.iter().map(|it| it.label.clone()).collect();
            let mut tape = Tape::new();
            let (pyr, x) = stack_inputs(&mut tape, &inputs)?;
            let dropout_seed = config.seed ^ ((epoch as u64) << 32) ^ b as u64;
            let outputs = model.forward(&mut tape, &pyr, x, &PathId::HEADS, Some(dropout_seed))?;
            let (loss, parts) = model.loss(&mut tape, &outputs, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite("classifier", epoch, b));
            }
            tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&tape);
            if !model.store.grads_finite() {
                return Err(non_finite("classifier", epoch, b));
            }
            sgd.step(&mut model.store, lr)?;
            total += value;
            for (h, (_, v)) in heads.iter_mut().zip(&parts) {
                *h += v;
            }
        }
        let n = batches.len().max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            loss: total / n,
            heads: PathId::HEADS.iter().zip(&heads).map(|(&p, &h)| (p, h / n)).collect(),
            batches: batches.len(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}
