use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::batch::stack_batches;
use super::classifier::{epoch_rng, non_finite, EpochLog};
use super::config::PipelineConfig;
use super::dataset::{build_inputs, stack_inputs, PreparedScene, SubcloudInput};
use super::metrics::Metrics;
use super::optim::Sgd;
use crate::error::{Error, Result};
use crate::kpnet::{load_checkpoint, save_checkpoint, SegmentationNet};
use crate::numerics::{softmax_in_place, ParamStore, Tape};

/// Segmentation network with its parameters.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub store: ParamStore,
    pub net: SegmentationNet,
}

impl Segmenter {
    pub fn new(config: &PipelineConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e6);
        let mut store = ParamStore::new();
        let net = SegmentationNet::new(&mut store, &config.geometry, config.segmenter.widths, config.num_classes, &mut rng);
        Segmenter { store, net }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.net.plan.digest(), &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_checkpoint(path, &self.net.plan.digest(), &mut self.store)
    }

    /// Per-point class probabilities of `inputs`, one vector per input.
    fn probabilities(&self, inputs: &[&SubcloudInput]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let (pyr, x) = stack_inputs(&mut tape, inputs)?;
        let logits = self.net.forward(&mut tape, &self.store, &pyr, x)?;
        let k = self.net.num_classes;
        let mut values = tape.value(logits).to_vec();
        for row in values.chunks_mut(k) {
            softmax_in_place(row);
        }
        let mut out = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for input in inputs {
            let end = start + input.len() * k;
            out.push(values[start..end].to_vec());
            start = end;
        }
        Ok(out)
    }
}

struct Item {
    input: SubcloudInput,
    labels: Vec<i64>,
}

/// Train the segmentation network with per-point softmax cross-entropy on
/// the labels of `scenes` (pseudo labels, in the pipeline).
pub fn train_segmenter(
    scenes: &[PreparedScene],
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Segmenter, Vec<EpochLog>)> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("segmenter training without scenes"));
    }
    let mut model = Segmenter::new(config);
    let disp = config.geometry.disposition()?;
    let mut items = Vec::new();
    for scene in scenes {
        let labels = scene.ground_truth()?;
        let members: Vec<&[usize]> = scene.subclouds.iter().map(|s| s.member_indices.as_slice()).collect();
        let inputs = build_inputs(&scene.cloud, &members, config, &disp, SegmentationNet::NUM_LEVELS)?;
        for (input, m) in inputs.into_iter().zip(&members) {
            items.push(Item {
                input,
                labels: m.iter().map(|&i| labels[i] as i64).collect(),
            });
        }
    }
    let stage = &config.segmenter.stage;
    let mut sgd = Sgd::new(&model.store, stage.optim.momentum);
    let mut logs = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch, 0x5e9));
        let sizes: Vec<usize> = order.iter().map(|&i| items[i].input.len()).collect();
        let lr = stage.optim.learning_rate(epoch);
        let batches = stack_batches(&sizes, stage.batch_points);
        let mut total = 0.0;
        for (b, range) in batches.iter().enumerate() {
            let chosen: Vec<&Item> = order[range.clone()].iter().map(|&i| &items[i]).collect();
            let inputs: Vec<&SubcloudInput> = chosen.iter().map(|it| &it.input).collect();
            let labels: Vec<i64> = chosen.iter().flat_map(|it| it.labels.iter().copied()).collect();
            let mut tape = Tape::new();
            let (pyr, x) = stack_inputs(&mut tape, &inputs)?;
            let logits = model.net.forward(&mut tape, &model.store, &pyr, x)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite("segmenter", epoch, b));
            }
            tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&tape);
            if !model.store.grads_finite() {
                return Err(non_finite("segmenter", epoch, b));
            }
            sgd.step(&mut model.store, lr)?;
            total += value;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: total / batches.len().max(1) as f64,
            heads: Vec::new(),
            batches: batches.len(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

/// Predict every point of `scene` by averaging class probabilities over the
/// subclouds covering it.
pub fn predict_scene(model: &Segmenter, scene: &PreparedScene, config: &PipelineConfig) -> Result<Vec<i32>> {
    let disp = config.geometry.disposition()?;
    let k = model.net.num_classes;
    let members: Vec<&[usize]> = scene.subclouds.iter().map(|s| s.member_indices.as_slice()).collect();
    let inputs = build_inputs(&scene.cloud, &members, config, &disp, SegmentationNet::NUM_LEVELS)?;
    let mut sum = vec![0.0; scene.cloud.len() * k];
    let mut hits = vec![0usize; scene.cloud.len()];
    let sizes: Vec<usize> = inputs.iter().map(SubcloudInput::len).collect();
    for range in stack_batches(&sizes, config.segmenter.stage.batch_points) {
        let batch: Vec<&SubcloudInput> = inputs[range.clone()].iter().collect();
        for (probs, m) in model.probabilities(&batch)?.iter().zip(&members[range]) {
            for (row, &p) in probs.chunks(k).zip(m.iter()) {
                hits[p] += 1;
                for (s, v) in sum[p * k..(p + 1) * k].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    if let Some(p) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Contract(format!("point {p} is not covered by any subcloud")));
    }
    Ok(sum
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as i32
        })
        .collect())
}

/// Scene-parallel evaluation against each scene's labels.
pub fn evaluate(model: &Segmenter, scenes: &[PreparedScene], config: &PipelineConfig) -> Result<(Metrics, Vec<(String, Vec<i32>)>)> {
    let per_scene: Vec<(String, Vec<i32>, Metrics)> = scenes
        .par_iter()
        .map(|scene| {
            let pred = predict_scene(model, scene, config)?;
            let mut m = Metrics::new(config.num_classes);
            m.add(&pred, scene.ground_truth()?)?;
            Ok((scene.id.clone(), pred, m))
        })
        .collect::<Result<_>>()?;
    let mut total = Metrics::new(config.num_classes);
    let mut preds = Vec::with_capacity(per_scene.len());
    for (id, pred, m) in per_scene {
        total.merge(&m)?;
        preds.push((id, pred));
    }
    Ok((total, preds))
}
