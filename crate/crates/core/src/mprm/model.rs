use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    channel_attention_forward, pointwise_attention_forward, spatial_attention_forward, AttentionState, ChannelAttention,
};
use super::pcam::{compute_pcam, PathId, ScoreMap};
use crate::error::{Error, Result};
use crate::kpnet::{load_checkpoint, save_checkpoint, ClassificationBackbone, GeometryConfig, LayerPlan, Linear, Pyramid};
use crate::numerics::{ParamStore, Tape, Var};
use crate::weaksup::WeakLabel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MprmConfig {
    /// Channel widths of the three backbone levels; the last is the width of
    /// the shared feature map.
    pub widths: [usize; 3],
    /// Attention projections reduce the width by this factor.
    pub attention_reduction: usize,
    pub dropout: f64,
}

impl Default for MprmConfig {
    fn default() -> Self {
        MprmConfig {
            widths: [64, 128, 256],
            attention_reduction: 4,
            dropout: 0.5,
        }
    }
}

/// One head's output for a batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub path: PathId,
    /// Path features before dropout, one row per coarse point.
    pub feats: Var,
    /// `[B × classes]`, one row per subcloud.
    pub logits: Var,
}

/// Shared backbone with the four classification heads.
#[derive(Clone, Debug)]
pub struct MprmModel {
    pub store: ParamStore,
    pub geometry: GeometryConfig,
    pub config: MprmConfig,
    pub backbone: ClassificationBackbone,
    pub spatial: AttentionState,
    pub channel: ChannelAttention,
    pub pointwise: AttentionState,
    /// Bias-free 1×1 classifiers in head order.
    pub classifiers: [Linear; 4],
    pub num_classes: usize,
    pub plan: LayerPlan,
}

impl MprmModel {
    pub fn new(geometry: &GeometryConfig, config: &MprmConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Validation("at least one class is required".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Validation(format!("dropout rate {} outside [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = ClassificationBackbone::new(&mut store, geometry, config.widths, &mut rng);
        let c = backbone.out_width();
        let c1 = (c / config.attention_reduction.max(1)).max(1);
        let spatial = AttentionState::new(&mut store, "head.spatial", c, c1, true, &mut rng);
        let channel = ChannelAttention::new(&mut store, "head.channel", &mut rng);
        let pointwise = AttentionState::new(&mut store, "head.pointwise", c, c1, false, &mut rng);
        let classifiers = PathId::HEADS.map(|p| {
            let width = if p == PathId::Pointwise { 2 * c } else { c };
            Linear::new(&mut store, &format!("head.{p}.classifier"), width, num_classes, false, &mut rng)
        });
        let mut plan = backbone.plan.clone();
        plan.model = "mprm".into();
        plan.notes.push(format!("classes={num_classes} feature_width={c} attention_width={c1} dropout={}", config.dropout));
        plan.notes.push("heads: plain, spatial(scale), channel(scale), pointwise(concat 2C)".into());
        Ok(MprmModel {
            store,
            geometry: geometry.clone(),
            config: config.clone(),
            backbone,
            spatial,
            channel,
            pointwise,
            classifiers,
            num_classes,
            plan,
        })
    }

    fn check_paths(paths: &[PathId]) -> Result<()> {
        if paths.is_empty() || paths.contains(&PathId::Fused) {
            return Err(Error::Validation("heads must be a non-empty subset of the four paths".into()));
        }
        Ok(())
    }

    /// Apply `path` to the shared feature map, one subcloud at a time so
    /// attention never mixes subclouds.
    pub fn path_features(&self, tape: &mut Tape, feats: Var, lengths: &[usize], path: PathId) -> Result<Var> {
        if path == PathId::Plain {
            return Ok(feats);
        }
        let mut parts = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            let a = tape.rows(feats, start, start + n)?;
            start += n;
            parts.push(match path {
                PathId::Spatial => spatial_attention_forward(tape, &self.store, a, &self.spatial)?,
                PathId::Channel => channel_attention_forward(tape, &self.store, a, &self.channel)?,
                PathId::Pointwise => pointwise_attention_forward(tape, &self.store, a, &self.pointwise)?,
                PathId::Plain | PathId::Fused => unreachable!("handled above"),
            });
        }
        tape.concat_rows(&parts)
    }

    /// Forward the batch through the backbone and the requested heads.
    /// `dropout_seed` of `None` runs in evaluation mode; otherwise each head
    /// draws its own mask from a generator derived from the seed and the head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pyr: &Pyramid,
        x: Var,
        paths: &[PathId],
        dropout_seed: Option<u64>,
    ) -> Result<Vec<HeadOutput>> {
        Self::check_paths(paths)?;
        let feats = self.backbone.forward(tape, &self.store, pyr, x)?;
        let lengths = &pyr.levels[ClassificationBackbone::NUM_LEVELS - 1].lengths;
        if lengths.contains(&0) {
            return Err(Error::EmptyInput("subcloud without coarse points"));
        }
        let mut out = Vec::with_capacity(paths.len());
        for &path in paths {
            let head = path.head_index().expect("checked above");
            let pf = self.path_features(tape, feats, lengths, path)?;
            let dropped = match dropout_seed {
                Some(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(head as u64));
                    tape.dropout(pf, self.config.dropout, true, &mut rng)?
                }
                None => pf,
            };
            let scores = self.classifiers[head].forward(tape, &self.store, dropped)?;
            let mut rows = Vec::with_capacity(lengths.len());
            let mut start = 0;
            for &n in lengths {
                let s = tape.rows(scores, start, start + n)?;
                start += n;
                rows.push(tape.global_average_pool(s)?);
            }
            let logits = tape.concat_rows(&rows)?;
            out.push(HeadOutput { path, feats: pf, logits });
        }
        Ok(out)
    }

    /// Sum of per-head sigmoid cross-entropies, with each head's value.
    pub fn loss(&self, tape: &mut Tape, heads: &[HeadOutput], labels: &[WeakLabel]) -> Result<(Var, Vec<(PathId, f64)>)> {
        let targets: Vec<f64> = labels.iter().flat_map(WeakLabel::targets).collect();
        let mut total: Option<Var> = None;
        let mut parts = Vec::with_capacity(heads.len());
        for h in heads {
            let l = tape.sigmoid_bce(h.logits, &targets)?;
            parts.push((h.path, tape.scalar(l)));
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok((total.ok_or(Error::EmptyInput("loss over zero heads"))?, parts))
    }

    /// Evaluation-mode score maps at the coarse level: `[subcloud][path]`,
    /// each masked by that subcloud's weak label.
    pub fn pcams(&self, pyr: &Pyramid, x: Var, tape: &mut Tape, labels: &[WeakLabel], paths: &[PathId]) -> Result<Vec<Vec<ScoreMap>>> {
        let level = ClassificationBackbone::NUM_LEVELS - 1;
        let lengths = pyr.levels[level].lengths.clone();
        if labels.len() != lengths.len() {
            return Err(Error::dim("pcams", &[lengths.len()], &[labels.len()]));
        }
        let heads = self.forward(tape, pyr, x, paths, None)?;
        let mut out: Vec<Vec<ScoreMap>> = vec![Vec::with_capacity(paths.len()); lengths.len()];
        for h in &heads {
            let w = tape.param(&self.store, self.classifiers[h.path.head_index().expect("head")].weight);
            let mut start = 0;
            for (s, &n) in lengths.iter().enumerate() {
                let f = tape.rows(h.feats, start, start + n)?;
                start += n;
                out[s].push(compute_pcam(tape, f, w, &labels[s], h.path, level)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.plan.digest(), &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_checkpoint(path, &self.plan.digest(), &mut self.store)
    }
}
