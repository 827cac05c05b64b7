use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blocks::{BlockGeometry, Bottleneck, Linear, SimpleBlock, LEAKY_SLOPE};
use super::geometry::{GeometryConfig, Pyramid};
use crate::cloudstore::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    SimpleConv,
    Bottleneck,
    StridedBottleneck,
    /// Nearest upsampling, skip concatenation and a 1×1 layer.
    Decoder,
    /// Point-wise layer.
    Unary,
}

/// One stage of a network: where it runs and what it computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub kind: BlockKind,
    /// Output resolution level.
    pub level: usize,
    pub cell: f64,
    /// Convolution radius, zero for point-wise stages.
    pub radius: f64,
    pub cin: usize,
    pub cout: usize,
}

/// Human-readable and hashable description of a model's layout. Checkpoints
/// store the digest so weights are never loaded into a different layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub model: String,
    pub stages: Vec<StageSpec>,
    pub kernel_points: usize,
    pub kernel_sigma: f64,
    /// Kernel offsets are fixed; deformable offsets are not implemented.
    pub rigid_kernels: bool,
    /// Free-form lines for layers outside the stage list (heads, attention).
    pub notes: Vec<String>,
}

impl LayerPlan {
    pub fn new(model: impl Into<String>, geometry: &GeometryConfig) -> Self {
        LayerPlan {
            model: model.into(),
            stages: Vec::new(),
            kernel_points: geometry.kernel_points,
            kernel_sigma: geometry.kernel_sigma,
            rigid_kernels: true,
            notes: Vec::new(),
        }
    }

    fn push(&mut self, geometry: &GeometryConfig, name: &str, kind: BlockKind, level: usize, cin: usize, cout: usize) {
        let radius = match kind {
            BlockKind::SimpleConv | BlockKind::Bottleneck => geometry.radius(level),
            // strided convolutions gather from the finer level
            BlockKind::StridedBottleneck => geometry.radius(level - 1),
            BlockKind::Decoder | BlockKind::Unary => 0.0,
        };
        self.stages.push(StageSpec {
            name: name.to_string(),
            kind,
            level,
            cell: geometry.cell(level),
            radius,
            cin,
            cout,
        });
    }

    pub fn describe(&self) -> String {
        let mut s = format!(
            "model {}\nkernel points={} sigma={} rigid={}\n",
            self.model, self.kernel_points, self.kernel_sigma, self.rigid_kernels
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<24} {:?} level={} cell={} radius={} {}->{}",
                st.name, st.kind, st.level, st.cell, st.radius, st.cin, st.cout
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "{n}");
        }
        s
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.describe().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_levels(&self) -> usize {
        self.stages.iter().map(|s| s.level + 1).max().unwrap_or(0)
    }
}

fn check_input(tape: &Tape, x: Var, pyr: &Pyramid, levels: usize) -> Result<()> {
    if pyr.num_levels() < levels {
        return Err(Error::Contract(format!("network needs {levels} levels, batch has {}", pyr.num_levels())));
    }
    let (n, c) = tape.dims(x);
    if n != pyr.levels[0].len() || c != FEATURE_DIM {
        return Err(Error::dim("network input", tape.shape(x), &[pyr.levels[0].len(), FEATURE_DIM]));
    }
    Ok(())
}

/// Classification backbone: a simple convolution and five bottlenecks, the
/// second and fourth strided, over three resolution levels.
#[derive(Clone, Debug)]
pub struct ClassificationBackbone {
    pub simple: SimpleBlock,
    pub blocks: Vec<Bottleneck>,
    pub plan: LayerPlan,
}

impl ClassificationBackbone {
    pub const NUM_LEVELS: usize = 3;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, geometry: &GeometryConfig, widths: [usize; 3], rng: &mut R) -> Self {
        let k = geometry.kernel_points;
        let [w0, w1, w2] = widths;
        let mut plan = LayerPlan::new("classification-backbone", geometry);
        plan.push(geometry, "backbone.simple", BlockKind::SimpleConv, 0, FEATURE_DIM, w0);
        let simple = SimpleBlock::new(store, "backbone.simple", k, FEATURE_DIM, w0, rng);
        let layout = [(0, w0, w0, false), (1, w0, w1, true), (1, w1, w1, false), (2, w1, w2, true), (2, w2, w2, false)];
        let mut blocks = Vec::new();
        for (i, &(level, cin, cout, strided)) in layout.iter().enumerate() {
            let name = format!("backbone.block{}", i + 1);
            let kind = if strided { BlockKind::StridedBottleneck } else { BlockKind::Bottleneck };
            plan.push(geometry, &name, kind, level, cin, cout);
            blocks.push(Bottleneck::new(store, &name, k, cin, cout, strided, rng));
        }
        ClassificationBackbone { simple, blocks, plan }
    }

    pub fn out_width(&self) -> usize {
        self.plan.stages.last().map_or(0, |s| s.cout)
    }

    /// Features at the coarsest level, one row per `pyr.levels[2]` point.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pyr: &Pyramid, x: Var) -> Result<Var> {
        check_input(tape, x, pyr, Self::NUM_LEVELS)?;
        let mut h = self.simple.forward(tape, store, x, &pyr.levels[0].conv)?;
        let mut level = 0;
        for block in &self.blocks {
            let geom = if block.strided {
                let t = &pyr.transitions[level];
                level += 1;
                BlockGeometry {
                    conv: &t.down_conv,
                    pool: Some(&*t.pool),
                }
            } else {
                BlockGeometry {
                    conv: &pyr.levels[level].conv,
                    pool: None,
                }
            };
            h = block.forward(tape, store, h, &geom)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    blocks: [Bottleneck; 2],
    stride: Bottleneck,
}

/// U-shaped segmentation network: four encoder stages of two bottlenecks and
/// a strided bottleneck, then a decoder of nearest upsampling with skip
/// concatenation back to the input resolution.
#[derive(Clone, Debug)]
pub struct SegmentationNet {
    simple: SimpleBlock,
    encoder: Vec<EncoderStage>,
    bottom: Bottleneck,
    decoder: Vec<Linear>,
    head_hidden: Linear,
    head_out: Linear,
    pub num_classes: usize,
    pub plan: LayerPlan,
}

impl SegmentationNet {
    pub const NUM_LEVELS: usize = 5;

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        geometry: &GeometryConfig,
        widths: [usize; 5],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel_points;
        let mut plan = LayerPlan::new("segmentation-unet", geometry);
        plan.push(geometry, "seg.simple", BlockKind::SimpleConv, 0, FEATURE_DIM, widths[0]);
        let simple = SimpleBlock::new(store, "seg.simple", k, FEATURE_DIM, widths[0], rng);
        let mut encoder = Vec::new();
        for s in 0..4 {
            let (w, next) = (widths[s], widths[s + 1]);
            let mut mk = |i: usize| {
                let name = format!("seg.enc{s}.block{i}");
                plan.push(geometry, &name, BlockKind::Bottleneck, s, w, w);
                Bottleneck::new(store, &name, k, w, w, false, rng)
            };
            let blocks = [mk(0), mk(1)];
            let name = format!("seg.enc{s}.stride");
            plan.push(geometry, &name, BlockKind::StridedBottleneck, s + 1, w, next);
            let stride = Bottleneck::new(store, &name, k, w, next, true, rng);
            encoder.push(EncoderStage { blocks, stride });
        }
        plan.push(geometry, "seg.bottom", BlockKind::Bottleneck, 4, widths[4], widths[4]);
        let bottom = Bottleneck::new(store, "seg.bottom", k, widths[4], widths[4], false, rng);
        let mut decoder = Vec::new();
        for s in (0..4).rev() {
            let name = format!("seg.dec{s}");
            let cin = widths[s + 1] + widths[s];
            plan.push(geometry, &name, BlockKind::Decoder, s, cin, widths[s]);
            decoder.push(Linear::new(store, &name, cin, widths[s], true, rng));
        }
        plan.push(geometry, "seg.head.hidden", BlockKind::Unary, 0, widths[0], widths[0]);
        plan.push(geometry, "seg.head.out", BlockKind::Unary, 0, widths[0], num_classes);
        let head_hidden = Linear::new(store, "seg.head.hidden", widths[0], widths[0], true, rng);
        let head_out = Linear::new(store, "seg.head.out", widths[0], num_classes, true, rng);
        SegmentationNet {
            simple,
            encoder,
            bottom,
            decoder,
            head_hidden,
            head_out,
            num_classes,
            plan,
        }
    }

    /// Per-point class logits at the input resolution.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pyr: &Pyramid, x: Var) -> Result<Var> {
        check_input(tape, x, pyr, Self::NUM_LEVELS)?;
        let mut h = self.simple.forward(tape, store, x, &pyr.levels[0].conv)?;
        let mut skips = Vec::with_capacity(4);
        for (s, stage) in self.encoder.iter().enumerate() {
            for block in &stage.blocks {
                let geom = BlockGeometry {
                    conv: &pyr.levels[s].conv,
                    pool: None,
                };
                h = block.forward(tape, store, h, &geom)?;
            }
            skips.push(h);
            let t = &pyr.transitions[s];
            let geom = BlockGeometry {
                conv: &t.down_conv,
                pool: Some(&*t.pool),
            };
            h = stage.stride.forward(tape, store, h, &geom)?;
        }
        let geom = BlockGeometry {
            conv: &pyr.levels[4].conv,
            pool: None,
        };
        h = self.bottom.forward(tape, store, h, &geom)?;
        for (layer, s) in self.decoder.iter().zip((0..4).rev()) {
            let up = tape.gather_rows(h, pyr.transitions[s].up.clone())?;
            let cat = tape.concat_cols(up, skips[s])?;
            let y = layer.forward(tape, store, cat)?;
            h = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        let y = self.head_hidden.forward(tape, store, h)?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        self.head_out.forward(tape, store, y)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::cloudstore::Point3;
    use crate::kpnet::geometry::SubcloudGeometry;

    fn batch(sizes: &[usize], levels: usize, seed: u64) -> (Pyramid, GeometryConfig) {
        let config = GeometryConfig {
            first_cell: 0.05,
            ..Default::default()
        };
        let disp = config.disposition().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geoms: Vec<SubcloudGeometry> = sizes
            .iter()
            .map(|&n| {
                let pts: Vec<Point3> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect();
                SubcloudGeometry::build(&pts, &config, &disp, levels).unwrap()
            })
            .collect();
        let refs: Vec<&SubcloudGeometry> = geoms.iter().collect();
        (Pyramid::stack(&refs).unwrap(), config)
    }

    #[test]
    fn backbone_plan_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = ClassificationBackbone::new(&mut store, &GeometryConfig::default(), [64, 128, 256], &mut rng);
        let kinds: Vec<BlockKind> = net.plan.stages.iter().map(|s| s.kind).collect();
        use BlockKind::*;
        assert_eq!(kinds, vec![SimpleConv, Bottleneck, StridedBottleneck, Bottleneck, StridedBottleneck, Bottleneck]);
        assert_eq!(net.out_width(), 256);
        assert_eq!(net.plan.num_levels(), 3);
        let r = &net.plan.stages[0];
        assert!((r.radius - 0.1).abs() < 1e-12);
    }

    #[test]
    fn backbone_forward_backward_is_finite() {
        let (pyr, config) = batch(&[200], 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = ClassificationBackbone::new(&mut store, &config, [16, 32, 64], &mut rng);
        let mut t = Tape::new();
        let x: Vec<f64> = (0..200 * FEATURE_DIM).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = t.constant(vec![200, FEATURE_DIM], x).unwrap();
        let y = net.forward(&mut t, &store, &pyr, x).unwrap();
        assert_eq!(t.dims(y), (pyr.levels[2].len(), 64));
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        store.accumulate(&t);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
        assert!(store.grads_finite());
    }

    #[test]
    fn segmentation_logits_cover_every_input_point() {
        let (pyr, config) = batch(&[150, 90], 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = SegmentationNet::new(&mut store, &config, [8, 8, 16, 16, 32], 5, &mut rng);
        let n = pyr.levels[0].len();
        let mut t = Tape::new();
        let x = t.constant(vec![n, FEATURE_DIM], vec![0.5; n * FEATURE_DIM]).unwrap();
        let y = net.forward(&mut t, &store, &pyr, x).unwrap();
        assert_eq!(t.dims(y), (240, 5));
        let loss = t.softmax_cross_entropy(y, &vec![1; 240]).unwrap();
        t.backward(loss).unwrap();
        store.accumulate(&t);
        assert!(store.grads_finite());
        assert!(net.plan.stages.iter().filter(|s| s.kind == BlockKind::StridedBottleneck).count() == 4);
    }

    #[test]
    fn too_few_levels_is_a_contract_error() {
        let (pyr, config) = batch(&[60], 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = ClassificationBackbone::new(&mut store, &config, [8, 8, 8], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(vec![60, FEATURE_DIM], vec![0.0; 60 * FEATURE_DIM]).unwrap();
        assert!(matches!(net.forward(&mut t, &store, &pyr, x), Err(Error::Contract(_))));
    }

    #[test]
    fn digest_tracks_layout() {
        let g = GeometryConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = ClassificationBackbone::new(&mut ParamStore::new(), &g, [16, 32, 64], &mut rng).plan;
        let b = ClassificationBackbone::new(&mut ParamStore::new(), &g, [16, 32, 64], &mut rng).plan;
        let c = ClassificationBackbone::new(&mut ParamStore::new(), &g, [16, 32, 128], &mut rng).plan;
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest_hex().len(), 64);
    }

}
