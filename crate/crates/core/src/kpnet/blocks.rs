use std::sync::Arc;

use rand::Rng;

use crate::cloudstore::PoolingMap;
use crate::error::{Error, Result};
use crate::numerics::{Init, KernelCorrelation, ParamId, ParamStore, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.1;

/// Point-wise linear layer (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        Self::with_init(store, name, cin, cout, bias, Init::KaimingUniform { fan_in: cin }, rng)
    }

    pub fn with_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), vec![cin, cout], init, rng);
        let bias = bias.then(|| store.add(format!("{name}.b"), vec![1, cout], Init::Zeros, rng));
        Linear { weight, bias, cin, cout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Rigid kernel-point convolution with bias.
#[derive(Clone, Debug)]
pub struct KpConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl KpConvLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.w"), vec![k, cin, cout], Init::KaimingUniform { fan_in: k * cin }, rng);
        let bias = store.add(format!("{name}.b"), vec![1, cout], Init::Zeros, rng);
        KpConvLayer { weight, bias, cin, cout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, corr: &Arc<KernelCorrelation>) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.kernel_conv(x, w, corr.clone())?;
        let b = tape.param(store, self.bias);
        tape.add_bias(y, b)
    }
}

/// KPConv followed by leaky-ReLU.
#[derive(Clone, Debug)]
pub struct SimpleBlock {
    pub conv: KpConvLayer,
}

impl SimpleBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        SimpleBlock {
            conv: KpConvLayer::new(store, &format!("{name}.conv"), k, cin, cout, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, corr: &Arc<KernelCorrelation>) -> Result<Var> {
        let y = self.conv.forward(tape, store, x, corr)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

/// Geometry a bottleneck block needs for one forward pass.
pub struct BlockGeometry<'a> {
    /// Convolution correlation; for a strided block its queries are the
    /// coarse points.
    pub conv: &'a Arc<KernelCorrelation>,
    /// Pooling map from fine to coarse points, required when strided.
    pub pool: Option<&'a PoolingMap>,
}

/// ResNet bottleneck: 1×1 reduce → KPConv → 1×1 expand, plus a shortcut
/// (max-pooled when strided, projected when widths differ).
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: Linear,
    pub conv: KpConvLayer,
    pub expand: Linear,
    pub shortcut: Option<Linear>,
    pub strided: bool,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        strided: bool,
        rng: &mut R,
    ) -> Self {
        let mid = (cout / 4).max(1);
        Bottleneck {
            reduce: Linear::new(store, &format!("{name}.reduce"), cin, mid, true, rng),
            conv: KpConvLayer::new(store, &format!("{name}.conv"), k, mid, mid, rng),
            expand: Linear::new(store, &format!("{name}.expand"), mid, cout, true, rng),
            shortcut: (cin != cout).then(|| Linear::new(store, &format!("{name}.shortcut"), cin, cout, false, rng)),
            strided,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, geom: &BlockGeometry<'_>) -> Result<Var> {
        let h = self.reduce.forward(tape, store, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv.forward(tape, store, h, geom.conv)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.expand.forward(tape, store, h)?;
        let mut sc = x;
        if self.strided {
            let pool = geom
                .pool
                .ok_or_else(|| Error::Contract("strided block without a precomputed coarse cloud".into()))?;
            sc = tape.segment_max(sc, pool)?;
        }
        if let Some(proj) = &self.shortcut {
            sc = proj.forward(tape, store, sc)?;
        }
        let y = tape.add(h, sc)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}
