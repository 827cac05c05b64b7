//! Self-attention paths over a per-subcloud feature map `A [N×C]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kpnet::Linear;
use crate::numerics::{Init, ParamId, ParamStore, Tape, Var};

/// Projections of a point-attention path. `scale` is the learnable residual
/// weight (starts at exactly zero); the point-wise path has none.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub proj_d: Linear,
    pub proj_out: Linear,
    pub scale: Option<ParamId>,
    pub channels: usize,
    pub reduced: usize,
}

impl AttentionState {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, reduced: usize, scaled: bool, rng: &mut R) -> Self {
        let reduced = reduced.max(1);
        AttentionState {
            proj_b: Linear::new(store, &format!("{name}.b"), channels, reduced, true, rng),
            proj_c: Linear::new(store, &format!("{name}.c"), channels, reduced, true, rng),
            proj_d: Linear::new(store, &format!("{name}.d"), channels, reduced, true, rng),
            proj_out: Linear::new(store, &format!("{name}.out"), reduced, channels, true, rng),
            scale: scaled.then(|| store.add(format!("{name}.scale"), vec![1, 1], Init::Zeros, rng)),
            channels,
            reduced,
        }
    }

    /// Projected aggregate `F' = softmax_rows(B·Cᵀ)·D·W_out`: row `j` mixes
    /// sources `i` with weights normalized over `i`.
    fn aggregate(&self, tape: &mut Tape, store: &ParamStore, a: Var) -> Result<Var> {
        let (n, c) = tape.dims(a);
        if n == 0 {
            return Err(Error::EmptyInput("attention over zero points"));
        }
        if c != self.channels {
            return Err(Error::dim("attention", tape.shape(a), &[n, self.channels]));
        }
        let b = self.proj_b.forward(tape, store, a)?;
        let cm = self.proj_c.forward(tape, store, a)?;
        let d = self.proj_d.forward(tape, store, a)?;
        let ct = tape.transpose(cm)?;
        let energy = tape.matmul(b, ct)?;
        let e = tape.softmax_rows(energy)?;
        let f = tape.matmul(e, d)?;
        self.proj_out.forward(tape, store, f)
    }
}

/// `out = α·F' + A`.
pub fn spatial_attention_forward(tape: &mut Tape, store: &ParamStore, a: Var, state: &AttentionState) -> Result<Var> {
    let alpha = state
        .scale
        .ok_or_else(|| Error::Contract("spatial attention requires a scale parameter".into()))?;
    let f = state.aggregate(tape, store, a)?;
    let alpha = tape.param(store, alpha);
    let scaled = tape.mul_scalar(f, alpha)?;
    tape.add(scaled, a)
}

/// `[F' ‖ A]`, width `2C`.
pub fn pointwise_attention_forward(tape: &mut Tape, store: &ParamStore, a: Var, state: &AttentionState) -> Result<Var> {
    let f = state.aggregate(tape, store, a)?;
    tape.concat_cols(f, a)
}

/// Channel attention has no projections, only its residual scale β.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub scale: ParamId,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        ChannelAttention {
            scale: store.add(format!("{name}.scale"), vec![1, 1], Init::Zeros, rng),
        }
    }
}

/// `out = β·A·Bᵀ + A` with `B = softmax_rows(AᵀA)`: channel `j` of every
/// point mixes channels `i` with weights normalized over `i`.
pub fn channel_attention_forward(tape: &mut Tape, store: &ParamStore, a: Var, state: &ChannelAttention) -> Result<Var> {
    let (n, _) = tape.dims(a);
    if n == 0 {
        return Err(Error::EmptyInput("attention over zero points"));
    }
    let at = tape.transpose(a)?;
    let gram = tape.matmul(at, a)?;
    let b = tape.softmax_rows(gram)?;
    let bt = tape.transpose(b)?;
    let mixed = tape.matmul(a, bt)?;
    let beta = tape.param(store, state.scale);
    let scaled = tape.mul_scalar(mixed, beta)?;
    tape.add(scaled, a)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Explicit-loop evaluations used as test references.

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    /// `x [n×cin] · w [cin×cout] + b`.
    pub fn linear(x: &[f64], n: usize, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * cout];
        for p in 0..n {
            for o in 0..cout {
                let mut s = b[o];
                for i in 0..cin {
                    s += x[p * cin + i] * w[i * cout + o];
                }
                out[p * cout + o] = s;
            }
        }
        out
    }

    /// Aggregate `Σ_i e_ji D_i` followed by the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn point_aggregate(
        a: &[f64],
        n: usize,
        c: usize,
        c1: usize,
        (wb, bb): (&[f64], &[f64]),
        (wc, bc): (&[f64], &[f64]),
        (wd, bd): (&[f64], &[f64]),
        (wo, bo): (&[f64], &[f64]),
    ) -> Vec<f64> {
        let bm = linear(a, n, c, wb, bb, c1);
        let cm = linear(a, n, c, wc, bc, c1);
        let dm = linear(a, n, c, wd, bd, c1);
        let mut f = vec![0.0; n * c1];
        for j in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|i| (0..c1).map(|t| cm[i * c1 + t] * bm[j * c1 + t]).sum())
                .collect();
            let e = softmax(&logits);
            for i in 0..n {
                for t in 0..c1 {
                    f[j * c1 + t] += e[i] * dm[i * c1 + t];
                }
            }
        }
        linear(&f, n, c1, wo, bo, c)
    }

    /// `β Σ_i b_ji A_{p,i} + A_{p,j}` with `b_ji = softmax_i(A_i · A_j)` over
    /// channel columns.
    pub fn channel(a: &[f64], n: usize, c: usize, beta: f64) -> Vec<f64> {
        let col = |i: usize| (0..n).map(move |p| a[p * c + i]);
        let mut b = vec![0.0; c * c];
        for j in 0..c {
            let logits: Vec<f64> = (0..c).map(|i| col(i).zip(col(j)).map(|(x, y)| x * y).sum()).collect();
            let row = softmax(&logits);
            b[j * c..j * c + c].copy_from_slice(&row);
        }
        let mut out = a.to_vec();
        for p in 0..n {
            for j in 0..c {
                let mix: f64 = (0..c).map(|i| b[j * c + i] * a[p * c + i]).sum();
                out[p * c + j] += beta * mix;
            }
        }
        out
    }
}
