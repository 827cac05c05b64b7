use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloudstore::{dist2, Point3};
use crate::error::{Error, Result};

const RELAX_ITERATIONS: usize = 2000;
/// Strength of the pull towards the origin relative to mutual repulsion.
const CENTER_PULL: f64 = 1.8;

/// Kernel-point offsets inside the unit ball, the first one at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelDisposition {
    pub points: Vec<Point3>,
    /// Influence distance in units of the convolution radius.
    pub sigma: f64,
}

impl KernelDisposition {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                best = best.min(dist2(&self.points[i], &self.points[j]).sqrt());
            }
        }
        best
    }

    /// Linear correlation `max(0, 1 − ‖y − x_k‖ / σ)` of a normalized offset
    /// `y` with kernel point `k`.
    #[inline]
    pub fn influence(&self, y: &Point3, k: usize) -> f64 {
        (1.0 - dist2(y, &self.points[k]).sqrt() / self.sigma).max(0.0)
    }
}

fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Origin plus `k − 1` points relaxed under pairwise `1/d` repulsion and a
/// linear pull towards the center, confined to the unit ball.
pub fn build_kernel_disposition(k: usize, sigma: f64, seed: u64) -> Result<KernelDisposition> {
    if k == 0 {
        return Err(Error::Validation("a kernel needs at least one point".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!("kernel influence {sigma} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point3> = vec![[0.0; 3]];
    while pts.len() < k {
        let p = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
        let n = norm(&p);
        if n <= 1.0 && n > 0.1 {
            pts.push(p);
        }
    }
    for it in 0..RELAX_ITERATIONS {
        let step = 0.02 * (1.0 - it as f64 / RELAX_ITERATIONS as f64) + 1e-4;
        let mut moves = vec![[0.0; 3]; k];
        for i in 1..k {
            let mut f = [0.0; 3];
            for j in 0..k {
                if i == j {
                    continue;
                }
                let d = [0, 1, 2].map(|a| pts[i][a] - pts[j][a]);
                let r = norm(&d).max(1e-6);
                for a in 0..3 {
                    f[a] += d[a] / (r * r * r);
                }
            }
            for a in 0..3 {
                f[a] -= CENTER_PULL * (k as f64) * pts[i][a];
            }
            let mag = norm(&f).max(1e-12);
            let scale = step * mag.min(1.0 / step) / mag;
            moves[i] = f.map(|x| x * scale);
        }
        for i in 1..k {
            for a in 0..3 {
                pts[i][a] += moves[i][a];
            }
            let n = norm(&pts[i]);
            if n > 1.0 {
                pts[i] = pts[i].map(|x| x / n);
            }
        }
    }
    Ok(KernelDisposition { points: pts, sigma })
}
