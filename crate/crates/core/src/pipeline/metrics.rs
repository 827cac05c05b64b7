use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class intersection and union counts with derived IoU scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// IoU of classes with a nonempty union, `None` otherwise.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub evaluated_points: u64,
}

impl Metrics {
    pub fn new(num_classes: usize) -> Self {
        Metrics {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            iou: vec![None; num_classes],
            ..Default::default()
        }
    }

    /// Add one cloud's predictions; ground truth `-1` is ignored.
    pub fn add(&mut self, predicted: &[i32], truth: &[i32]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::dim("metrics", &[predicted.len()], &[truth.len()]));
        }
        let k = self.intersection.len();
        let check = |c: i32| {
            if c < 0 || c as usize >= k {
                Err(Error::Validation(format!("class {c} outside 0..{k}")))
            } else {
                Ok(c as usize)
            }
        };
        for (&p, &t) in predicted.iter().zip(truth) {
            if t < 0 {
                continue;
            }
            let (p, t) = (check(p)?, check(t)?);
            self.evaluated_points += 1;
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        self.finish();
        Ok(())
    }

    fn finish(&mut self) {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.union.len() {
            self.iou[c] = (self.union[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64);
            if let Some(v) = self.iou[c] {
                sum += v;
                n += 1;
            }
        }
        self.miou = if n > 0 { sum / n as f64 } else { 0.0 };
    }

    pub fn merge(&mut self, other: &Metrics) -> Result<()> {
        if other.union.len() != self.union.len() {
            return Err(Error::dim("metrics merge", &[self.union.len()], &[other.union.len()]));
        }
        for c in 0..self.union.len() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.evaluated_points += other.evaluated_points;
        self.finish();
        Ok(())
    }
}

pub fn evaluate_labels(predicted: &[i32], truth: &[i32], num_classes: usize) -> Result<Metrics> {
    let mut m = Metrics::new(num_classes);
    m.add(predicted, truth)?;
    Ok(m)
}
