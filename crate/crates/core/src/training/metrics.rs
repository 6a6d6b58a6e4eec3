use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean cross-entropy over `(node, label)` pairs.
    pub loss: f64,
    pub accuracy: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Loss on the fixed validation probe after this step.
    pub probe_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train: EvalResult,
    pub val: EvalResult,
    pub test: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub convergence_step: usize,
    /// Epoch (1-based) after which the learning rate was lowered.
    pub lr_reduced_after_epoch: Option<usize>,
    pub best_val_epoch: Option<usize>,
}

impl MetricsHistory {
    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Rows of `step,split,loss,accuracy`. Per-step rows carry the training
    /// batch loss (split `batch`) and the probe loss (split `probe`); the
    /// per-epoch rows use the epoch's final step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,loss,accuracy\n");
        let mut ep = self.epochs.iter().peekable();
        let mut end = 0;
        for r in &self.steps {
            s += &format!("{},batch,{},\n", r.step, r.train_loss);
            if let Some(p) = r.probe_loss {
                s += &format!("{},probe,{},\n", r.step, p);
            }
            end = r.step;
            while let Some(e) = ep.peek() {
                if e.steps != end {
                    break;
                }
                for (name, m) in [("train", e.train), ("val", e.val), ("test", e.test)] {
                    s += &format!("{end},{name},{},{}\n", m.loss, m.accuracy);
                }
                ep.next();
            }
        }
        for e in ep {
            for (name, m) in [("train", e.train), ("val", e.val), ("test", e.test)] {
                s += &format!("{},{name},{},{}\n", e.steps.max(end), m.loss, m.accuracy);
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = crate::io::create_write(path)?;
        w.write_all(self.to_csv().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn probe_series(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.probe_loss).collect()
    }
}

/// First step (1-based) from which the trailing moving average of `losses`
/// stays within `tol` (relative) of its final value. The average at step
/// `s` covers the last `min(window, s)` values. A series shorter than the
/// window returns its length.
pub fn convergence_step(losses: &[f64], window: usize, tol: f64) -> usize {
    let n = losses.len();
    if n == 0 || window == 0 || n < window {
        return n;
    }
    let mut ma = Vec::with_capacity(n);
    let mut sum = 0.0;
    for i in 0..n {
        sum += losses[i];
        if i >= window {
            sum -= losses[i - window];
        }
        ma.push(sum / (i + 1).min(window) as f64);
    }
    let fin = ma[n - 1];
    let band = tol * fin.abs();
    let mut s = n;
    for i in (0..n).rev() {
        if (ma[i] - fin).abs() <= band {
            s = i + 1;
        } else {
            break;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_history_converges_at_once() {
        assert_eq!(convergence_step(&[0.7; 50], 20, 0.02), 1);
    }

    #[test]
    fn decreasing_then_flat() {
        let v: Vec<f64> = (0..400).map(|i| if i < 100 { 3.0 - 2.0 * i as f64 / 100.0 } else { 1.0 }).collect();
        let s = convergence_step(&v, 20, 0.02);
        assert!((95..=125).contains(&s), "{s}");
    }

    #[test]
    fn short_history_returns_length() {
        assert_eq!(convergence_step(&[1.0, 0.5, 0.2], 20, 0.02), 3);
        assert_eq!(convergence_step(&[], 20, 0.02), 0);
    }
}
