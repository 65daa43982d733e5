//! Multi-label evaluation: label-based mean accuracy and instance-based
//! accuracy/precision/recall/F1.
//!
//! All accumulation is integer-exact: per-attribute confusion counts, and
//! instance terms bucketed by their (small) integer denominator. Batch
//! order and merge order therefore cannot change any reported digit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::Serialize;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How instance metrics treat samples whose denominator is zero (empty
/// prediction or label set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroDenominator {
    /// Count the sample as contributing 0 to the mean (divide by N).
    #[default]
    CountAsZero,
    /// Average only over samples with a nonzero denominator.
    SkipSample,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricsAccumulator {
    m: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    tn: Vec<u64>,
    fn_: Vec<u64>,
    n_samples: u64,
    /// Numerator totals bucketed by denominator value (index 1..=m).
    acc_num: Vec<u64>,
    prec_num: Vec<u64>,
    rec_num: Vec<u64>,
    acc_zero: u64,
    prec_zero: u64,
    rec_zero: u64,
}

impl MetricsAccumulator {
    pub fn new(num_attributes: usize) -> Self {
        MetricsAccumulator {
            m: num_attributes,
            tp: vec![0; num_attributes],
            fp: vec![0; num_attributes],
            tn: vec![0; num_attributes],
            fn_: vec![0; num_attributes],
            n_samples: 0,
            acc_num: vec![0; num_attributes + 1],
            prec_num: vec![0; num_attributes + 1],
            rec_num: vec![0; num_attributes + 1],
            acc_zero: 0,
            prec_zero: 0,
            rec_zero: 0,
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.m
    }

    pub fn num_samples(&self) -> u64 {
        self.n_samples
    }

    /// One sample of thresholded predictions and 0/1 labels.
    pub fn accumulate(&mut self, pred: &[bool], label: &[bool]) -> Result<()> {
        if pred.len() != self.m || label.len() != self.m {
            return Err(Error::Dimension {
                op: "metrics::accumulate",
                msg: format!("expected {} attributes, got {}/{}", self.m, pred.len(), label.len()),
            });
        }
        let mut inter = 0u64;
        let mut np = 0u64;
        let mut ng = 0u64;
        for j in 0..self.m {
            match (pred[j], label[j]) {
                (true, true) => {
                    self.tp[j] += 1;
                    inter += 1;
                    np += 1;
                    ng += 1;
                }
                (true, false) => {
                    self.fp[j] += 1;
                    np += 1;
                }
                (false, true) => {
                    self.fn_[j] += 1;
                    ng += 1;
                }
                (false, false) => self.tn[j] += 1,
            }
        }
        let union = np + ng - inter;
        if union == 0 {
            self.acc_zero += 1;
        } else {
            self.acc_num[union as usize] += inter;
        }
        if np == 0 {
            self.prec_zero += 1;
        } else {
            self.prec_num[np as usize] += inter;
        }
        if ng == 0 {
            self.rec_zero += 1;
        } else {
            self.rec_num[ng as usize] += inter;
        }
        self.n_samples += 1;
        Ok(())
    }

    /// Batch of probabilities `[B, M]` against 0/1 labels, thresholded at
    /// `threshold` (probability >= threshold is positive).
    pub fn accumulate_probs<S: Scalar>(
        &mut self,
        probs: &Tensor<S>,
        labels: &Tensor<S>,
        threshold: f64,
    ) -> Result<()> {
        if probs.shape != labels.shape || probs.shape.len() != 2 || probs.shape[1] != self.m {
            return Err(Error::ShapeMismatch {
                op: "metrics::accumulate_probs",
                lhs: probs.shape.clone(),
                rhs: labels.shape.clone(),
            });
        }
        let b = probs.shape[0];
        let mut pred = vec![false; self.m];
        let mut lab = vec![false; self.m];
        for i in 0..b {
            for j in 0..self.m {
                pred[j] = probs.data[i * self.m + j].as_f64() >= threshold;
                lab[j] = labels.data[i * self.m + j].as_f64() >= 0.5;
            }
            self.accumulate(&pred, &lab)?;
        }
        Ok(())
    }

    /// Exact merge: identical to having accumulated both streams into one.
    pub fn merge(&mut self, other: &MetricsAccumulator) -> Result<()> {
        if other.m != self.m {
            return Err(Error::Dimension {
                op: "metrics::merge",
                msg: format!("attribute counts differ: {} vs {}", self.m, other.m),
            });
        }
        for j in 0..self.m {
            self.tp[j] += other.tp[j];
            self.fp[j] += other.fp[j];
            self.tn[j] += other.tn[j];
            self.fn_[j] += other.fn_[j];
        }
        for d in 0..=self.m {
            self.acc_num[d] += other.acc_num[d];
            self.prec_num[d] += other.prec_num[d];
            self.rec_num[d] += other.rec_num[d];
        }
        self.n_samples += other.n_samples;
        self.acc_zero += other.acc_zero;
        self.prec_zero += other.prec_zero;
        self.rec_zero += other.rec_zero;
        Ok(())
    }

    /// Label-based mean accuracy: (1/2M) sum_j [TP_j/P_j + TN_j/N_j].
    /// A zero denominator contributes 0 and sets the flag; in strict mode it
    /// is an evaluation error naming the attribute.
    pub fn label_ma(&self, strict: bool) -> Result<(f64, bool)> {
        let mut sum = 0.0;
        let mut degenerate = false;
        for j in 0..self.m {
            let p = self.tp[j] + self.fn_[j];
            let n = self.tn[j] + self.fp[j];
            if p == 0 || n == 0 {
                if strict {
                    return Err(Error::Evaluation(format!(
                        "attribute {j} has no {} examples in the evaluation set",
                        if p == 0 { "positive" } else { "negative" }
                    )));
                }
                degenerate = true;
            }
            if p > 0 {
                sum += self.tp[j] as f64 / p as f64;
            }
            if n > 0 {
                sum += self.tn[j] as f64 / n as f64;
            }
        }
        Ok((sum / (2 * self.m) as f64, degenerate))
    }

    fn instance_mean(&self, nums: &[u64], zero_count: u64, mode: ZeroDenominator) -> f64 {
        let total: f64 = nums
            .iter()
            .enumerate()
            .skip(1)
            .map(|(d, &num)| num as f64 / d as f64)
            .sum();
        let denom = match mode {
            ZeroDenominator::CountAsZero => self.n_samples,
            ZeroDenominator::SkipSample => self.n_samples - zero_count,
        };
        if denom == 0 {
            0.0
        } else {
            total / denom as f64
        }
    }

    pub fn report(&self, strict: bool, mode: ZeroDenominator) -> Result<MetricsReport> {
        if self.n_samples == 0 {
            return Err(Error::Evaluation("no samples accumulated".into()));
        }
        let (ma, degenerate) = self.label_ma(strict)?;
        let acc = self.instance_mean(&self.acc_num, self.acc_zero, mode);
        let prec = self.instance_mean(&self.prec_num, self.prec_zero, mode);
        let recall = self.instance_mean(&self.rec_num, self.rec_zero, mode);
        let f1 = if prec + recall == 0.0 { 0.0 } else { 2.0 * prec * recall / (prec + recall) };
        Ok(MetricsReport { ma, acc, prec, recall, f1, degenerate })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    #[serde(rename = "mA")]
    pub ma: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "Prec")]
    pub prec: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(skip)]
    pub degenerate: bool,
}

impl MetricsReport {
    /// Fixed five-decimal text block.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "mA     {:.5}\nAcc    {:.5}\nPrec   {:.5}\nRecall {:.5}\nF1     {:.5}\n",
            self.ma, self.acc, self.prec, self.recall, self.f1
        );
        if self.degenerate {
            s.push_str("warning: at least one attribute had no positive or no negative examples\n");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}
