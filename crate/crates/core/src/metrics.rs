//! Classification and agreement metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(preds: &[bool], golds: &[bool], positive: bool) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::LengthMismatch {
                left: preds.len(),
                right: golds.len(),
            });
        }
        let mut c = Confusion::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p == positive, g == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn f1(&self) -> Result<f64> {
        if self.tp + self.fp + self.fn_ == 0 {
            return Err(Error::NoPositivesAnywhere);
        }
        Ok(2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64)
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

/// F1 with respect to `positive`.
pub fn f1(preds: &[bool], golds: &[bool], positive: bool) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: golds.len() });
    }
    Confusion::count(preds, golds, positive)?.f1()
}

/// Unweighted mean of per-category positive-class F1.
pub fn macro_f1(categories: &[(&[bool], &[bool])]) -> Result<f64> {
    if categories.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut sum = 0.0;
    for (p, g) in categories {
        sum += f1(p, g, true)?;
    }
    Ok(sum / categories.len() as f64)
}

/// Non-interpolated average precision: precision at the rank of every
/// positive (descending score, ties in input order), averaged over
/// positives.
pub fn average_precision(scores: &[f64], golds: &[bool]) -> Result<f64> {
    if scores.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: golds.len(),
        });
    }
    let positives = golds.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if golds[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub p_o: f64,
    pub p_e: f64,
    pub kappa: f64,
}

/// Cohen's kappa between two raters. Both raters constant on the same
/// category gives kappa 1.
pub fn cohens_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<AgreementStats> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marg: BTreeMap<T, (usize, usize)> = BTreeMap::new();
    for x in a {
        marg.entry(x.clone()).or_default().0 += 1;
    }
    for y in b {
        marg.entry(y.clone()).or_default().1 += 1;
    }
    let p_e: f64 = marg.values().map(|&(ca, cb)| (ca as f64 / n) * (cb as f64 / n)).sum();
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        if p_o == 1.0 {
            1.0
        } else {
            return Err(Error::DegenerateMarginals);
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(AgreementStats { p_o, p_e, kappa })
}
