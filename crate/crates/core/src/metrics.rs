//! Accuracy and ROC-AUC with exact tie handling, plus per-group score
//! averaging for video-style reporting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Binary class of a sample. `Fake` is the positive class everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Result<Label> {
        match idx {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::InvalidLabel { label: other }),
        }
    }
}

/// Hard-decision counts at a fixed threshold plus the two headline metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when only one class is present, where AUC is undefined.
    pub auc: Option<f64>,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[Label], threshold: f64) -> Result<EvalReport> {
        let acc = accuracy(scores, labels, threshold)?;
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (&s, &l) in scores.iter().zip(labels) {
            let predicted_fake = s >= threshold;
            match (predicted_fake, l) {
                (true, Label::Fake) => tp += 1,
                (false, Label::Real) => tn += 1,
                (true, Label::Real) => fp += 1,
                (false, Label::Fake) => fn_ += 1,
            }
        }
        Ok(EvalReport {
            accuracy: acc,
            auc: auc(scores, labels).ok(),
            tp,
            tn,
            fp,
            fn_,
            n_samples: scores.len(),
        })
    }
}

/// Fraction of correct hard decisions; a score at or above the threshold
/// predicts the fake class.
pub fn accuracy(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput { op: "accuracy" });
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == Label::Fake))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Area under the ROC curve, computed as the Mann–Whitney statistic with
/// average ranks for ties: the fraction of (fake, real) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let positives = labels.iter().filter(|&&l| l == Label::Fake).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average rank over each tie group; ranks are 1-based, so a group
    // occupying sorted positions [start, end) gets (start + end + 1) / 2.
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            if labels[idx] == Label::Fake {
                rank_sum_pos += avg_rank;
            }
        }
        start = end;
    }
    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Arithmetic mean of the scores in each group, keyed by group id. Output is
/// ordered by key, so any permutation of the input gives identical output.
pub fn group_average_scores(scores: &[f64], group_ids: &[u64]) -> Result<Vec<(u64, f64)>> {
    if scores.len() != group_ids.len() {
        return Err(Error::shape(
            "group_average_scores",
            format!("{} scores vs {} group ids", scores.len(), group_ids.len()),
        ));
    }
    let mut groups: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (&s, &g) in scores.iter().zip(group_ids) {
        let e = groups.entry(g).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    Ok(groups.into_iter().map(|(g, (sum, n))| (g, sum / n as f64)).collect())
}
