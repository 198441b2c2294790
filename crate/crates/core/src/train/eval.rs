use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EuclideanTransform;
use crate::model::EqMotion;
use crate::numerics::Tensor;
use crate::simulate::LabeledSample;

/// Largest category count for which the label-permutation search runs.
pub const MAX_PERMUTED_CATEGORIES: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Displacement {
    pub ade: f64,
    pub fde: f64,
    /// Mean over agents of the distance at each future step.
    pub per_step: Vec<f64>,
}

/// Displacement errors between `[M, T, n]` motions.
pub fn displacement_errors(pred: &Tensor, gt: &Tensor) -> Result<Displacement> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(Error::dim(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let s = pred.shape();
    let (m, t_len, n) = (s[0], s[1], s[2]);
    if m == 0 || t_len == 0 {
        return Err(Error::dim("motions must have at least one agent and step"));
    }
    let mut per_step = vec![0.0; t_len];
    for a in 0..m {
        for (t, acc) in per_step.iter_mut().enumerate() {
            let at = (a * t_len + t) * n;
            let d2: f64 = (0..n).map(|k| (pred.data()[at + k] - gt.data()[at + k]).powi(2)).sum();
            *acc += d2.sqrt();
        }
    }
    per_step.iter_mut().for_each(|e| *e /= m as f64);
    Ok(Displacement {
        ade: per_step.iter().sum::<f64>() / t_len as f64,
        fde: per_step[t_len - 1],
        per_step,
    })
}

/// Extrapolate the last observed velocity over `future_len` steps.
pub fn constant_velocity(past: &Tensor, future_len: usize) -> Result<Tensor> {
    let s = past.shape();
    if s.len() != 3 || s[1] < 2 {
        return Err(Error::dim(format!("past must be [M, T_p >= 2, n], got {s:?}")));
    }
    let (m, t_p, n) = (s[0], s[1], s[2]);
    let x = past.data();
    let mut out = Tensor::zeros(&[m, future_len, n]);
    for a in 0..m {
        let last = (a * t_p + t_p - 1) * n;
        let prev = last - n;
        for t in 0..future_len {
            for k in 0..n {
                let v = x[last + k] - x[prev + k];
                out.data_mut()[(a * future_len + t) * n + k] = x[last + k] + (t + 1) as f64 * v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub num_heads: usize,
    /// With several heads, each sample is scored by its lowest-ADE head.
    pub ade: f64,
    pub fde: f64,
    pub per_step_errors: Vec<f64>,
    /// Mean over samples of the smallest FDE among the heads.
    pub min_over_heads_fde: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_consistency: Option<f64>,
    /// How `reasoning_accuracy` was matched to the ground-truth labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_scoring: Option<String>,
    /// Ground-truth label assigned to each predicted category.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_permutation: Option<Vec<usize>>,
}

impl EvalReport {
    pub fn with_reasoning(mut self, score: &ReasoningScore) -> Self {
        self.reasoning_accuracy = Some(score.accuracy);
        self.reasoning_consistency = Some(score.consistency);
        self.accuracy_scoring = Some("max over category relabelings".into());
        self.label_permutation = Some(score.permutation.clone());
        self
    }
}

fn check_report(r: &EvalReport) -> Result<()> {
    let mean = r.per_step_errors.iter().sum::<f64>() / r.per_step_errors.len() as f64;
    let last = *r.per_step_errors.last().expect("non-empty");
    if (mean - r.ade).abs() > 1e-12 * mean.abs().max(1.0) || last != r.fde {
        return Err(Error::Numerical("evaluation report is internally inconsistent".into()));
    }
    Ok(())
}

/// Displacement metrics of `model` over `data`.
pub fn evaluate(model: &EqMotion, data: &[LabeledSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::param("evaluation data is empty"));
    }
    let t_f = model.config().future_len;
    let mut per_step = vec![0.0; t_f];
    let mut min_fde = 0.0;
    for s in data {
        let pred = model.predict(&s.past)?;
        let mut best: Option<Displacement> = None;
        let mut fde = f64::INFINITY;
        for head in &pred.heads {
            let d = displacement_errors(head, &s.future)?;
            fde = fde.min(d.fde);
            if best.as_ref().is_none_or(|b| d.ade < b.ade) {
                best = Some(d);
            }
        }
        let best = best.expect("at least one head");
        for (acc, e) in per_step.iter_mut().zip(&best.per_step) {
            *acc += e;
        }
        min_fde += fde;
    }
    let count = data.len() as f64;
    per_step.iter_mut().for_each(|e| *e /= count);
    let report = EvalReport {
        num_samples: data.len(),
        num_heads: model.config().num_heads,
        ade: per_step.iter().sum::<f64>() / t_f as f64,
        fde: per_step[t_f - 1],
        per_step_errors: per_step,
        min_over_heads_fde: min_fde / count,
        reasoning_accuracy: None,
        reasoning_consistency: None,
        accuracy_scoring: None,
        label_permutation: None,
    };
    check_report(&report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReasoningScore {
    pub accuracy: f64,
    pub consistency: f64,
    /// `permutation[k]` is the ground-truth label matched to category `k`.
    pub permutation: Vec<usize>,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                prefix.push(c);
                rec(prefix, used, out);
                prefix.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Best accuracy over relabelings of a `K x K` confusion matrix
/// `counts[predicted][truth]`, and the relabeling that attains it.
pub fn permutation_accuracy(counts: &[Vec<usize>]) -> Result<(f64, Vec<usize>)> {
    let k = counts.len();
    if k == 0 || k > MAX_PERMUTED_CATEGORIES {
        return Err(Error::param(format!(
            "label permutation search supports 1..={MAX_PERMUTED_CATEGORIES} categories, got {k}"
        )));
    }
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::param("no labelled pairs to score"));
    }
    let mut best = (0, (0..k).collect::<Vec<_>>());
    for perm in permutations(k) {
        let hits: usize = perm.iter().enumerate().map(|(p, &t)| counts[p][t]).sum();
        if hits > best.0 {
            best = (hits, perm);
        }
    }
    Ok((best.0 as f64 / total as f64, best.1))
}

/// Interaction-type accuracy against the ground truth, matched over
/// relabelings of the categories, and the fraction of pairs whose predicted
/// category survives `num_transforms` random Euclidean transforms.
pub fn eval_reasoning(
    model: &EqMotion,
    data: &[LabeledSample],
    num_transforms: usize,
    rng: &mut impl Rng,
) -> Result<ReasoningScore> {
    let k = model.config().num_categories;
    if k > MAX_PERMUTED_CATEGORIES {
        return Err(Error::param(format!(
            "reasoning evaluation supports at most {MAX_PERMUTED_CATEGORIES} categories, got {k}"
        )));
    }
    if data.is_empty() {
        return Err(Error::param("evaluation data is empty"));
    }
    let n = model.config().space_dim;
    let mut counts = vec![vec![0usize; k]; k];
    let (mut stable, mut pairs) = (0usize, 0usize);
    for (idx, s) in data.iter().enumerate() {
        let m = s.num_agents();
        if s.true_interactions.len() != m * m {
            return Err(Error::dim(format!("sample {idx}: labels must be {m} x {m}")));
        }
        let base = model.interactions(&s.past)?;
        let transformed = (0..num_transforms)
            .map(|_| {
                let tr = EuclideanTransform::random(n, true, rng)?;
                model.interactions(&tr.apply(&s.past)?)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                let truth = s.label(i, j);
                if truth >= k {
                    return Err(Error::param(format!("sample {idx}: label {truth} outside [0, {k})")));
                }
                let pred = base.category(i, j);
                counts[pred][truth] += 1;
                pairs += 1;
                if transformed.iter().all(|c| c.category(i, j) == pred) {
                    stable += 1;
                }
            }
        }
    }
    let (accuracy, permutation) = permutation_accuracy(&counts)?;
    Ok(ReasoningScore {
        accuracy,
        consistency: stable as f64 / pairs as f64,
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn motion(m: usize, t: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(&[m, t, 2], |idx| f(idx / (t * 2), (idx / 2) % t, idx % 2))
    }

    #[test]
    fn identical_motions_have_zero_error() {
        let x = motion(3, 4, |a, t, k| (a * 7 + t * 3 + k) as f64);
        let d = displacement_errors(&x, &x).unwrap();
        assert_eq!((d.ade, d.fde), (0.0, 0.0));
        assert_eq!(d.per_step, vec![0.0; 4]);
    }

    #[test]
    fn uniform_offset_gives_its_length() {
        let x = motion(3, 4, |a, t, k| (a + t * k) as f64 * 0.1);
        let y = motion(3, 4, |a, t, k| (a + t * k) as f64 * 0.1 + if k == 0 { 3.0 } else { 4.0 });
        let d = displacement_errors(&y, &x).unwrap();
        assert!((d.ade - 5.0).abs() < 1e-12 && (d.fde - 5.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_triple_loop() {
        // Agent 0 is off by (1, 0) then (0, 2); agent 1 by (3, 4) then 0.
        let gt = Tensor::zeros(&[2, 2, 2]);
        let pred = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 2.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let d = displacement_errors(&pred, &gt).unwrap();
        let mut naive = [0.0; 2];
        for (t, slot) in naive.iter_mut().enumerate() {
            for a in 0..2 {
                let mut s = 0.0;
                for k in 0..2 {
                    s += (pred.at(&[a, t, k]) - gt.at(&[a, t, k])).powi(2);
                }
                *slot += s.sqrt() / 2.0;
            }
        }
        assert_eq!(d.per_step, naive);
        assert_eq!(d.per_step, vec![3.0, 1.0]);
        assert_eq!(d.ade, 2.0);
        assert_eq!(d.fde, 1.0);
        assert!(displacement_errors(&pred, &Tensor::zeros(&[2, 3, 2])).is_err());
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let past = motion(1, 3, |_, t, k| (t as f64) * if k == 0 { 1.0 } else { -2.0 });
        let fut = constant_velocity(&past, 2).unwrap();
        assert_eq!(fut.data(), &[3.0, -6.0, 4.0, -8.0]);
    }

    #[test]
    fn permutation_search_finds_relabeling() {
        let counts = vec![vec![1, 9], vec![8, 2]];
        let (acc, perm) = permutation_accuracy(&counts).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert!((acc - 0.85).abs() < 1e-15);
        assert_eq!(permutations(4).len(), 24);
        assert!(permutation_accuracy(&vec![vec![0; 7]; 7]).is_err());
    }
}
