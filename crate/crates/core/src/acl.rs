//! Adaptive contrastive learning: prototype-scored positive selection from the
//! memory bank and the contrastive loss over the selected sets.
//!
//! For an unlabeled sample with pseudo-label `c`, the candidate positives are
//! the bank entries labeled `c` plus the sample's own teacher embedding (the
//! naive positive). Each candidate's cosine similarity to the class-`c`
//! prototype is scored by a two-component mixture; candidates scoring above
//! `epsilon` become positives and the rest of the bank are negatives. When
//! the naive positive itself does not clear `epsilon`, the anchor is treated
//! as unreliable: the naive positive is the only positive and the whole bank
//! is negative.

use crate::autodiff::Var;
use crate::bank::{MemoryBank, PrototypeTable, UNIT_TOL};
use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, reliability, sample_std, MIN_POINTS, MIN_SPREAD};
use crate::tensor::{cosine, norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateSource {
    NaivePositive,
    Bank(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source: CandidateSource,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AclSelection {
    pub naive_positive: Vec<f64>,
    /// Bank indices selected as positives (empty under fallback).
    pub positive_indices: Vec<usize>,
    /// Bank indices used as negatives.
    pub negative_indices: Vec<usize>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub anchor_reliability: f64,
    pub used_fallback: bool,
}

/// Same-class bank entries plus the naive positive, which comes first.
pub fn build_candidates(bank: &MemoryBank, pseudo_label: usize, naive_positive: &[f64]) -> Result<Vec<Candidate>> {
    let n = norm(naive_positive);
    if !((n - 1.0).abs() <= UNIT_TOL) {
        return Err(Error::NotNormalized(n));
    }
    let mut out = vec![Candidate { source: CandidateSource::NaivePositive, embedding: naive_positive.to_vec() }];
    out.extend(bank.indices_of(pseudo_label).into_iter().map(|i| Candidate {
        source: CandidateSource::Bank(i),
        embedding: bank.get(i).expect("index from bank").embedding.clone(),
    }));
    Ok(out)
}

/// Reliability score of every candidate against the class prototype.
///
/// Sets too small or too tight for a mixture fit score 1.0 across the board.
pub fn score_candidates(candidates: &[Candidate], prototypes: &PrototypeTable, class_id: usize) -> Result<Vec<f64>> {
    let prototype = prototypes.get(class_id).ok_or(Error::PrototypeMissing(class_id))?;
    let distances = candidates.iter().map(|c| cosine(&c.embedding, prototype)).collect::<Result<Vec<f64>>>()?;
    score_distances(&distances)
}

/// Mixture reliability of each distance within its own set.
pub fn score_distances(distances: &[f64]) -> Result<Vec<f64>> {
    if distances.len() < MIN_POINTS || sample_std(distances) < MIN_SPREAD {
        return Ok(vec![1.0; distances.len()]);
    }
    let fit = fit_gmm(distances)?;
    Ok(distances.iter().map(|&d| reliability(&fit, d)).collect())
}

/// Applies the threshold and the low-reliability fallback.
pub fn select(bank: &MemoryBank, candidates: &[Candidate], scores: &[f64], epsilon: f64) -> AclSelection {
    assert_eq!(candidates.len(), scores.len());
    let (naive_idx, naive) = candidates
        .iter()
        .enumerate()
        .find(|(_, c)| c.source == CandidateSource::NaivePositive)
        .expect("candidate set always holds the naive positive");
    let anchor_reliability = scores[naive_idx];
    if anchor_reliability <= epsilon {
        return fallback(bank, &naive.embedding, anchor_reliability);
    }

    let mut positives = Vec::new();
    let mut positive_indices = Vec::new();
    for (c, &s) in candidates.iter().zip(scores) {
        if s > epsilon {
            positives.push(c.embedding.clone());
            if let CandidateSource::Bank(i) = c.source {
                positive_indices.push(i);
            }
        }
    }
    let mut is_positive = vec![false; bank.len()];
    for &i in &positive_indices {
        is_positive[i] = true;
    }
    let negative_indices: Vec<usize> = (0..bank.len()).filter(|&i| !is_positive[i]).collect();
    let negatives = negative_indices.iter().map(|&i| bank.get(i).expect("bank index").embedding.clone()).collect();
    AclSelection {
        naive_positive: naive.embedding.clone(),
        positive_indices,
        negative_indices,
        positives,
        negatives,
        anchor_reliability,
        used_fallback: false,
    }
}

/// Selection for an unreliable anchor: `{f^p}` against the whole bank.
pub fn fallback(bank: &MemoryBank, naive_positive: &[f64], anchor_reliability: f64) -> AclSelection {
    AclSelection {
        naive_positive: naive_positive.to_vec(),
        positive_indices: Vec::new(),
        negative_indices: (0..bank.len()).collect(),
        positives: vec![naive_positive.to_vec()],
        negatives: bank.iter().map(|e| e.embedding.clone()).collect(),
        anchor_reliability,
        used_fallback: true,
    }
}

/// Full selection for one anchor. A class without a prototype has no
/// reliability evidence, so its anchors take the fallback with γ = 0.
pub fn select_for_anchor(
    bank: &MemoryBank,
    prototypes: &PrototypeTable,
    pseudo_label: usize,
    naive_positive: &[f64],
    epsilon: f64,
) -> Result<AclSelection> {
    let candidates = build_candidates(bank, pseudo_label, naive_positive)?;
    match score_candidates(&candidates, prototypes, pseudo_label) {
        Ok(scores) => Ok(select(bank, &candidates, &scores, epsilon)),
        Err(Error::PrototypeMissing(_)) => Ok(fallback(bank, naive_positive, 0.0)),
        Err(e) => Err(e),
    }
}

/// `-log( Σ_pos exp(a·f/τ) / (Σ_pos exp(a·f/τ) + Σ_neg exp(a·f/τ)) )`.
///
/// Positives and negatives enter as constants; only the anchor carries
/// gradient.
pub fn acl_loss<'t>(anchor: Var<'t>, selection: &AclSelection, tau: f64) -> Result<Var<'t>> {
    if selection.positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    assert!(tau > 0.0, "temperature must be positive");
    let tape = anchor.tape();
    let pos = tape.constant(Tensor::from_rows(&selection.positives)?).matmul(anchor)?.scale(1.0 / tau);
    let pos_lse = pos.log_sum_exp()?;
    if selection.negatives.is_empty() {
        return pos_lse.sub(pos_lse);
    }
    let neg = tape.constant(Tensor::from_rows(&selection.negatives)?).matmul(anchor)?.scale(1.0 / tau);
    Var::concat(&[pos, neg])?.log_sum_exp()?.sub(pos_lse)
}
