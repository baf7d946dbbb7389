//! Training losses over a batch of sentence lattices.
//!
//! * `L_p`, the marginal tag loss: mean over sentences of
//!   `log Z - log Z_observed`, the negative log-probability that the model
//!   assigns to the set of taggings agreeing with the observations.
//! * `L_u`, the expected entity ratio loss:
//!   `max(0, |rho - rho_hat| - gamma)` where `rho_hat` is the expected share
//!   of non-`O` tags in the batch.
//! * `L = L_p + lambda_u * L_u`.
//!
//! Every loss returns per-sentence [`LatticeGradients`] which the encoder
//! turns into parameter gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ObservedTags;
use crate::lattice::{Inference, LatticeError, LatticeGradients, PotentialLattice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{lattices} lattices but {observations} observation sets")]
    Mismatch { lattices: usize, observations: usize },
    #[error("sentence {sentence}: observation at position {position} cannot be satisfied")]
    Unsatisfiable { sentence: usize, position: usize },
    #[error("sentence {sentence}: {source}")]
    Lattice { sentence: usize, source: LatticeError },
    #[error("invalid ratio loss configuration: {0}")]
    Config(String),
}

const BAND_TOLERANCE: f64 = 1e-12;

/// Target entity ratio `rho`, margin `gamma` and weight `lambda_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EerConfig {
    pub rho: f64,
    pub gamma: f64,
    pub lambda_u: f64,
}

impl Default for EerConfig {
    fn default() -> Self {
        EerConfig {
            rho: 0.15,
            gamma: 0.05,
            lambda_u: 10.0,
        }
    }
}

impl EerConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ObjectiveError::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.gamma >= 0.0) {
            return Err(ObjectiveError::Config(format!("gamma {} is negative", self.gamma)));
        }
        if !(self.lambda_u >= 0.0) {
            return Err(ObjectiveError::Config(format!("lambda_u {} is negative", self.lambda_u)));
        }
        Ok(())
    }

    fn excess(&self, rho_hat: f64) -> f64 {
        let excess = (self.rho - rho_hat).abs() - self.gamma;
        // rounding noise at the band edge counts as inside
        if excess <= BAND_TOLERANCE {
            0.0
        } else {
            excess
        }
    }

    /// Hinge value for a given ratio estimate.
    pub fn hinge(&self, rho_hat: f64) -> f64 {
        self.excess(rho_hat)
    }

    /// Derivative of the hinge with respect to `rho_hat`; zero on the
    /// closed band `[rho - gamma, rho + gamma]`, including its edges.
    pub fn hinge_slope(&self, rho_hat: f64) -> f64 {
        if self.excess(rho_hat) > 0.0 {
            if rho_hat > self.rho {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub marginal_loss: f64,
    pub ratio_loss: f64,
    pub loss: f64,
    pub rho_hat: f64,
    pub tokens: usize,
    pub expected_entities: f64,
    pub sentences: usize,
}

struct SentenceTerms<'a> {
    inference: Inference<'a>,
    expected: f64,
    marginal_loss: f64,
    marginal_grad: Option<LatticeGradients>,
}

fn sentence_terms<'a>(
    index: usize,
    lattice: &'a PotentialLattice,
    observed: Option<&ObservedTags>,
) -> Result<SentenceTerms<'a>, ObjectiveError> {
    let lattice_err = |source| ObjectiveError::Lattice { sentence: index, source };
    let inference = lattice.inference().map_err(lattice_err)?;
    let expected = inference.expected_entity_count();
    let (marginal_loss, marginal_grad) = match observed {
        Some(observed) if !observed.is_empty() => {
            let restricted = lattice.constrained(observed).map_err(lattice_err)?;
            let constrained = restricted.inference().map_err(|_| {
                match lattice.constrained_log_partition(observed) {
                    Err(LatticeError::Unsatisfiable { position }) => ObjectiveError::Unsatisfiable {
                        sentence: index,
                        position,
                    },
                    Err(other) => lattice_err(other),
                    Ok(_) => unreachable!("restricted lattice already failed"),
                }
            })?;
            let mut grad = inference.log_partition_gradients();
            grad.scaled_add(-1.0, &constrained.log_partition_gradients());
            (inference.log_partition() - constrained.log_partition(), Some(grad))
        }
        _ => (0.0, None),
    };
    Ok(SentenceTerms {
        inference,
        expected,
        marginal_loss,
        marginal_grad,
    })
}

fn check_batch(lattices: &[PotentialLattice], observations: Option<&[&ObservedTags]>) -> Result<(), ObjectiveError> {
    if lattices.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if let Some(obs) = observations {
        if obs.len() != lattices.len() {
            return Err(ObjectiveError::Mismatch {
                lattices: lattices.len(),
                observations: obs.len(),
            });
        }
    }
    Ok(())
}

fn all_terms<'a>(
    lattices: &'a [PotentialLattice],
    observations: Option<&[&ObservedTags]>,
) -> Result<Vec<SentenceTerms<'a>>, ObjectiveError> {
    lattices
        .par_iter()
        .enumerate()
        .map(|(k, lattice)| sentence_terms(k, lattice, observations.map(|o| o[k])))
        .collect()
}

fn zero_grads(lattices: &[PotentialLattice]) -> Vec<LatticeGradients> {
    lattices
        .iter()
        .map(|l| LatticeGradients::zeros(l.len(), l.num_tags()))
        .collect()
}

/// `L_p` and its lattice adjoints, averaged over the batch's sentences.
pub fn marginal_tag_loss(
    lattices: &[PotentialLattice],
    observations: &[&ObservedTags],
) -> Result<(f64, Vec<LatticeGradients>), ObjectiveError> {
    check_batch(lattices, Some(observations))?;
    let terms = all_terms(lattices, Some(observations))?;
    let m = lattices.len() as f64;
    let loss = terms.iter().map(|t| t.marginal_loss).sum::<f64>() / m;
    let grads = marginal_adjoints(lattices, &terms, 1.0 / m);
    Ok((loss, grads))
}

fn marginal_adjoints(lattices: &[PotentialLattice], terms: &[SentenceTerms<'_>], scale: f64) -> Vec<LatticeGradients> {
    let mut grads = zero_grads(lattices);
    for (g, t) in grads.iter_mut().zip(terms) {
        if let Some(mg) = &t.marginal_grad {
            g.scaled_add(scale, mg);
        }
    }
    grads
}

/// Expected share of non-`O` tags over all tokens in the batch.
pub fn batch_entity_ratio(lattices: &[PotentialLattice]) -> Result<f64, ObjectiveError> {
    check_batch(lattices, None)?;
    let expected: Vec<f64> = lattices
        .par_iter()
        .enumerate()
        .map(|(k, l)| {
            l.expected_entity_count()
                .map_err(|source| ObjectiveError::Lattice { sentence: k, source })
        })
        .collect::<Result<_, _>>()?;
    let tokens: usize = lattices.iter().map(|l| l.len()).sum();
    Ok(expected.iter().sum::<f64>() / tokens as f64)
}

struct RatioTerms {
    rho_hat: f64,
    loss: f64,
    expected: f64,
    tokens: usize,
    slope: f64,
}

fn ratio_terms(lattices: &[PotentialLattice], terms: &[SentenceTerms<'_>], config: &EerConfig) -> RatioTerms {
    let expected: f64 = terms.iter().map(|t| t.expected).sum();
    let tokens: usize = lattices.iter().map(|l| l.len()).sum();
    let rho_hat = expected / tokens as f64;
    RatioTerms {
        rho_hat,
        loss: config.hinge(rho_hat),
        expected,
        tokens,
        slope: config.hinge_slope(rho_hat),
    }
}

fn add_ratio_adjoints(grads: &mut [LatticeGradients], terms: &[SentenceTerms<'_>], scale: f64) {
    if scale == 0.0 {
        return;
    }
    let count_grads: Vec<LatticeGradients> = terms
        .par_iter()
        .map(|t| t.inference.entity_count_gradients())
        .collect();
    for (g, cg) in grads.iter_mut().zip(&count_grads) {
        g.scaled_add(scale, cg);
    }
}

/// `L_u` and its lattice adjoints.
pub fn eer_loss(lattices: &[PotentialLattice], config: &EerConfig) -> Result<(f64, Vec<LatticeGradients>), ObjectiveError> {
    config.validate()?;
    check_batch(lattices, None)?;
    let terms = all_terms(lattices, None)?;
    let ratio = ratio_terms(lattices, &terms, config);
    let mut grads = zero_grads(lattices);
    add_ratio_adjoints(&mut grads, &terms, ratio.slope / ratio.tokens as f64);
    Ok((ratio.loss, grads))
}

/// `L = L_p + lambda_u * L_u` with its lattice adjoints.
pub fn combined_loss(
    lattices: &[PotentialLattice],
    observations: &[&ObservedTags],
    config: &EerConfig,
) -> Result<(BatchLossReport, Vec<LatticeGradients>), ObjectiveError> {
    config.validate()?;
    check_batch(lattices, Some(observations))?;
    let terms = all_terms(lattices, Some(observations))?;
    let m = lattices.len() as f64;
    let marginal_loss = terms.iter().map(|t| t.marginal_loss).sum::<f64>() / m;
    let mut grads = marginal_adjoints(lattices, &terms, 1.0 / m);
    let ratio = ratio_terms(lattices, &terms, config);
    if config.lambda_u != 0.0 {
        add_ratio_adjoints(&mut grads, &terms, config.lambda_u * ratio.slope / ratio.tokens as f64);
    }
    let report = BatchLossReport {
        marginal_loss,
        ratio_loss: ratio.loss,
        loss: marginal_loss + config.lambda_u * ratio.loss,
        rho_hat: ratio.rho_hat,
        tokens: ratio.tokens,
        expected_entities: ratio.expected,
        sentences: lattices.len(),
    };
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Tag;
    use crate::lattice::TransitionMask;
    use ndarray::Array2;

    fn uniform(n: usize, k: usize) -> PotentialLattice {
        PotentialLattice::new(Array2::zeros((n, k)), Array2::zeros((k, k)), TransitionMask::unrestricted(k)).unwrap()
    }

    fn wavy(n: usize, seed: usize) -> PotentialLattice {
        let k = 5;
        let unary = Array2::from_shape_fn((n, k), |(i, y)| (((i + seed) * 7 + y * 3) % 11) as f64 * 0.2 - 1.0);
        let trans = Array2::from_shape_fn((k, k), |(a, b)| ((a * 5 + b + seed) % 7) as f64 * 0.15 - 0.3);
        let mask = TransitionMask::biluo(&crate::corpus::TagSet::new(&["X"]).unwrap());
        PotentialLattice::new(unary, trans, mask).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let c = EerConfig {
            rho: 0.15,
            gamma: 0.05,
            lambda_u: 10.0,
        };
        assert_eq!(c.hinge(0.18), 0.0);
        assert!((c.hinge(0.30) - 0.10).abs() < 1e-15);
        let point = EerConfig { gamma: 0.0, ..c };
        assert_eq!(point.hinge(0.15), 0.0);
        assert_eq!(point.hinge_slope(0.15), 0.0);
        assert_eq!(c.hinge_slope(0.20), 0.0);
        assert_eq!(c.hinge_slope(0.05), -1.0);
    }

    #[test]
    fn empty_observations_give_zero_marginal_loss() {
        let lattices = vec![wavy(3, 0), wavy(4, 1)];
        let empty = ObservedTags::new();
        let (loss, grads) = marginal_tag_loss(&lattices, &[&empty, &empty]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.d_unary.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn full_observation_is_sequence_nll() {
        let lattice = wavy(4, 2);
        let tags = [0usize, 1, 3, 4];
        let observed = ObservedTags::from_full(&tags.map(Tag::from_index));
        let (loss, _) = marginal_tag_loss(std::slice::from_ref(&lattice), &[&observed]).unwrap();
        let nll = lattice.log_partition().unwrap() - lattice.path_score(&tags).unwrap();
        assert!((loss - nll).abs() < 1e-10);
    }

    #[test]
    fn ratio_of_uniform_and_all_o_batches() {
        let batch = vec![uniform(3, 5), uniform(5, 5)];
        assert!((batch_entity_ratio(&batch).unwrap() - 0.8).abs() < 1e-12);
        let mut unary = Array2::from_elem((3, 5), crate::lattice::LOG_ZERO);
        unary.column_mut(0).fill(0.0);
        let all_o = PotentialLattice::new(unary, Array2::zeros((5, 5)), TransitionMask::unrestricted(5)).unwrap();
        assert_eq!(batch_entity_ratio(&[all_o]).unwrap(), 0.0);
    }

    #[test]
    fn ratio_loss_inside_band_has_zero_adjoints() {
        let batch = vec![uniform(3, 5)];
        let config = EerConfig {
            rho: 0.8,
            gamma: 0.0,
            lambda_u: 1.0,
        };
        let (loss, grads) = eer_loss(&batch, &config).unwrap();
        assert!(loss < 1e-12);
        assert!(grads[0].d_unary.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_reduces_to_components() {
        let lattices = vec![wavy(3, 0), wavy(5, 3)];
        let mut obs = ObservedTags::new();
        obs.insert(2, Tag::from_index(4)).unwrap();
        let empty = ObservedTags::new();
        let observations = [&obs, &empty];

        let no_ratio = EerConfig {
            lambda_u: 0.0,
            ..Default::default()
        };
        let (report, grads) = combined_loss(&lattices, &observations, &no_ratio).unwrap();
        let (lp, lp_grads) = marginal_tag_loss(&lattices, &observations).unwrap();
        assert_eq!(report.loss, lp);
        assert_eq!(grads, lp_grads);

        let config = EerConfig {
            rho: 0.05,
            gamma: 0.01,
            lambda_u: 3.0,
        };
        let (report, _) = combined_loss(&lattices, &[&empty, &empty], &config).unwrap();
        assert_eq!(report.marginal_loss, 0.0);
        assert!(report.ratio_loss > 0.0);
        assert!((report.loss - 3.0 * report.ratio_loss).abs() < 1e-12);
    }

    #[test]
    fn batch_mismatch_and_empty() {
        assert_eq!(marginal_tag_loss(&[], &[]).unwrap_err(), ObjectiveError::EmptyBatch);
        let l = vec![wavy(2, 0)];
        assert!(matches!(
            marginal_tag_loss(&l, &[]),
            Err(ObjectiveError::Mismatch { .. })
        ));
    }

    #[test]
    fn unsatisfiable_observation_names_sentence() {
        let l = vec![wavy(2, 0), wavy(3, 0)];
        let mut bad = ObservedTags::new();
        bad.insert(3, Tag::from_index(1)).unwrap(); // B at the last position
        let empty = ObservedTags::new();
        match marginal_tag_loss(&l, &[&empty, &bad]) {
            Err(ObjectiveError::Unsatisfiable { sentence, position }) => {
                assert_eq!(sentence, 1);
                assert_eq!(position, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
