//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use eer_ner::corpus::{spans_to_tags, AnnotatedSentence, Dataset, Document, ObservedTags, Sentence, Span, Tag, TagSet};
use eer_ner::lattice::{PotentialLattice, TransitionMask};
use eer_ner::objectives::{combined_loss, EerConfig};
use eer_ner::scorer::{ScorerConfig, ScorerParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("C{c}")).collect()
}

/// Potentials uniform in `[-2, 2)`, or small integers when `integer` so
/// that equal path scores (and therefore Viterbi ties) are common.
pub fn random_lattice(rng: &mut ChaCha8Rng, n: usize, classes: usize, biluo: bool, integer: bool) -> PotentialLattice {
    let k = 1 + 4 * classes;
    let draw = |rng: &mut ChaCha8Rng| {
        if integer {
            rng.gen_range(-1i32..=1) as f64
        } else {
            rng.gen_range(-2.0..2.0)
        }
    };
    let unary = Array2::from_shape_fn((n, k), |_| draw(rng));
    let transition = Array2::from_shape_fn((k, k), |_| draw(rng));
    let mask = if biluo {
        TransitionMask::biluo(&TagSet::new(&class_names(classes)).unwrap())
    } else {
        TransitionMask::unrestricted(k)
    };
    PotentialLattice::new(unary, transition, mask).unwrap()
}

/// Up to `n` observed positions with arbitrary tags; may be unsatisfiable.
pub fn random_observations(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ObservedTags {
    let mut obs = ObservedTags::new();
    for position in 1..=n {
        if rng.gen_bool(0.35) {
            obs.insert(position, Tag::from_index(rng.gen_range(0..k))).unwrap();
        }
    }
    obs
}

/// Every mask-valid path of a lattice, by depth-first search.
pub fn valid_paths(lattice: &PotentialLattice) -> Vec<Vec<usize>> {
    fn extend(lattice: &PotentialLattice, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let n = lattice.len();
        let mask = lattice.mask();
        if prefix.len() == n {
            if mask.end_allowed(*prefix.last().unwrap()) {
                out.push(prefix.clone());
            }
            return;
        }
        for y in 0..lattice.num_tags() {
            let ok = match prefix.last() {
                None => mask.start_allowed(y),
                Some(&p) => mask.allowed(p, y),
            };
            if ok {
                prefix.push(y);
                extend(lattice, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(lattice, &mut Vec::new(), &mut out);
    out
}

/// Brute-force quantities over an explicit set of weighted paths.
#[derive(Debug, Clone)]
pub struct Enumerated {
    pub log_partition: f64,
    pub marginals: Array2<f64>,
    pub expected_entities: f64,
}

pub fn plain_log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `None` when no valid path agrees with `observed`.
pub fn enumerate(lattice: &PotentialLattice, observed: Option<&ObservedTags>) -> Option<Enumerated> {
    let paths: Vec<Vec<usize>> = valid_paths(lattice)
        .into_iter()
        .filter(|p| observed.is_none_or(|o| o.iter().all(|(pos, t)| p[pos - 1] == t.index())))
        .collect();
    if paths.is_empty() {
        return None;
    }
    let scores: Vec<f64> = paths.iter().map(|p| lattice.path_score(p).unwrap()).collect();
    let log_partition = plain_log_sum_exp(&scores);
    let mut marginals = Array2::zeros((lattice.len(), lattice.num_tags()));
    let mut expected_entities = 0.0;
    for (p, s) in paths.iter().zip(&scores) {
        let w = (s - log_partition).exp();
        for (i, &y) in p.iter().enumerate() {
            marginals[[i, y]] += w;
        }
        expected_entities += w * p.iter().filter(|&&y| y != 0).count() as f64;
    }
    Some(Enumerated {
        log_partition,
        marginals,
        expected_entities,
    })
}

/// The best path under `O`-biased scores; among equal scores the path that
/// is smallest when compared from the last position backwards.
pub fn brute_viterbi(lattice: &PotentialLattice, o_bias: f64) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in valid_paths(lattice) {
        let s = lattice.path_score(&p).unwrap() - o_bias * p.iter().filter(|&&y| y == 0).count() as f64;
        let better = match &best {
            None => true,
            Some((bp, bs)) => s > *bs || (s == *bs && p.iter().rev().lt(bp.iter().rev())),
        };
        if better {
            best = Some((p, s));
        }
    }
    best.unwrap()
}

/// A random grammatical tagging of length `n`.
pub fn random_tags(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Tag> {
    let mut spans = Vec::new();
    let mut i = 1;
    while i <= n {
        if rng.gen_bool(0.4) {
            let len = rng.gen_range(1..=3).min(n - i + 1);
            spans.push(Span::new(i, i + len - 1, rng.gen_range(0..classes)));
            i += len;
        } else {
            i += 1;
        }
    }
    spans_to_tags(&spans, n).unwrap()
}

/// Sentences over a six-word vocabulary with gold tags and a random
/// subset of the entity tags observed.
pub fn random_dataset(rng: &mut ChaCha8Rng, sentences: usize, classes: usize, max_len: usize) -> Dataset {
    let tagset = TagSet::new(&class_names(classes)).unwrap();
    let annotated = (0..sentences)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            let tokens: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..6))).collect();
            let gold = random_tags(rng, n, classes);
            let mut obs = ObservedTags::new();
            for (i, t) in gold.iter().enumerate() {
                if !t.is_outside() && rng.gen_bool(0.5) {
                    obs.insert(i + 1, *t).unwrap();
                }
            }
            AnnotatedSentence::new(Sentence::new(tokens).unwrap(), obs, Some(gold)).unwrap()
        })
        .collect();
    Dataset::new(tagset, vec![Document::new("d0", annotated).unwrap()]).unwrap()
}

/// A tiny scorer with every parameter, transitions included, drawn from
/// `U(-1, 1)`.
pub fn random_model(rng: &mut ChaCha8Rng, dataset: &Dataset) -> ScorerParams {
    let config = ScorerConfig {
        embed_dim: 3,
        window: rng.gen_range(0..=1),
        hidden: 4,
        rng_seed: rng.gen(),
        ..ScorerConfig::default()
    };
    let mut params = ScorerParams::for_dataset(config, dataset).unwrap();
    for v in params.values_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    params
}

/// Combined loss of a batch and its gradient with respect to every model
/// parameter.
pub fn batch_loss(params: &ScorerParams, dataset: &Dataset, config: &EerConfig) -> (f64, Vec<f64>) {
    let sentences: Vec<&AnnotatedSentence> = dataset.sentences().collect();
    let lattices: Vec<PotentialLattice> = sentences.iter().map(|s| params.score_sentence(s.tokens()).unwrap()).collect();
    let observations: Vec<&ObservedTags> = sentences.iter().map(|s| s.observed()).collect();
    let (report, adjoints) = combined_loss(&lattices, &observations, config).unwrap();
    let mut grad = vec![0.0; params.values().len()];
    for (s, a) in sentences.iter().zip(&adjoints) {
        for (g, v) in grad.iter_mut().zip(params.score_gradients(s.tokens(), a).unwrap()) {
            *g += v;
        }
    }
    (report.loss, grad)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences. Entries where both are below `floor` in magnitude are
/// compared against `floor` instead, so that rounding noise on zero
/// gradients does not count as relative error.
pub fn max_relative_fd_error(params: &ScorerParams, dataset: &Dataset, config: &EerConfig, step: f64, floor: f64) -> f64 {
    let (_, grad) = batch_loss(params, dataset, config);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for j in 0..grad.len() {
        let original = probe.values()[j];
        probe.values_mut()[j] = original + step;
        let (plus, _) = batch_loss(&probe, dataset, config);
        probe.values_mut()[j] = original - step;
        let (minus, _) = batch_loss(&probe, dataset, config);
        probe.values_mut()[j] = original;
        let fd = (plus - minus) / (2.0 * step);
        let scale = grad[j].abs().max(fd.abs()).max(floor);
        worst = worst.max((grad[j] - fd).abs() / scale);
    }
    worst
}

/// Compares every lattice quantity with enumeration. Returns a description
/// of the first disagreement.
pub fn lattice_mismatch(lattice: &PotentialLattice, observed: &ObservedTags, o_bias: f64, tol: f64) -> Option<String> {
    let full = enumerate(lattice, None).expect("random lattices always have a valid path");
    let log_z = lattice.log_partition().unwrap();
    if (log_z - full.log_partition).abs() > tol {
        return Some(format!("log_partition {log_z} vs {}", full.log_partition));
    }
    let marginals = lattice.tag_marginals().unwrap();
    for ((idx, m), e) in marginals.indexed_iter().zip(full.marginals.iter()) {
        if (m - e).abs() > tol {
            return Some(format!("marginal {idx:?}: {m} vs {e}"));
        }
    }
    let expected = lattice.expected_entity_count().unwrap();
    if (expected - full.expected_entities).abs() > tol {
        return Some(format!("expected_entity_count {expected} vs {}", full.expected_entities));
    }
    match (enumerate(lattice, Some(observed)), lattice.constrained_log_partition(observed)) {
        (Some(c), Ok(v)) if (v - c.log_partition).abs() <= tol => {}
        (None, Err(_)) => {}
        (c, v) => return Some(format!("constrained_log_partition {v:?} vs {:?}", c.map(|c| c.log_partition))),
    }
    let (path, score) = lattice.viterbi(o_bias).unwrap();
    let (best, best_score) = brute_viterbi(lattice, o_bias);
    let path: Vec<usize> = path.iter().map(|t| t.index()).collect();
    if path != best || (score - best_score).abs() > tol {
        return Some(format!("viterbi {path:?} ({score}) vs {best:?} ({best_score})"));
    }
    None
}

/// Current batch ratio of a model.
pub fn batch_rho_hat(params: &ScorerParams, dataset: &Dataset) -> f64 {
    let lattices: Vec<PotentialLattice> = dataset.sentences().map(|s| params.score_sentence(s.tokens()).unwrap()).collect();
    eer_ner::objectives::batch_entity_ratio(&lattices).unwrap()
}

/// A band placed 0.05 away from `rho_hat`: above it, below it, or around
/// it, so the hinge is smooth under small perturbations.
pub fn band_around(rho_hat: f64, which: usize) -> EerConfig {
    let (rho, gamma) = match which % 3 {
        0 => ((rho_hat - 0.05) / 2.0, (rho_hat - 0.05) / 2.0),
        1 => (rho_hat + 0.05 + 0.01, 0.01),
        _ => (rho_hat, 0.05),
    };
    EerConfig {
        rho: rho.clamp(0.0, 1.0),
        gamma: gamma.max(0.0),
        lambda_u: 10.0,
    }
}
