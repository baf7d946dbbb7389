//! Span scoring, decoding, `O`-bias tuning and bootstrap significance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tags_to_spans, CorpusError, Dataset, Span, Tag};
use crate::lattice::LatticeError;
use crate::scorer::{ScorerError, ScorerParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predicted} predicted sequences for {gold} gold sequences")]
    Count { predicted: usize, gold: usize },
    #[error("sequence {index}: predicted length {predicted}, gold length {gold}")]
    Length { index: usize, predicted: usize, gold: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Span counts; the scores derive from them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SpanCounts {
    pub fn add(&mut self, other: SpanCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn sentence_counts(predicted: &[Tag], gold: &[Tag]) -> Result<SpanCounts, EvalError> {
    let pred: Vec<Span> = tags_to_spans(predicted)?;
    let gold: Vec<Span> = tags_to_spans(gold)?;
    // both lists are sorted by start and non-overlapping
    let tp = pred.iter().filter(|p| gold.binary_search_by_key(&p.start, |g| g.start).is_ok_and(|i| gold[i] == **p)).count();
    Ok(SpanCounts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    })
}

/// Exact-match span counts summed over aligned sequences.
pub fn span_counts<P, G>(predicted: &[P], gold: &[G]) -> Result<SpanCounts, EvalError>
where
    P: AsRef<[Tag]>,
    G: AsRef<[Tag]>,
{
    if predicted.len() != gold.len() {
        return Err(EvalError::Count {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let mut total = SpanCounts::default();
    for (index, (p, g)) in predicted.iter().zip(gold).enumerate() {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.len() != g.len() {
            return Err(EvalError::Length {
                index,
                predicted: p.len(),
                gold: g.len(),
            });
        }
        total.add(sentence_counts(p, g)?);
    }
    Ok(total)
}

/// Micro-averaged exact-match span precision, recall and F1.
pub fn span_prf<P, G>(predicted: &[P], gold: &[G]) -> Result<Prf, EvalError>
where
    P: AsRef<[Tag]>,
    G: AsRef<[Tag]>,
{
    Ok(span_counts(predicted, gold)?.prf())
}

/// Share of positions where predicted and gold tags agree.
pub fn token_accuracy<P, G>(predicted: &[P], gold: &[G]) -> Result<f64, EvalError>
where
    P: AsRef<[Tag]>,
    G: AsRef<[Tag]>,
{
    if predicted.len() != gold.len() {
        return Err(EvalError::Count {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let (mut right, mut total) = (0usize, 0usize);
    for (index, (p, g)) in predicted.iter().zip(gold).enumerate() {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p.len() != g.len() {
            return Err(EvalError::Length {
                index,
                predicted: p.len(),
                gold: g.len(),
            });
        }
        right += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += p.len();
    }
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(right as f64 / total as f64)
}

/// Viterbi tags for every sentence of `dataset`, with `o_bias` subtracted
/// from every `O` score.
pub fn decode(params: &ScorerParams, dataset: &Dataset, o_bias: f64) -> Result<Vec<Vec<Tag>>, EvalError> {
    let sentences: Vec<_> = dataset.sentences().collect();
    sentences
        .par_iter()
        .map(|s| {
            let lattice = params.score_sentence(s.tokens())?;
            Ok(lattice.viterbi(o_bias)?.0)
        })
        .collect()
}

/// Expected entity-token ratio of the model over a corpus.
pub fn predicted_entity_ratio(params: &ScorerParams, dataset: &Dataset) -> Result<f64, EvalError> {
    let sentences: Vec<_> = dataset.sentences().collect();
    if sentences.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let expected: Vec<f64> = sentences
        .par_iter()
        .map(|s| Ok(params.score_sentence(s.tokens())?.expected_entity_count()?))
        .collect::<Result<_, EvalError>>()?;
    Ok(expected.iter().sum::<f64>() / dataset.token_count() as f64)
}

/// `0, 0.25, ..., 5`.
pub fn default_o_bias_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.25).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OBiasSearch {
    pub best: f64,
    pub best_f1: f64,
    /// `(b_O, dev scores, number of O tags decoded)` per grid point.
    pub grid: Vec<(f64, Prf, usize)>,
}

/// Decodes the dev set at every grid value and keeps the one with the best
/// span F1, preferring the smaller bias on ties.
pub fn tune_o_bias(params: &ScorerParams, dev: &Dataset, grid: &[f64]) -> Result<OBiasSearch, EvalError> {
    if grid.is_empty() || !grid.contains(&0.0) {
        return Err(EvalError::Config("o-bias grid must be non-empty and contain 0".into()));
    }
    if grid.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(EvalError::Config("o-bias grid values must be finite and non-negative".into()));
    }
    let gold = dev.gold_sequences()?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut results = Vec::with_capacity(sorted.len());
    for &b in &sorted {
        let predicted = decode(params, dev, b)?;
        let o_count = predicted.iter().flatten().filter(|t| t.is_outside()).count();
        results.push((b, span_prf(&predicted, &gold)?, o_count));
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.1.f1 > results[best].1.f1 {
            best = i;
        }
    }
    Ok(OBiasSearch {
        best: results[best].0,
        best_f1: results[best].1.f1,
        grid: results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 10_000,
            confidence: 0.99,
            rng_seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iterations == 0 {
            return Err(EvalError::Config("bootstrap needs at least one iteration".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(EvalError::Config(format!("confidence {} outside (0, 1)", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `F1_A - F1_B` on the full corpus.
    pub observed_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
    pub iterations: usize,
}

/// Per-document span counts. `documents[d][s]` is the tag sequence of
/// sentence `s` in document `d`.
pub fn document_counts<P, G>(predicted: &[Vec<P>], gold: &[Vec<G>]) -> Result<Vec<SpanCounts>, EvalError>
where
    P: AsRef<[Tag]>,
    G: AsRef<[Tag]>,
{
    if predicted.len() != gold.len() {
        return Err(EvalError::Count {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    predicted.iter().zip(gold).map(|(p, g)| span_counts(p, g)).collect()
}

/// Splits corpus-ordered sequences into documents following `dataset`.
pub fn group_by_document<T: Clone>(dataset: &Dataset, sequences: &[T]) -> Result<Vec<Vec<T>>, EvalError> {
    if sequences.len() != dataset.sentence_count() {
        return Err(EvalError::Count {
            predicted: sequences.len(),
            gold: dataset.sentence_count(),
        });
    }
    let mut out = Vec::with_capacity(dataset.documents().len());
    let mut offset = 0;
    for doc in dataset.documents() {
        let n = doc.sentences().len();
        out.push(sequences[offset..offset + n].to_vec());
        offset += n;
    }
    Ok(out)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of `F1_A - F1_B`, resampling documents with
/// replacement.
///
/// Resample `i` draws `D` document indices with `gen_range(0..D)` from
/// `ChaCha8Rng::seed_from_u64(rng_seed)` switched to stream `i`, so
/// resamples are independent of thread scheduling. F1 is computed from
/// counts summed over the drawn documents.
pub fn bootstrap_f1_diff(a: &[SpanCounts], b: &[SpanCounts], config: &BootstrapConfig) -> Result<BootstrapResult, EvalError> {
    config.validate()?;
    if a.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if a.len() != b.len() {
        return Err(EvalError::Count {
            predicted: a.len(),
            gold: b.len(),
        });
    }
    let total = |counts: &[SpanCounts]| {
        let mut t = SpanCounts::default();
        counts.iter().for_each(|c| t.add(*c));
        t
    };
    let observed_diff = total(a).prf().f1 - total(b).prf().f1;
    let d = a.len();
    let mut diffs: Vec<f64> = (0..config.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
            rng.set_stream(i as u64);
            let (mut ta, mut tb) = (SpanCounts::default(), SpanCounts::default());
            for _ in 0..d {
                let j = rng.gen_range(0..d);
                ta.add(a[j]);
                tb.add(b[j]);
            }
            ta.prf().f1 - tb.prf().f1
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let alpha = 1.0 - config.confidence;
    let ci_low = percentile(&diffs, alpha / 2.0);
    let ci_high = percentile(&diffs, 1.0 - alpha / 2.0);
    Ok(BootstrapResult {
        observed_diff,
        ci_low,
        ci_high,
        significant: ci_low > 0.0 || ci_high < 0.0,
        iterations: config.iterations,
    })
}
