//! Simulated partial annotation.
//!
//! * [`sample_nns`] imitates a non-native speaker: whole mention groups are
//!   dropped until recall reaches a target, then short random false
//!   positives are added until precision reaches a target.
//! * [`sample_ee`] imitates an exploratory expert: documents are visited in
//!   random order and scanned left to right, keeping each span with a fixed
//!   probability, a capped number per document, until a total budget is
//!   spent.
//!
//! Both use `ChaCha8Rng::seed_from_u64(rng_seed)`. NNS draws are, in order:
//! one shuffle of the mention groups (sorted by surface string), then for
//! each false positive a window index (`gen_range`, redrawn while the
//! window is blocked) followed by a class (`gen_range`). EE draws one
//! shuffle of document indices, then one `gen_bool(keep_prob)` per visited
//! gold span in textual order.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Dataset, Document, ObservedTags, Span};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("corpus has no gold spans")]
    NoGoldSpans,
    #[error("recall target {target} removes every span; smallest non-zero recall reachable is {achievable:.4}")]
    RecallUnreachable { target: f64, achievable: f64 },
    #[error(
        "precision target {target} needs more false positives than fit in the corpus; \
         lowest reachable precision is {achievable:.4}"
    )]
    PrecisionUnreachable { target: f64, achievable: f64 },
    #[error("gold and partial corpora differ in shape: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnsConfig {
    pub target_recall: f64,
    pub target_precision: f64,
    pub fp_span_max_len: usize,
    pub rng_seed: u64,
}

impl Default for NnsConfig {
    fn default() -> Self {
        NnsConfig {
            target_recall: 0.5,
            target_precision: 0.9,
            fp_span_max_len: 2,
            rng_seed: 0,
        }
    }
}

impl NnsConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.target_recall > 0.0 && self.target_recall <= 1.0) {
            return Err(SamplerError::Config(format!(
                "target_recall {} outside (0, 1]",
                self.target_recall
            )));
        }
        if !(self.target_precision > 0.0 && self.target_precision <= 1.0) {
            return Err(SamplerError::Config(format!(
                "target_precision {} outside (0, 1]",
                self.target_precision
            )));
        }
        if self.fp_span_max_len == 0 {
            return Err(SamplerError::Config("fp_span_max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EeConfig {
    pub total_budget: usize,
    pub per_doc_cap: usize,
    pub keep_prob: f64,
    pub rng_seed: u64,
}

impl Default for EeConfig {
    fn default() -> Self {
        EeConfig {
            total_budget: 1000,
            per_doc_cap: 10,
            keep_prob: 0.8,
            rng_seed: 0,
        }
    }
}

impl EeConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.total_budget == 0 {
            return Err(SamplerError::Config("total_budget must be at least 1".into()));
        }
        if self.per_doc_cap == 0 {
            return Err(SamplerError::Config("per_doc_cap must be at least 1".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(SamplerError::Config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        Ok(())
    }
}

/// Summary of a partial corpus against its gold source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub gold_spans: usize,
    pub observed_spans: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub recall: f64,
    pub precision: f64,
    /// Observed spans per document, in corpus order.
    pub per_doc_counts: Vec<usize>,
    /// Mean normalized document position of observed spans, in `[0, 1)`.
    pub position_bias: f64,
    /// The same mean over gold spans of documents with at least one
    /// observed span.
    pub gold_position_bias: f64,
    /// Largest share of gold spans removed in one step (NNS), else 0.
    pub recall_granularity: f64,
    /// Precision change caused by the last false positive (NNS), else 0.
    pub precision_granularity: f64,
    /// EE ran out of gold spans before spending its budget.
    pub shortfall: bool,
    pub notes: Vec<String>,
}

/// A gold span located in a corpus: document, sentence (0-based), span.
type Located = (usize, usize, Span);

fn gold_spans(gold: &Dataset) -> Result<Vec<Vec<Vec<Span>>>, SamplerError> {
    gold.gold_sequences()?;
    gold.documents()
        .iter()
        .map(|doc| {
            doc.sentences()
                .iter()
                .map(|s| Ok(s.gold_spans().expect("gold checked above")))
                .collect()
        })
        .collect::<Result<_, CorpusError>>()
        .map_err(SamplerError::from)
}

fn build_partial(gold: &Dataset, spans: &[Vec<Vec<Span>>]) -> Result<Dataset, SamplerError> {
    let mut documents = Vec::with_capacity(gold.documents().len());
    for (doc, doc_spans) in gold.documents().iter().zip(spans) {
        let sentences = doc
            .sentences()
            .iter()
            .zip(doc_spans)
            .map(|(s, sp)| {
                let mut sorted = sp.clone();
                sorted.sort_by_key(|x| x.start);
                s.with_observed(ObservedTags::from_spans(&sorted, s.len())?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        documents.push(Document::new(doc.id(), sentences)?);
    }
    Ok(Dataset::new(gold.tagset().clone(), documents)?)
}

fn empty_like(gold: &Dataset) -> Vec<Vec<Vec<Span>>> {
    gold.documents()
        .iter()
        .map(|d| vec![Vec::new(); d.sentences().len()])
        .collect()
}

/// Non-native-speaker simulation.
pub fn sample_nns(gold: &Dataset, config: &NnsConfig) -> Result<(Dataset, SamplerStats), SamplerError> {
    config.validate()?;
    let all = gold_spans(gold)?;
    let mut groups: BTreeMap<String, Vec<Located>> = BTreeMap::new();
    for (d, doc) in gold.documents().iter().enumerate() {
        for (s, sentence) in doc.sentences().iter().enumerate() {
            for &span in &all[d][s] {
                let surface = sentence.tokens()[span.start - 1..span.end].join(" ");
                groups.entry(surface).or_default().push((d, s, span));
            }
        }
    }
    let total: usize = groups.values().map(Vec::len).sum();
    if total == 0 {
        return Err(SamplerError::NoGoldSpans);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<Vec<Located>> = groups.into_values().collect();
    order.shuffle(&mut rng);

    let mut kept = total;
    let mut removed_groups = 0;
    let mut largest_removed = 0;
    while (kept as f64 / total as f64) > config.target_recall {
        let size = order[removed_groups].len();
        if kept == size {
            return Err(SamplerError::RecallUnreachable {
                target: config.target_recall,
                achievable: size as f64 / total as f64,
            });
        }
        kept -= size;
        largest_removed = largest_removed.max(size);
        removed_groups += 1;
    }

    let mut spans = empty_like(gold);
    let mut blocked: HashSet<(usize, usize, usize)> = HashSet::new();
    for (d, doc) in all.iter().enumerate() {
        for (s, sent) in doc.iter().enumerate() {
            for span in sent {
                for p in span.start..=span.end {
                    blocked.insert((d, s, p));
                }
            }
        }
    }
    for group in &order[removed_groups..] {
        for &(d, s, span) in group {
            spans[d][s].push(span);
        }
    }

    let mut windows: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (d, doc) in gold.documents().iter().enumerate() {
        for (s, sentence) in doc.sentences().iter().enumerate() {
            for start in 1..=sentence.len() {
                for len in 1..=config.fp_span_max_len {
                    let end = start + len - 1;
                    if end > sentence.len() {
                        break;
                    }
                    if (start..=end).all(|p| !blocked.contains(&(d, s, p))) {
                        windows.push((d, s, start, end));
                    }
                }
            }
        }
    }

    let classes = gold.tagset().num_classes();
    let mut false_positives = 0usize;
    let precision = |f: usize| kept as f64 / (kept + f) as f64;
    while precision(false_positives) > config.target_precision {
        let (d, s, start, end) = loop {
            if windows.is_empty() {
                return Err(SamplerError::PrecisionUnreachable {
                    target: config.target_precision,
                    achievable: precision(false_positives),
                });
            }
            let i = rng.gen_range(0..windows.len());
            let (d, s, start, end) = windows[i];
            if (start..=end).any(|p| blocked.contains(&(d, s, p))) {
                windows.swap_remove(i);
                continue;
            }
            windows.swap_remove(i);
            break (d, s, start, end);
        };
        let class = rng.gen_range(0..classes);
        for p in start..=end {
            blocked.insert((d, s, p));
        }
        spans[d][s].push(Span::new(start, end, class));
        false_positives += 1;
    }

    let partial = build_partial(gold, &spans)?;
    let mut stats = sampler_stats(gold, &partial)?;
    stats.recall_granularity = largest_removed as f64 / total as f64;
    stats.precision_granularity = if false_positives > 0 {
        precision(false_positives - 1) - precision(false_positives)
    } else {
        0.0
    };
    stats.notes.push(format!(
        "removed {removed_groups} mention groups; false positives use uniform classes, avoid gold tokens and may abut spans"
    ));
    Ok((partial, stats))
}

/// Exploratory-expert simulation.
pub fn sample_ee(gold: &Dataset, config: &EeConfig) -> Result<(Dataset, SamplerStats), SamplerError> {
    config.validate()?;
    let all = gold_spans(gold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut order: Vec<usize> = (0..gold.documents().len()).collect();
    order.shuffle(&mut rng);

    let mut spans = empty_like(gold);
    let mut total = 0usize;
    'documents: for &d in &order {
        let mut in_doc = 0usize;
        for (s, sent) in all[d].iter().enumerate() {
            for &span in sent {
                if rng.gen_bool(config.keep_prob) {
                    spans[d][s].push(span);
                    in_doc += 1;
                    total += 1;
                    if total == config.total_budget {
                        break 'documents;
                    }
                    if in_doc == config.per_doc_cap {
                        continue 'documents;
                    }
                }
            }
        }
    }

    let partial = build_partial(gold, &spans)?;
    let mut stats = sampler_stats(gold, &partial)?;
    stats.shortfall = total < config.total_budget;
    if stats.shortfall {
        stats
            .notes
            .push(format!("budget {} not reached: kept {total}", config.total_budget));
    }
    Ok((partial, stats))
}

/// Span-level recall and precision of `partial` against `gold`, plus
/// per-document counts and position bias.
pub fn sampler_stats(gold: &Dataset, partial: &Dataset) -> Result<SamplerStats, SamplerError> {
    let all = gold_spans(gold)?;
    if gold.documents().len() != partial.documents().len() {
        return Err(SamplerError::Mismatch(format!(
            "{} vs {} documents",
            gold.documents().len(),
            partial.documents().len()
        )));
    }
    let mut gold_count = 0;
    let mut observed = 0;
    let mut tp = 0;
    let mut per_doc_counts = Vec::new();
    let (mut pos_sum, mut pos_n) = (0.0, 0usize);
    let (mut gold_pos_sum, mut gold_pos_n) = (0.0, 0usize);
    for (d, (gdoc, pdoc)) in gold.documents().iter().zip(partial.documents()).enumerate() {
        if gdoc.sentences().len() != pdoc.sentences().len() {
            return Err(SamplerError::Mismatch(format!("document {:?} sentence count", gdoc.id())));
        }
        let doc_tokens = gdoc.token_count() as f64;
        let mut offset = 0usize;
        let mut in_doc = 0;
        let mut gold_positions = Vec::new();
        for (s, (gs, ps)) in gdoc.sentences().iter().zip(pdoc.sentences()).enumerate() {
            if gs.len() != ps.len() {
                return Err(SamplerError::Mismatch(format!(
                    "document {:?} sentence {} length",
                    gdoc.id(),
                    s + 1
                )));
            }
            let gold_set: HashSet<Span> = all[d][s].iter().copied().collect();
            gold_count += gold_set.len();
            for span in &all[d][s] {
                gold_positions.push((offset + span.start - 1) as f64 / doc_tokens);
            }
            for span in ps.observed().complete_spans() {
                observed += 1;
                in_doc += 1;
                if gold_set.contains(&span) {
                    tp += 1;
                }
                pos_sum += (offset + span.start - 1) as f64 / doc_tokens;
                pos_n += 1;
            }
            offset += gs.len();
        }
        if in_doc > 0 {
            gold_pos_sum += gold_positions.iter().sum::<f64>();
            gold_pos_n += gold_positions.len();
        }
        per_doc_counts.push(in_doc);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SamplerStats {
        gold_spans: gold_count,
        observed_spans: observed,
        true_positives: tp,
        false_positives: observed - tp,
        recall: ratio(tp, gold_count),
        precision: if observed == 0 { 1.0 } else { ratio(tp, observed) },
        per_doc_counts,
        position_bias: if pos_n == 0 { 0.0 } else { pos_sum / pos_n as f64 },
        gold_position_bias: if gold_pos_n == 0 { 0.0 } else { gold_pos_sum / gold_pos_n as f64 },
        recall_granularity: 0.0,
        precision_granularity: 0.0,
        shortfall: false,
        notes: Vec::new(),
    })
}
