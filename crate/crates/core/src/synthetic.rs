//! Synthetic tagging tasks with a known deterministic labeling rule, and
//! the experiments run on them.
//!
//! # The task
//!
//! The vocabulary has filler words `f0, f1, ...`, entity words `e{c}_{j}`
//! for each class `c`, a trigger word `TRIG` and an ambiguous word `AMB`.
//! Gold tags follow a rule that a window of one token on each side can
//! express:
//!
//! * a maximal run of class-`c` entity words is one class-`c` span;
//! * `AMB` directly after `TRIG` is a single-token class-0 entity;
//!   anywhere else it is `O`;
//! * everything else is `O`.
//!
//! Sentences are built left to right from segments until a length drawn
//! uniformly from `min_len..=max_len` is reached (the last segment is cut
//! at that length). Each segment is, with probability
//!
//! * `q`: an entity span of `1..=max_span_len` words of a uniform class,
//!   followed by one filler word;
//! * `trigger_prob`: the pair `TRIG AMB`;
//! * otherwise: one filler word, which is `AMB` with probability
//!   `decoy_prob`.
//!
//! Filler words never follow `TRIG`, so the rule is unambiguous. With
//! `mu = (1 + max_span_len) / 2` the mean span length, a segment carries
//! `q * mu + trigger_prob` entity tokens out of `1 + q * mu +
//! trigger_prob`, and `q` is chosen so that this ratio equals
//! `entity_ratio` (sentence truncation moves the empirical ratio slightly).
//!
//! Partial observations reveal each entity token's gold tag independently
//! with probability `reveal_prob`; `O` is never revealed.
//!
//! All draws come from `ChaCha8Rng::seed_from_u64(rng_seed)` in generation
//! order: sentence length, then per segment the segment kind, span length,
//! class and words, then after the whole sentence one reveal draw per
//! entity token.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    entity_token_ratio, spans_to_tags, AnnotatedSentence, CorpusError, Dataset, Document, ObservedTags, Sentence, Span,
    Tag, TagSet,
};
use crate::eval::{self, EvalError, Prf};
use crate::objectives::EerConfig;
use crate::preprocess::{apply_variant, PreprocessVariant};
use crate::samplers::{sample_ee, EeConfig, SamplerError};
use crate::scorer::{ScorerConfig, ScorerParams};
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid synthetic task: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub const TRIGGER: &str = "TRIG";
pub const AMBIGUOUS: &str = "AMB";

const CLASS_NAMES: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskConfig {
    pub classes: usize,
    pub filler_words: usize,
    pub entity_words_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_span_len: usize,
    pub entity_ratio: f64,
    pub trigger_prob: f64,
    pub decoy_prob: f64,
    pub reveal_prob: f64,
    pub sentences_per_document: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            classes: 2,
            filler_words: 200,
            entity_words_per_class: 40,
            min_len: 8,
            max_len: 20,
            max_span_len: 3,
            entity_ratio: 0.2,
            trigger_prob: 0.03,
            decoy_prob: 0.03,
            reveal_prob: 0.3,
            sentences_per_document: 10,
            rng_seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    /// Probability that a segment is an entity span.
    pub fn span_prob(&self) -> f64 {
        let mu = (1 + self.max_span_len) as f64 / 2.0;
        (self.entity_ratio / (1.0 - self.entity_ratio) - self.trigger_prob) / mu
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::Config(m));
        if self.classes == 0 || self.filler_words == 0 || self.entity_words_per_class == 0 {
            return bad("classes, filler_words and entity_words_per_class must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.max_span_len == 0 {
            return bad("max_span_len must be at least 1".into());
        }
        if !(self.reveal_prob > 0.0 && self.reveal_prob <= 1.0) {
            return bad(format!(
                "reveal_prob {} outside (0, 1]; every entity needs a chance to be observed",
                self.reveal_prob
            ));
        }
        for (name, p) in [("trigger_prob", self.trigger_prob), ("decoy_prob", self.decoy_prob)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        let q = self.span_prob();
        if !(self.entity_ratio > 0.0 && self.entity_ratio < 1.0) || !(q > 0.0 && q + self.trigger_prob <= 1.0) {
            return bad(format!(
                "entity_ratio {} is not reachable with trigger_prob {} and max_span_len {}",
                self.entity_ratio, self.trigger_prob, self.max_span_len
            ));
        }
        if self.sentences_per_document == 0 {
            return bad("sentences_per_document must be at least 1".into());
        }
        Ok(())
    }

    pub fn tagset(&self) -> TagSet {
        let names: Vec<String> = (0..self.classes)
            .map(|c| CLASS_NAMES.get(c).map_or_else(|| format!("C{c}"), |s| s.to_string()))
            .collect();
        TagSet::new(&names).expect("distinct non-empty names")
    }
}

/// Gold-annotated and partially annotated copies of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// Gold tags, fully observed.
    pub gold: Dataset,
    /// Gold tags, with only the revealed entity tokens observed.
    pub partial: Dataset,
    /// Empirical entity-token ratio of the sample.
    pub entity_ratio: f64,
}

fn sentence<R: Rng>(config: &SyntheticTaskConfig, rng: &mut R) -> (Vec<String>, Vec<Span>) {
    let target = rng.gen_range(config.min_len..=config.max_len);
    let q = config.span_prob();
    let filler = |rng: &mut R| format!("f{}", rng.gen_range(0..config.filler_words));
    let mut tokens: Vec<String> = Vec::with_capacity(target + config.max_span_len + 1);
    let mut spans = Vec::new();
    while tokens.len() < target {
        let r: f64 = rng.gen();
        if r < q {
            let len = rng.gen_range(1..=config.max_span_len);
            let class = rng.gen_range(0..config.classes);
            let start = tokens.len() + 1;
            for _ in 0..len {
                tokens.push(format!("e{class}_{}", rng.gen_range(0..config.entity_words_per_class)));
            }
            spans.push(Span::new(start, start + len - 1, class));
            tokens.push(filler(rng));
        } else if r < q + config.trigger_prob {
            tokens.push(TRIGGER.to_string());
            tokens.push(AMBIGUOUS.to_string());
            spans.push(Span::new(tokens.len(), tokens.len(), 0));
        } else if rng.gen_bool(config.decoy_prob) {
            tokens.push(AMBIGUOUS.to_string());
        } else {
            tokens.push(filler(rng));
        }
    }
    tokens.truncate(target);
    let spans = spans
        .into_iter()
        .filter(|s| s.start <= target)
        .map(|s| Span::new(s.start, s.end.min(target), s.class))
        .collect();
    (tokens, spans)
}

/// Draws `m` sentences from the task.
pub fn generate_synthetic(config: &SyntheticTaskConfig, m: usize) -> Result<SyntheticData, SyntheticError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let drawn: Vec<(Vec<String>, Vec<Span>)> = (0..m).map(|_| sentence(config, &mut rng)).collect();
    let mut gold_sentences = Vec::with_capacity(m);
    let mut partial_sentences = Vec::with_capacity(m);
    for (tokens, spans) in drawn {
        let n = tokens.len();
        let gold = spans_to_tags(&spans, n)?;
        let mut observed = ObservedTags::new();
        for (i, &tag) in gold.iter().enumerate() {
            if !tag.is_outside() && rng.gen_bool(config.reveal_prob) {
                observed.insert(i + 1, tag)?;
            }
        }
        let s = Sentence::new(tokens)?;
        partial_sentences.push(AnnotatedSentence::new(s.clone(), observed, Some(gold.clone()))?);
        gold_sentences.push(AnnotatedSentence::fully_observed(s, gold)?);
    }
    let group = |sentences: Vec<AnnotatedSentence>| -> Result<Vec<Document>, CorpusError> {
        sentences
            .chunks(config.sentences_per_document)
            .enumerate()
            .map(|(d, chunk)| Document::new(format!("synth{d}"), chunk.to_vec()))
            .collect()
    };
    let tagset = config.tagset();
    let gold = Dataset::new(tagset.clone(), group(gold_sentences)?)?;
    let partial = Dataset::new(tagset, group(partial_sentences)?)?;
    let entity_ratio = entity_token_ratio(&gold)?;
    Ok(SyntheticData {
        gold,
        partial,
        entity_ratio,
    })
}

/// Held-out scores of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub token_accuracy: f64,
    /// Share of sentences tagged exactly right.
    pub sentence_accuracy: f64,
    pub spans: Prf,
    /// Expected entity ratio on the training corpus.
    pub train_rho_hat: f64,
    /// Expected entity ratio on the held-out corpus.
    pub test_rho_hat: f64,
}

pub fn evaluate(params: &ScorerParams, test: &Dataset, train_rho_hat: f64) -> Result<RunMetrics, SyntheticError> {
    let predicted = eval::decode(params, test, 0.0)?;
    let gold = test.gold_sequences()?;
    let exact = predicted.iter().zip(&gold).filter(|(p, g)| p.as_slice() == **g).count();
    Ok(RunMetrics {
        token_accuracy: eval::token_accuracy(&predicted, &gold)?,
        sentence_accuracy: exact as f64 / gold.len() as f64,
        spans: eval::span_prf(&predicted, &gold)?,
        train_rho_hat,
        test_rho_hat: eval::predicted_entity_ratio(params, test)?,
    })
}

/// Default model and optimizer settings for the synthetic tasks.
pub fn default_scorer() -> ScorerConfig {
    ScorerConfig {
        embed_dim: 16,
        window: 1,
        hidden: 32,
        ..ScorerConfig::default()
    }
}

pub fn default_train() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 32,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub task: SyntheticTaskConfig,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
    pub lambda_u: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            task: SyntheticTaskConfig::default(),
            train_sentences: 2000,
            test_sentences: 500,
            scorer: default_scorer(),
            train: default_train(),
            lambda_u: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Empirical entity ratio of the training sample, used as `rho`.
    pub rho_star: f64,
    pub train_sentences: usize,
    /// `rho = rho_star`, `gamma = 0`, `lambda_u > 0`.
    pub eer: RunMetrics,
    /// The same without the ratio loss.
    pub no_ratio: RunMetrics,
    /// Unobserved tokens treated as `O`, no ratio loss.
    pub raw: RunMetrics,
}

/// Train and test samples drawn with independent seeds.
pub fn train_test_split(task: &SyntheticTaskConfig, train: usize, test: usize) -> Result<(SyntheticData, SyntheticData), SyntheticError> {
    let train_data = generate_synthetic(task, train)?;
    let test_task = SyntheticTaskConfig {
        rng_seed: task.rng_seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        ..task.clone()
    };
    Ok((train_data, generate_synthetic(&test_task, test)?))
}

fn train_and_evaluate(
    train_set: &Dataset,
    test: &Dataset,
    scorer: &ScorerConfig,
    config: &TrainConfig,
) -> Result<(ScorerParams, RunMetrics), SyntheticError> {
    let (params, report) = train(train_set, scorer, config, None)?;
    let metrics = evaluate(&params, test, report.final_rho_hat)?;
    Ok((params, metrics))
}

/// Trains on partial observations with the ratio loss, without it, and
/// with unobserved tokens read as `O`, and scores all three on held-out
/// data.
pub fn run_consistency_experiment(config: &ConsistencyConfig) -> Result<ConsistencyReport, SyntheticError> {
    let (data, test) = train_test_split(&config.task, config.train_sentences, config.test_sentences)?;
    let rho_star = data.entity_ratio;
    let with_eer = |eer: EerConfig| TrainConfig {
        eer,
        ..config.train.clone()
    };
    let eer_config = with_eer(EerConfig {
        rho: rho_star,
        gamma: 0.0,
        lambda_u: config.lambda_u,
    });
    let off = with_eer(EerConfig {
        rho: rho_star,
        gamma: 0.0,
        lambda_u: 0.0,
    });
    let (_, eer) = train_and_evaluate(&data.partial, &test.gold, &config.scorer, &eer_config)?;
    let (_, no_ratio) = train_and_evaluate(&data.partial, &test.gold, &config.scorer, &off)?;
    let raw_data = data.partial.unobserved_as_outside();
    let (_, raw) = train_and_evaluate(&raw_data, &test.gold, &config.scorer, &off)?;
    Ok(ConsistencyReport {
        rho_star,
        train_sentences: config.train_sentences,
        eer,
        no_ratio,
        raw,
    })
}

/// The EER run alone at several training-set sizes, for learning curves.
pub fn run_learning_curve(config: &ConsistencyConfig, sizes: &[usize]) -> Result<Vec<(usize, f64, RunMetrics)>, SyntheticError> {
    let mut out = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let (data, test) = train_test_split(&config.task, m, config.test_sentences)?;
        let train_config = TrainConfig {
            eer: EerConfig {
                rho: data.entity_ratio,
                gamma: 0.0,
                lambda_u: config.lambda_u,
            },
            ..config.train.clone()
        };
        let (_, metrics) = train_and_evaluate(&data.partial, &test.gold, &config.scorer, &train_config)?;
        out.push((m, data.entity_ratio, metrics));
    }
    Ok(out)
}

/// A `(rho, gamma)` setting, shown as the band `[rho - gamma, rho + gamma]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSetting {
    pub rho: f64,
    pub gamma: f64,
}

impl BandSetting {
    pub fn from_band(low: f64, high: f64) -> BandSetting {
        BandSetting {
            rho: (low + high) / 2.0,
            gamma: (high - low) / 2.0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.rho + self.gamma
    }

    pub fn lower(&self) -> f64 {
        self.rho - self.gamma
    }
}

/// The six bands compared in the sweep, relative to the true ratio:
/// `[r, r]`, `[r - 0.08, r - 0.08]`, `[r - 0.1, r]`, `[r, r + 0.1]`,
/// `[0, r]`, `[0, r + 0.1]`.
pub fn default_sweep_settings(rho_star: f64) -> Vec<BandSetting> {
    let r = rho_star;
    vec![
        BandSetting::from_band(r, r),
        BandSetting::from_band(r - 0.08, r - 0.08),
        BandSetting { rho: r - 0.05, gamma: 0.05 },
        BandSetting { rho: r + 0.05, gamma: 0.05 },
        BandSetting::from_band(0.0, r),
        BandSetting::from_band(0.0, r + 0.1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub task: SyntheticTaskConfig,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub scorer: ScorerConfig,
    pub train: TrainConfig,
    pub lambda_u: f64,
    /// Empty means [`default_sweep_settings`] around the sample's ratio.
    pub settings: Vec<BandSetting>,
    /// Model and shuffle seeds; the data sample is shared.
    pub seeds: Vec<u64>,
    /// Where the training observations come from.
    pub annotation: SweepAnnotation,
    /// Reduction applied to the training set after annotation.
    pub variant: PreprocessVariant,
}

/// Observation source for sweep training data: the task's own per-token
/// reveals, or exhaustive-then-truncated sampling of the gold spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SweepAnnotation {
    #[default]
    Reveal,
    Ee(EeConfig),
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            task: SyntheticTaskConfig {
                filler_words: 20,
                entity_words_per_class: 10,
                entity_ratio: 0.23,
                sentences_per_document: 30,
                ..SyntheticTaskConfig::default()
            },
            train_sentences: 3000,
            test_sentences: 500,
            scorer: default_scorer(),
            train: default_train(),
            lambda_u: 10.0,
            settings: Vec::new(),
            seeds: vec![0, 1, 2],
            annotation: SweepAnnotation::Ee(EeConfig {
                total_budget: 600,
                ..EeConfig::default()
            }),
            variant: PreprocessVariant::Short,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub rho_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: BandSetting,
    pub cells: Vec<SweepCell>,
    pub mean_f1: f64,
    pub mean_rho_hat: f64,
    /// The band's upper edge lies above the true ratio.
    pub exceeds_rho_star: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rho_star: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band_low,band_high,rho,gamma,seed,f1,precision,recall,rho_hat,exceeds_rho_star\n");
        for row in &self.rows {
            for cell in &row.cells {
                let _ = writeln!(
                    out,
                    "{:.4},{:.4},{:.4},{:.4},{},{:.6},{:.6},{:.6},{:.6},{}",
                    row.setting.lower(),
                    row.setting.upper(),
                    row.setting.rho,
                    row.setting.gamma,
                    cell.seed,
                    cell.f1,
                    cell.precision,
                    cell.recall,
                    cell.rho_hat,
                    row.exceeds_rho_star
                );
            }
        }
        out
    }

    /// Human-readable table of mean scores per band.
    pub fn render(&self) -> String {
        let mut out = format!("rho* = {:.4}\n{:<18} {:>8} {:>8}\n", self.rho_star, "band", "F1", "rho_hat");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "[{:.3}, {:.3}]{} {:>8.4} {:>8.4}",
                row.setting.lower(),
                row.setting.upper(),
                if row.exceeds_rho_star { "*" } else { " " },
                row.mean_f1,
                row.mean_rho_hat
            );
        }
        out
    }
}

/// Trains one model per setting and seed on a shared sample.
pub fn run_rho_gamma_sweep(spec: &SweepSpec) -> Result<SweepTable, SyntheticError> {
    if spec.seeds.is_empty() {
        return Err(SyntheticError::Config("sweep needs at least one seed".into()));
    }
    let (data, test) = train_test_split(&spec.task, spec.train_sentences, spec.test_sentences)?;
    let rho_star = data.entity_ratio;
    let annotated = match &spec.annotation {
        SweepAnnotation::Reveal => data.partial.clone(),
        SweepAnnotation::Ee(ee) => sample_ee(&data.gold, ee)?.0,
    };
    let prepared = apply_variant(&annotated, spec.variant);
    if prepared.empty {
        return Err(SyntheticError::Config("no training document carries an observation".into()));
    }
    let train_set = prepared.dataset;
    let settings = if spec.settings.is_empty() {
        default_sweep_settings(rho_star)
    } else {
        spec.settings.clone()
    };
    let mut rows = Vec::with_capacity(settings.len());
    for setting in settings {
        let mut cells = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let scorer = ScorerConfig {
                rng_seed: seed,
                ..spec.scorer.clone()
            };
            let config = TrainConfig {
                rng_seed: seed,
                eer: EerConfig {
                    rho: setting.rho,
                    gamma: setting.gamma,
                    lambda_u: spec.lambda_u,
                },
                ..spec.train.clone()
            };
            let (_, metrics) = train_and_evaluate(&train_set, &test.gold, &scorer, &config)?;
            cells.push(SweepCell {
                seed,
                f1: metrics.spans.f1,
                precision: metrics.spans.precision,
                recall: metrics.spans.recall,
                rho_hat: metrics.train_rho_hat,
            });
        }
        let n = cells.len() as f64;
        rows.push(SweepRow {
            setting,
            mean_f1: cells.iter().map(|c| c.f1).sum::<f64>() / n,
            mean_rho_hat: cells.iter().map(|c| c.rho_hat).sum::<f64>() / n,
            exceeds_rho_star: setting.upper() > rho_star + 1e-12,
            cells,
        });
    }
    Ok(SweepTable { rho_star, rows })
}

/// Whether every observed tag of `data` agrees with its gold tag.
pub fn observations_match_gold(data: &Dataset) -> bool {
    data.sentences().all(|s| match s.gold() {
        Some(gold) => s.observed().iter().all(|(p, t)| gold[p - 1] == t && t != Tag::O),
        None => false,
    })
}
