//! Window encoder that maps tokens to unary potentials.
//!
//! Each position is represented by the concatenated embeddings of the
//! tokens in `[i - w, i + w]` (a shared boundary embedding pads the
//! edges), passed through one `tanh` hidden layer and a linear output layer
//! with one score per tag. The transition matrix of the CRF lives alongside
//! the encoder weights so that one flat parameter vector covers the whole
//! model.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, TagSet};
use crate::lattice::{LatticeError, LatticeGradients, PotentialLattice, TransitionMask};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("invalid scorer configuration: {0}")]
    Config(String),
    #[error("adjoint shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub min_count: usize,
    pub rng_seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            embed_dim: 32,
            window: 1,
            hidden: 64,
            init_scale: 1.0,
            min_count: 1,
            rng_seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(ScorerError::Config("embed_dim and hidden must be at least 1".into()));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(ScorerError::Config("init_scale must be finite and non-negative".into()));
        }
        if self.min_count == 0 {
            return Err(ScorerError::Config("min_count must be at least 1".into()));
        }
        Ok(())
    }

    fn window_width(&self) -> usize {
        2 * self.window + 1
    }
}

/// Word index. Index 0 is the boundary padding symbol and index 1 the
/// unknown word; known words follow in order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    min_count: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    min_count: usize,
    words: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(repr: VocabRepr) -> Self {
        Vocab::from_words(repr.words, repr.min_count)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(vocab: Vocab) -> Self {
        VocabRepr {
            min_count: vocab.min_count,
            words: vocab.words,
        }
    }
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    const RESERVED: usize = 2;

    fn from_words(words: Vec<String>, min_count: usize) -> Vocab {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + Vocab::RESERVED))
            .collect();
        Vocab { words, min_count, index }
    }

    /// Words seen at least `min_count` times in `dataset`.
    pub fn build(dataset: &Dataset, min_count: usize) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for sentence in dataset.sentences() {
            for token in sentence.tokens() {
                let count = counts.entry(token.as_str()).or_insert_with(|| {
                    order.push(token.as_str());
                    0
                });
                *count += 1;
            }
        }
        let words = order
            .into_iter()
            .filter(|w| counts[w] >= min_count)
            .map(str::to_string)
            .collect();
        Vocab::from_words(words, min_count)
    }

    /// Number of embedding rows, including padding and unknown.
    pub fn len(&self) -> usize {
        self.words.len() + Vocab::RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Vocab::UNK)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Offsets of each parameter group inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub embed: usize,
    pub input: usize,
    pub hidden: usize,
    pub tags: usize,
}

impl Layout {
    fn new(config: &ScorerConfig, vocab: usize, tags: usize) -> Layout {
        Layout {
            vocab,
            embed: config.embed_dim,
            input: config.window_width() * config.embed_dim,
            hidden: config.hidden,
            tags,
        }
    }

    pub fn embeddings(&self) -> Range<usize> {
        0..self.vocab * self.embed
    }

    pub fn hidden_weights(&self) -> Range<usize> {
        let start = self.embeddings().end;
        start..start + self.input * self.hidden
    }

    pub fn hidden_bias(&self) -> Range<usize> {
        let start = self.hidden_weights().end;
        start..start + self.hidden
    }

    pub fn output_weights(&self) -> Range<usize> {
        let start = self.hidden_bias().end;
        start..start + self.hidden * self.tags
    }

    pub fn output_bias(&self) -> Range<usize> {
        let start = self.output_weights().end;
        start..start + self.tags
    }

    pub fn transitions(&self) -> Range<usize> {
        let start = self.output_bias().end;
        start..start + self.tags * self.tags
    }

    pub fn total(&self) -> usize {
        self.transitions().end
    }

    /// Named groups, for diagnostics and gradient checks.
    pub fn groups(&self) -> [(&'static str, Range<usize>); 6] {
        [
            ("embeddings", self.embeddings()),
            ("hidden_weights", self.hidden_weights()),
            ("hidden_bias", self.hidden_bias()),
            ("output_weights", self.output_weights()),
            ("output_bias", self.output_bias()),
            ("transitions", self.transitions()),
        ]
    }
}

/// Encoder weights plus CRF transitions, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    config: ScorerConfig,
    tagset: TagSet,
    vocab: Vocab,
    mask: TransitionMask,
    layout: Layout,
    values: Vec<f64>,
}

impl ScorerParams {
    /// Seeded initialization: weights uniform in `±init_scale/sqrt(fan_in)`
    /// (fan-in 1 for embeddings), biases and transitions zero.
    pub fn new(config: ScorerConfig, tagset: TagSet, vocab: Vocab) -> Result<ScorerParams, ScorerError> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len(), tagset.len());
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let mut fill = |range: Range<usize>, bound: f64| {
            for v in &mut values[range] {
                *v = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
            }
        };
        fill(layout.embeddings(), config.init_scale);
        fill(layout.hidden_weights(), config.init_scale / (layout.input as f64).sqrt());
        fill(layout.output_weights(), config.init_scale / (layout.hidden as f64).sqrt());
        let mask = TransitionMask::biluo(&tagset);
        Ok(ScorerParams {
            config,
            tagset,
            vocab,
            mask,
            layout,
            values,
        })
    }

    /// Builds the vocabulary from `dataset` and initializes.
    pub fn for_dataset(config: ScorerConfig, dataset: &Dataset) -> Result<ScorerParams, ScorerError> {
        let vocab = Vocab::build(dataset, config.min_count);
        ScorerParams::new(config, dataset.tagset().clone(), vocab)
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.config
    }

    pub fn tagset(&self) -> &TagSet {
        &self.tagset
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn mask(&self) -> &TransitionMask {
        &self.mask
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat parameters. Masked transition entries
    /// should be left at zero.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn view(&self, range: Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.values[range]).expect("layout matches")
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.view(self.layout.embeddings(), self.layout.vocab, self.layout.embed)
    }

    pub fn hidden_weights(&self) -> ArrayView2<'_, f64> {
        self.view(self.layout.hidden_weights(), self.layout.input, self.layout.hidden)
    }

    pub fn hidden_bias(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.layout.hidden_bias()])
    }

    pub fn output_weights(&self) -> ArrayView2<'_, f64> {
        self.view(self.layout.output_weights(), self.layout.hidden, self.layout.tags)
    }

    pub fn output_bias(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.layout.output_bias()])
    }

    pub fn transitions(&self) -> ArrayView2<'_, f64> {
        self.view(self.layout.transitions(), self.layout.tags, self.layout.tags)
    }

    /// Runs the encoder on one sentence and keeps the activations needed
    /// for the backward pass.
    pub fn forward<S: AsRef<str>>(&self, tokens: &[S]) -> Result<ScoredSentence, ScorerError> {
        let n = tokens.len();
        let width = self.config.window_width();
        let embed = self.layout.embed;
        let w = self.config.window as isize;
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t.as_ref())).collect();
        let mut window_ids = Vec::with_capacity(n * width);
        for i in 0..n as isize {
            for offset in -w..=w {
                let j = i + offset;
                window_ids.push(if j < 0 || j >= n as isize { Vocab::PAD } else { ids[j as usize] });
            }
        }
        let emb = self.embeddings();
        let mut inputs = Array2::zeros((n, self.layout.input));
        for i in 0..n {
            for slot in 0..width {
                let id = window_ids[i * width + slot];
                inputs
                    .slice_mut(s![i, slot * embed..(slot + 1) * embed])
                    .assign(&emb.row(id));
            }
        }
        let mut hidden = inputs.dot(&self.hidden_weights());
        hidden += &self.hidden_bias();
        hidden.mapv_inplace(f64::tanh);
        let mut unary = hidden.dot(&self.output_weights());
        unary += &self.output_bias();
        let lattice = PotentialLattice::new(unary, self.transitions().to_owned(), self.mask.clone())?;
        Ok(ScoredSentence {
            lattice,
            window_ids,
            inputs,
            hidden,
        })
    }

    pub fn score_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Result<PotentialLattice, ScorerError> {
        Ok(self.forward(tokens)?.lattice)
    }

    /// Parameter gradient of a scalar loss given its lattice adjoints.
    pub fn score_gradients<S: AsRef<str>>(&self, tokens: &[S], adjoints: &LatticeGradients) -> Result<Vec<f64>, ScorerError> {
        let scored = self.forward(tokens)?;
        let mut grads = vec![0.0; self.layout.total()];
        scored.backward(self, adjoints)?.add_to(self, &mut grads);
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScorerError> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            classes: self.tagset.classes().to_vec(),
            vocab: self.vocab.clone(),
            values: self.values.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| checkpoint_error(path, e))?;
        fs::write(path, text).map_err(|e| checkpoint_error(path, e))
    }

    pub fn load(path: &Path) -> Result<ScorerParams, ScorerError> {
        let text = fs::read_to_string(path).map_err(|e| checkpoint_error(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| checkpoint_error(path, e))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(checkpoint_error(
                path,
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        let tagset = TagSet::new(&file.classes).map_err(|e| checkpoint_error(path, e))?;
        let mut params = ScorerParams::new(file.config, tagset, file.vocab)?;
        if file.values.len() != params.values.len() {
            return Err(checkpoint_error(
                path,
                format!("expected {} parameters, found {}", params.values.len(), file.values.len()),
            ));
        }
        params.values = file.values;
        Ok(params)
    }
}

const MODEL_FORMAT: &str = "eer-ner-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ScorerConfig,
    classes: Vec<String>,
    vocab: Vocab,
    values: Vec<f64>,
}

fn checkpoint_error(path: &Path, reason: impl ToString) -> ScorerError {
    ScorerError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Encoder activations of one sentence.
#[derive(Debug, Clone)]
pub struct ScoredSentence {
    pub lattice: PotentialLattice,
    window_ids: Vec<usize>,
    inputs: Array2<f64>,
    hidden: Array2<f64>,
}

/// Gradient contribution of one sentence: every non-embedding parameter in
/// layout order, plus the gradient of each window input row.
#[derive(Debug, Clone)]
pub struct SentenceGradient {
    dense: Vec<f64>,
    window_ids: Vec<usize>,
    d_inputs: Array2<f64>,
}

impl SentenceGradient {
    /// Adds this contribution into a full-length gradient vector.
    pub fn add_to(&self, params: &ScorerParams, grads: &mut [f64]) {
        let layout = params.layout;
        let offset = layout.embeddings().end;
        for (g, d) in grads[offset..].iter_mut().zip(&self.dense) {
            *g += d;
        }
        let embed = layout.embed;
        let width = params.config.window_width();
        for (i, row) in self.d_inputs.outer_iter().enumerate() {
            for slot in 0..width {
                let id = self.window_ids[i * width + slot];
                let target = &mut grads[id * embed..(id + 1) * embed];
                for (g, d) in target.iter_mut().zip(row.slice(s![slot * embed..(slot + 1) * embed])) {
                    *g += d;
                }
            }
        }
    }
}

impl ScoredSentence {
    pub fn backward(&self, params: &ScorerParams, adjoints: &LatticeGradients) -> Result<SentenceGradient, ScorerError> {
        let layout = params.layout;
        let n = self.lattice.len();
        let k = layout.tags;
        if adjoints.d_unary.dim() != (n, k) {
            return Err(ScorerError::Shape {
                expected: (n, k),
                got: adjoints.d_unary.dim(),
            });
        }
        if adjoints.d_transition.dim() != (k, k) {
            return Err(ScorerError::Shape {
                expected: (k, k),
                got: adjoints.d_transition.dim(),
            });
        }
        let offset = layout.embeddings().end;
        let mut dense = vec![0.0; layout.total() - offset];
        let local = |range: Range<usize>| range.start - offset..range.end - offset;
        let d_unary = &adjoints.d_unary;

        let d_out_w = self.hidden.t().dot(d_unary);
        copy_into(&mut dense[local(layout.output_weights())], d_out_w.iter());
        copy_into(&mut dense[local(layout.output_bias())], d_unary.sum_axis(ndarray::Axis(0)).iter());

        let mut d_pre = d_unary.dot(&params.output_weights().t());
        d_pre.zip_mut_with(&self.hidden, |d, h| *d *= 1.0 - h * h);
        let d_hidden_w = self.inputs.t().dot(&d_pre);
        copy_into(&mut dense[local(layout.hidden_weights())], d_hidden_w.iter());
        copy_into(&mut dense[local(layout.hidden_bias())], d_pre.sum_axis(ndarray::Axis(0)).iter());

        {
            let range = local(layout.transitions());
            let mut d_trans = ArrayViewMut2::from_shape((k, k), &mut dense[range]).expect("layout matches");
            for ((from, to), g) in d_trans.indexed_iter_mut() {
                *g = if params.mask.allowed(from, to) {
                    adjoints.d_transition[[from, to]]
                } else {
                    0.0
                };
            }
        }

        let d_inputs = d_pre.dot(&params.hidden_weights().t());
        Ok(SentenceGradient {
            dense,
            window_ids: self.window_ids.clone(),
            d_inputs,
        })
    }
}

fn copy_into<'a>(target: &mut [f64], source: impl Iterator<Item = &'a f64>) {
    for (t, s) in target.iter_mut().zip(source) {
        *t = *s;
    }
}
