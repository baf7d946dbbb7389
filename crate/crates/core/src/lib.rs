//! Training named entity taggers from partial, high-precision/low-recall
//! annotations.
//!
//! A linear-chain CRF over BILUO tags is trained with the marginal
//! likelihood of the observed tags plus a hinge penalty that keeps the
//! model's expected entity-token ratio inside a target band. The crate
//! covers the data model and CoNLL-style I/O, two annotation simulators,
//! exact lattice inference with hand-written gradients, a small trainable
//! window encoder, the training loop, evaluation utilities, and synthetic
//! benchmark drivers.
//!
//! ```
//! use eer_ner::corpus::{spans_to_tags, tags_to_spans, Span, TagSet};
//!
//! let tagset = TagSet::new(&["PER", "ORG"]).unwrap();
//! let tags = spans_to_tags(&[Span::new(1, 2, 0)], 3).unwrap();
//! let names: Vec<&str> = tags.iter().map(|&t| tagset.name(t)).collect();
//! assert_eq!(names, ["B-PER", "L-PER", "O"]);
//! assert_eq!(tags_to_spans(&tags).unwrap(), vec![Span::new(1, 2, 0)]);
//! ```

pub mod conll;
pub mod corpus;
pub mod eval;
pub mod lattice;
pub mod objectives;
pub mod preprocess;
pub mod samplers;
pub mod scorer;
pub mod synthetic;
pub mod trainer;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Conll(#[from] conll::ConllError),
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error(transparent)]
    Sampler(#[from] samplers::SamplerError),
    #[error(transparent)]
    Scorer(#[from] scorer::ScorerError),
    #[error(transparent)]
    Objective(#[from] objectives::ObjectiveError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synthetic(#[from] synthetic::SyntheticError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
