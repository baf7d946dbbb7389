//! Corpus reductions for training on low-recall annotation.
//!
//! * `all` keeps everything.
//! * `short` drops documents without a single observation.
//! * `shortest` additionally drops, inside each remaining document, every
//!   sentence after the last sentence that carries an observation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Document};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessVariant {
    #[default]
    All,
    Short,
    Shortest,
}

impl PreprocessVariant {
    pub const ALL: [PreprocessVariant; 3] = [PreprocessVariant::All, PreprocessVariant::Short, PreprocessVariant::Shortest];

    pub fn as_str(self) -> &'static str {
        match self {
            PreprocessVariant::All => "all",
            PreprocessVariant::Short => "short",
            PreprocessVariant::Shortest => "shortest",
        }
    }
}

impl fmt::Display for PreprocessVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownVariant(pub String);

impl fmt::Display for UnknownVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown preprocessing variant {:?} (expected all, short or shortest)", self.0)
    }
}

impl std::error::Error for UnknownVariant {}

impl FromStr for PreprocessVariant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(PreprocessVariant::All),
            "short" => Ok(PreprocessVariant::Short),
            "shortest" => Ok(PreprocessVariant::Shortest),
            other => Err(UnknownVariant(other.to_string())),
        }
    }
}

/// Result of [`apply_variant`]. `empty` is set when nothing survived, which
/// callers usually want to warn about.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub dataset: Dataset,
    pub empty: bool,
    pub removed_documents: usize,
    pub removed_sentences: usize,
}

pub fn apply_variant(dataset: &Dataset, variant: PreprocessVariant) -> Preprocessed {
    let total_sentences = dataset.sentence_count();
    let total_documents = dataset.documents().len();
    let documents: Vec<Document> = match variant {
        PreprocessVariant::All => dataset.documents().to_vec(),
        PreprocessVariant::Short => dataset
            .documents()
            .iter()
            .filter(|d| d.has_observations())
            .cloned()
            .collect(),
        PreprocessVariant::Shortest => dataset
            .documents()
            .iter()
            .filter_map(|d| {
                let last = d.sentences().iter().rposition(|s| !s.observed().is_empty())?;
                Some(Document::new(d.id(), d.sentences()[..=last].to_vec()).expect("at least one sentence kept"))
            })
            .collect(),
    };
    let dataset = Dataset::new(dataset.tagset().clone(), documents).expect("tags already validated");
    if dataset.documents().is_empty() {
        log::warn!("preprocessing variant {variant} removed every document");
    }
    Preprocessed {
        empty: dataset.documents().is_empty(),
        removed_documents: total_documents - dataset.documents().len(),
        removed_sentences: total_sentences - dataset.sentence_count(),
        dataset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotatedSentence, ObservedTags, Sentence, Tag, TagSet};
    use proptest::prelude::*;

    fn dataset(layout: &[Vec<bool>]) -> Dataset {
        let tagset = TagSet::new(&["X"]).unwrap();
        let docs = layout
            .iter()
            .enumerate()
            .map(|(d, sentences)| {
                let sentences = sentences
                    .iter()
                    .map(|&observed| {
                        let mut obs = ObservedTags::new();
                        if observed {
                            obs.insert(1, Tag::from_index(4)).unwrap();
                        }
                        AnnotatedSentence::new(Sentence::new(["a", "b"]).unwrap(), obs, None).unwrap()
                    })
                    .collect();
                Document::new(format!("d{d}"), sentences).unwrap()
            })
            .collect();
        Dataset::new(tagset, docs).unwrap()
    }

    #[test]
    fn definitions() {
        let mut ten = vec![false; 10];
        ten[0] = true;
        ten[2] = true;
        let data = dataset(&[ten, vec![false, false]]);
        assert_eq!(apply_variant(&data, PreprocessVariant::All).dataset, data);
        let short = apply_variant(&data, PreprocessVariant::Short);
        assert_eq!(short.dataset.documents().len(), 1);
        assert_eq!(short.removed_documents, 1);
        let shortest = apply_variant(&data, PreprocessVariant::Shortest);
        assert_eq!(shortest.dataset.sentence_count(), 3);
        assert_eq!(shortest.removed_sentences, 9);
    }

    #[test]
    fn empty_result_is_flagged() {
        let data = dataset(&[vec![false]]);
        let out = apply_variant(&data, PreprocessVariant::Short);
        assert!(out.empty);
    }

    #[test]
    fn parse_variants() {
        for v in PreprocessVariant::ALL {
            assert_eq!(v.as_str().parse::<PreprocessVariant>().unwrap(), v);
        }
        assert!("longest".parse::<PreprocessVariant>().is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_observation_preserving(layout in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..6), 1..6)) {
            let data = dataset(&layout);
            let out: Vec<Dataset> = PreprocessVariant::ALL.iter().map(|&v| apply_variant(&data, v).dataset).collect();
            prop_assert!(out[2].token_count() <= out[1].token_count());
            prop_assert!(out[1].token_count() <= out[0].token_count());
            let obs = |d: &Dataset| d.sentences().map(|s| s.observed().clone()).filter(|o| !o.is_empty()).collect::<Vec<_>>();
            prop_assert_eq!(obs(&out[0]), obs(&out[1]));
            prop_assert_eq!(obs(&out[0]), obs(&out[2]));
        }
    }
}
