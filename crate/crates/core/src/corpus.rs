//! Tokens, BILUO tags, entity spans and partially observed datasets.
//!
//! Positions in this module are 1-based: a sentence of length `n` has
//! positions `1..=n`, and a [`Span`] covers `start..=end`. Code that needs
//! 0-based offsets converts at the boundary.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("entity class name must be non-empty")]
    EmptyClassName,
    #[error("duplicate entity class {0:?}")]
    DuplicateClass(String),
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("sentence must contain at least one token")]
    EmptySentence,
    #[error("token {position} is empty")]
    EmptyToken { position: usize },
    #[error("document {0:?} has no sentences")]
    EmptyDocument(String),
    #[error("span {span} lies outside a sentence of length {len}")]
    SpanOutOfBounds { span: Span, len: usize },
    #[error("spans {first} and {second} overlap")]
    OverlappingSpans { first: Span, second: Span },
    #[error("ungrammatical tag sequence at position {position}: {reason}")]
    Ungrammatical { position: usize, reason: String },
    #[error("observation position {position} outside 1..={len}")]
    ObservationOutOfBounds { position: usize, len: usize },
    #[error("position {0} observed twice")]
    DuplicateObservation(usize),
    #[error("gold tag sequence has length {got}, sentence has {expected} tokens")]
    GoldLength { expected: usize, got: usize },
    #[error("tag index {index} is outside a tag set of size {len}")]
    TagOutOfRange { index: usize, len: usize },
    #[error("sentence {sentence} of document {document:?} has no gold tags")]
    MissingGold { document: String, sentence: usize },
}

/// BILUO role of a tag. `O` is the only role without an entity class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    O,
    B,
    I,
    L,
    U,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::O => "O",
            Role::B => "B",
            Role::I => "I",
            Role::L => "L",
            Role::U => "U",
        }
    }

    const ENTITY_ROLES: [Role; 4] = [Role::B, Role::I, Role::L, Role::U];
}

/// A tag, identified by its index in a [`TagSet`].
///
/// The index layout is fixed: `O` is 0 and class `c` (0-based) owns indices
/// `1 + 4c ..= 4 + 4c` in `B, I, L, U` order, so role and class can be read
/// off the index without consulting the tag set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tag(usize);

impl Tag {
    pub const O: Tag = Tag(0);

    pub fn new(role: Role, class: usize) -> Tag {
        match role {
            Role::O => Tag::O,
            Role::B => Tag(1 + 4 * class),
            Role::I => Tag(2 + 4 * class),
            Role::L => Tag(3 + 4 * class),
            Role::U => Tag(4 + 4 * class),
        }
    }

    pub fn from_index(index: usize) -> Tag {
        Tag(index)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn is_outside(self) -> bool {
        self.0 == 0
    }

    pub fn role(self) -> Role {
        if self.0 == 0 {
            Role::O
        } else {
            Role::ENTITY_ROLES[(self.0 - 1) % 4]
        }
    }

    pub fn class(self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            Some((self.0 - 1) / 4)
        }
    }
}

/// Ordered BILUO tag inventory over a list of entity classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagSet {
    classes: Vec<String>,
    names: Vec<String>,
    lookup: HashMap<String, Tag>,
}

impl TagSet {
    pub fn new<S: AsRef<str>>(classes: &[S]) -> Result<TagSet, CorpusError> {
        let mut seen = HashSet::new();
        let mut owned = Vec::with_capacity(classes.len());
        for class in classes {
            let class = class.as_ref();
            if class.is_empty() {
                return Err(CorpusError::EmptyClassName);
            }
            if !seen.insert(class.to_string()) {
                return Err(CorpusError::DuplicateClass(class.to_string()));
            }
            owned.push(class.to_string());
        }
        let mut names = vec!["O".to_string()];
        for class in &owned {
            for role in Role::ENTITY_ROLES {
                names.push(format!("{}-{}", role.as_str(), class));
            }
        }
        let lookup = names
            .iter()
            .enumerate()
            .map(|(i, name)| (name.clone(), Tag(i)))
            .collect();
        Ok(TagSet {
            classes: owned,
            names,
            lookup,
        })
    }

    /// Number of tags, `4 * classes + 1`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.classes[class]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn o_index(&self) -> usize {
        0
    }

    pub fn name(&self, tag: Tag) -> &str {
        &self.names[tag.0]
    }

    pub fn parse(&self, name: &str) -> Result<Tag, CorpusError> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| CorpusError::UnknownTag(name.to_string()))
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        (0..self.len()).map(Tag)
    }

    pub fn contains(&self, tag: Tag) -> bool {
        tag.0 < self.len()
    }

    pub fn check(&self, tag: Tag) -> Result<(), CorpusError> {
        if self.contains(tag) {
            Ok(())
        } else {
            Err(CorpusError::TagOutOfRange {
                index: tag.0,
                len: self.len(),
            })
        }
    }
}

impl TryFrom<Vec<String>> for TagSet {
    type Error = CorpusError;

    fn try_from(classes: Vec<String>) -> Result<Self, Self::Error> {
        TagSet::new(&classes)
    }
}

impl From<TagSet> for Vec<String> {
    fn from(tagset: TagSet) -> Self {
        tagset.classes
    }
}

/// A typed entity span covering positions `start..=end` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, class: usize) -> Span {
        Span { start, end, class }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, class {})", self.start, self.end, self.class)
    }
}

/// Encodes non-overlapping spans as a BILUO tag sequence of length `n`.
pub fn spans_to_tags(spans: &[Span], n: usize) -> Result<Vec<Tag>, CorpusError> {
    let mut sorted = spans.to_vec();
    sorted.sort();
    for span in &sorted {
        if span.start == 0 || span.start > span.end || span.end > n {
            return Err(CorpusError::SpanOutOfBounds { span: *span, len: n });
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].overlaps(&pair[1]) {
            return Err(CorpusError::OverlappingSpans {
                first: pair[0],
                second: pair[1],
            });
        }
    }
    let mut tags = vec![Tag::O; n];
    for span in &sorted {
        let c = span.class;
        if span.start == span.end {
            tags[span.start - 1] = Tag::new(Role::U, c);
        } else {
            tags[span.start - 1] = Tag::new(Role::B, c);
            for tag in &mut tags[span.start..span.end - 1] {
                *tag = Tag::new(Role::I, c);
            }
            tags[span.end - 1] = Tag::new(Role::L, c);
        }
    }
    Ok(tags)
}

/// Decodes a grammatical BILUO sequence into its spans, in textual order.
///
/// An unterminated span (sequence ends on `B` or `I`) is reported at the
/// virtual end boundary, position `n + 1`.
pub fn tags_to_spans(tags: &[Tag]) -> Result<Vec<Span>, CorpusError> {
    let mut spans = Vec::new();
    // (start, class) of the span currently open after a B or I tag
    let mut open: Option<(usize, usize)> = None;
    for (offset, &tag) in tags.iter().enumerate() {
        let position = offset + 1;
        let ungrammatical = |reason: String| CorpusError::Ungrammatical { position, reason };
        match (open, tag.role(), tag.class()) {
            (None, Role::O, _) => {}
            (None, Role::U, Some(c)) => spans.push(Span::new(position, position, c)),
            (None, Role::B, Some(c)) => open = Some((position, c)),
            (None, role, _) => {
                return Err(ungrammatical(format!(
                    "{} tag without a preceding B",
                    role.as_str()
                )))
            }
            (Some((_, c)), Role::I, Some(c2)) if c == c2 => {}
            (Some((start, c)), Role::L, Some(c2)) if c == c2 => {
                spans.push(Span::new(start, position, c));
                open = None;
            }
            (Some((_, c)), role, class) => {
                return Err(ungrammatical(match class {
                    Some(c2) if c2 != c => format!(
                        "{} tag of class {} continues a span of class {}",
                        role.as_str(),
                        c2,
                        c
                    ),
                    _ => format!("{} tag inside an open span", role.as_str()),
                }))
            }
        }
    }
    if let Some((start, _)) = open {
        return Err(CorpusError::Ungrammatical {
            position: tags.len() + 1,
            reason: format!("span opened at {} is never closed", start),
        });
    }
    Ok(spans)
}

/// A set of `(position, tag)` observations for one sentence; at most one
/// tag per position. Unobserved positions are latent, not `O`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedTags {
    observations: BTreeMap<usize, Tag>,
}

impl ObservedTags {
    pub fn new() -> ObservedTags {
        ObservedTags::default()
    }

    pub fn insert(&mut self, position: usize, tag: Tag) -> Result<(), CorpusError> {
        if position == 0 {
            return Err(CorpusError::ObservationOutOfBounds { position, len: 0 });
        }
        if self.observations.insert(position, tag).is_some() {
            return Err(CorpusError::DuplicateObservation(position));
        }
        Ok(())
    }

    /// Observes every tag of every span, BILUO-encoded.
    pub fn from_spans(spans: &[Span], n: usize) -> Result<ObservedTags, CorpusError> {
        let tags = spans_to_tags(spans, n)?;
        let mut observed = ObservedTags::new();
        for span in spans {
            for position in span.start..=span.end {
                observed.observations.insert(position, tags[position - 1]);
            }
        }
        Ok(observed)
    }

    /// Observes every position, including `O` tags.
    pub fn from_full(tags: &[Tag]) -> ObservedTags {
        ObservedTags {
            observations: tags.iter().enumerate().map(|(i, &t)| (i + 1, t)).collect(),
        }
    }

    pub fn get(&self, position: usize) -> Option<Tag> {
        self.observations.get(&position).copied()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, Tag)> + '_ {
        self.observations.iter().map(|(&p, &t)| (p, t))
    }

    pub fn max_position(&self) -> Option<usize> {
        self.observations.keys().next_back().copied()
    }

    /// Spans whose every tag is observed and which form a complete `U` or
    /// `B I* L` run. Fragments are ignored.
    pub fn complete_spans(&self) -> Vec<Span> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize, usize)> = None; // (start, class, last position)
        for (position, tag) in self.iter() {
            if let Some((_, _, last)) = open {
                if position != last + 1 {
                    open = None;
                }
            }
            match (open, tag.role(), tag.class()) {
                (_, Role::U, Some(c)) => {
                    spans.push(Span::new(position, position, c));
                    open = None;
                }
                (_, Role::B, Some(c)) => open = Some((position, c, position)),
                (Some((start, c, _)), Role::I, Some(c2)) if c == c2 => {
                    open = Some((start, c, position))
                }
                (Some((start, c, _)), Role::L, Some(c2)) if c == c2 => {
                    spans.push(Span::new(start, position, c));
                    open = None;
                }
                _ => open = None,
            }
        }
        spans
    }
}

/// A non-empty sequence of non-empty tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Sentence, CorpusError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(CorpusError::EmptySentence);
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(CorpusError::EmptyToken { position: i + 1 });
        }
        Ok(Sentence { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, position: usize) -> &str {
        &self.tokens[position - 1]
    }
}

/// A sentence with its partial observations and, optionally, the full gold
/// tagging. Gold tags are only used by simulators and evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    sentence: Sentence,
    observed: ObservedTags,
    gold: Option<Vec<Tag>>,
}

impl AnnotatedSentence {
    pub fn new(
        sentence: Sentence,
        observed: ObservedTags,
        gold: Option<Vec<Tag>>,
    ) -> Result<AnnotatedSentence, CorpusError> {
        let n = sentence.len();
        if let Some(position) = observed.max_position() {
            if position > n {
                return Err(CorpusError::ObservationOutOfBounds { position, len: n });
            }
        }
        if let Some(gold) = &gold {
            if gold.len() != n {
                return Err(CorpusError::GoldLength {
                    expected: n,
                    got: gold.len(),
                });
            }
            tags_to_spans(gold)?;
        }
        Ok(AnnotatedSentence {
            sentence,
            observed,
            gold,
        })
    }

    /// A fully observed sentence: gold tags are also the observations.
    pub fn fully_observed(sentence: Sentence, gold: Vec<Tag>) -> Result<AnnotatedSentence, CorpusError> {
        let observed = ObservedTags::from_full(&gold);
        AnnotatedSentence::new(sentence, observed, Some(gold))
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sentence(&self) -> &Sentence {
        &self.sentence
    }

    pub fn tokens(&self) -> &[String] {
        self.sentence.tokens()
    }

    pub fn observed(&self) -> &ObservedTags {
        &self.observed
    }

    pub fn gold(&self) -> Option<&[Tag]> {
        self.gold.as_deref()
    }

    pub fn gold_spans(&self) -> Option<Vec<Span>> {
        // gold is validated as grammatical on construction
        self.gold.as_deref().map(|g| tags_to_spans(g).unwrap_or_default())
    }

    pub fn with_observed(&self, observed: ObservedTags) -> Result<AnnotatedSentence, CorpusError> {
        AnnotatedSentence::new(self.sentence.clone(), observed, self.gold.clone())
    }

    pub fn without_gold(&self) -> AnnotatedSentence {
        AnnotatedSentence {
            sentence: self.sentence.clone(),
            observed: self.observed.clone(),
            gold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    id: String,
    sentences: Vec<AnnotatedSentence>,
}

impl Document {
    pub fn new(id: impl Into<String>, sentences: Vec<AnnotatedSentence>) -> Result<Document, CorpusError> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(CorpusError::EmptyDocument(id));
        }
        Ok(Document { id, sentences })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sentences(&self) -> &[AnnotatedSentence] {
        &self.sentences
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    pub fn has_observations(&self) -> bool {
        self.sentences.iter().any(|s| !s.observed().is_empty())
    }
}

/// An ordered list of documents sharing one tag set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    tagset: TagSet,
    documents: Vec<Document>,
}

impl Dataset {
    pub fn new(tagset: TagSet, documents: Vec<Document>) -> Result<Dataset, CorpusError> {
        for doc in &documents {
            for sentence in doc.sentences() {
                for (_, tag) in sentence.observed().iter() {
                    tagset.check(tag)?;
                }
                for &tag in sentence.gold().unwrap_or(&[]) {
                    tagset.check(tag)?;
                }
            }
        }
        Ok(Dataset { tagset, documents })
    }

    pub fn tagset(&self) -> &TagSet {
        &self.tagset
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn into_documents(self) -> Vec<Document> {
        self.documents
    }

    pub fn sentences(&self) -> impl Iterator<Item = &AnnotatedSentence> + '_ {
        self.documents.iter().flat_map(|d| d.sentences().iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.sentences().len()).sum()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Document::token_count).sum()
    }

    pub fn observation_count(&self) -> usize {
        self.sentences().map(|s| s.observed().len()).sum()
    }

    /// Gold tag sequences of every sentence, in corpus order.
    pub fn gold_sequences(&self) -> Result<Vec<&[Tag]>, CorpusError> {
        let mut out = Vec::with_capacity(self.sentence_count());
        for doc in &self.documents {
            for (i, sentence) in doc.sentences().iter().enumerate() {
                out.push(sentence.gold().ok_or_else(|| CorpusError::MissingGold {
                    document: doc.id().to_string(),
                    sentence: i + 1,
                })?);
            }
        }
        Ok(out)
    }

    /// Replaces every sentence's observations with the full gold tagging.
    pub fn fully_observed(&self) -> Result<Dataset, CorpusError> {
        self.gold_sequences()?;
        self.map_observations(|s| Ok(ObservedTags::from_full(s.gold().expect("gold checked above"))))
    }

    /// Treats unobserved positions as observed `O`.
    ///
    /// A maximal run of unobserved positions becomes `O` only when `O` may
    /// follow the observed tag before it and precede the one after it;
    /// runs inside a partially observed span (after a `B`/`I`, or before
    /// an `I`/`L`) stay latent so the result remains satisfiable.
    pub fn unobserved_as_outside(&self) -> Dataset {
        self.map_observations(|s| {
            let observed = s.observed();
            let mut out = observed.clone();
            let n = s.len();
            let mut position = 1;
            while position <= n {
                if observed.get(position).is_some() {
                    position += 1;
                    continue;
                }
                let start = position;
                while position <= n && observed.get(position).is_none() {
                    position += 1;
                }
                let left_open = start > 1 && matches!(observed.get(start - 1).map(Tag::role), Some(Role::B | Role::I));
                let right_open = position <= n && matches!(observed.get(position).map(Tag::role), Some(Role::I | Role::L));
                if !left_open && !right_open {
                    for p in start..position {
                        out.observations.insert(p, Tag::O);
                    }
                }
            }
            Ok(out)
        })
        .expect("observations are in range by construction")
    }

    pub fn map_observations<F>(&self, mut f: F) -> Result<Dataset, CorpusError>
    where
        F: FnMut(&AnnotatedSentence) -> Result<ObservedTags, CorpusError>,
    {
        let mut documents = Vec::with_capacity(self.documents.len());
        for doc in &self.documents {
            let sentences = doc
                .sentences()
                .iter()
                .map(|s| s.with_observed(f(s)?))
                .collect::<Result<Vec<_>, _>>()?;
            documents.push(Document::new(doc.id(), sentences)?);
        }
        Ok(Dataset {
            tagset: self.tagset.clone(),
            documents,
        })
    }
}

/// Fraction of gold positions whose tag is not `O`.
pub fn entity_token_ratio(dataset: &Dataset) -> Result<f64, CorpusError> {
    let mut entity = 0usize;
    let mut total = 0usize;
    for tags in dataset.gold_sequences()? {
        entity += tags.iter().filter(|t| !t.is_outside()).count();
        total += tags.len();
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(entity as f64 / total as f64)
}
