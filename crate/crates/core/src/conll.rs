//! Column-formatted corpus reading and writing.
//!
//! One token per line, blank lines between sentences, and a marker line
//! (`-DOCSTART-` by default) opening each document. Tag columns may use BIO
//! or BILUO; BIO sentences are converted to BILUO on load. A sentence is
//! treated as BILUO when any of its tags carries an `L-` or `U-` prefix,
//! since every BILUO sentence with an entity has one.
//!
//! Partial corpora carry an extra observation column in which `-` marks a
//! latent position and `O` is an observed outside tag.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    tags_to_spans, AnnotatedSentence, CorpusError, Dataset, Document, ObservedTags, Sentence, Tag,
    TagSet,
};

/// Placeholder for an unobserved position in the observation column.
pub const LATENT: &str = "-";

#[derive(Debug, Error)]
pub enum ConllError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: expected at least {expected} columns, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("line {line}: unknown tag {tag:?}")]
    UnknownTag { line: usize, tag: String },
    #[error("line {line}: {source}")]
    Corpus { line: usize, source: CorpusError },
    #[error("invalid column configuration: {0}")]
    Config(String),
    #[error("cannot write document {document:?}: {reason}")]
    Unrepresentable { document: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    Index(usize),
    Last,
}

impl Column {
    fn resolve(self, width: usize) -> usize {
        match self {
            Column::Index(i) => i,
            Column::Last => width.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Separator {
    /// Any run of whitespace.
    Whitespace,
    Tab,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnFormatConfig {
    pub token_column: usize,
    /// Gold tag column; `None` for unlabeled text.
    pub tag_column: Option<Column>,
    /// Observation column of a partial corpus. When absent, every non-`O`
    /// gold tag is taken as observed.
    pub observed_column: Option<Column>,
    pub separator: Separator,
    pub docstart_marker: String,
    /// Without document markers, make every sentence its own document
    /// instead of collecting the whole file into one.
    pub sentence_documents: bool,
}

impl Default for ColumnFormatConfig {
    fn default() -> Self {
        ColumnFormatConfig {
            token_column: 0,
            tag_column: Some(Column::Last),
            observed_column: None,
            separator: Separator::Whitespace,
            docstart_marker: "-DOCSTART-".to_string(),
            sentence_documents: false,
        }
    }
}

impl ColumnFormatConfig {
    /// `token gold observed` layout written for partial corpora.
    pub fn partial() -> Self {
        ColumnFormatConfig {
            tag_column: Some(Column::Index(1)),
            observed_column: Some(Column::Last),
            ..Default::default()
        }
    }

    /// `token observed` layout, for partial corpora with gold withheld.
    pub fn partial_without_gold() -> Self {
        ColumnFormatConfig {
            tag_column: None,
            observed_column: Some(Column::Last),
            ..Default::default()
        }
    }

    /// Tokens only.
    pub fn unlabeled() -> Self {
        ColumnFormatConfig {
            tag_column: None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConllError> {
        if self.docstart_marker.is_empty() {
            return Err(ConllError::Config("empty document marker".into()));
        }
        if self.tag_column == Some(Column::Index(self.token_column)) {
            return Err(ConllError::Config("token and tag columns coincide".into()));
        }
        if self.observed_column == Some(Column::Index(self.token_column)) {
            return Err(ConllError::Config("token and observation columns coincide".into()));
        }
        if self.tag_column.is_some() && self.tag_column == self.observed_column {
            return Err(ConllError::Config("tag and observation columns coincide".into()));
        }
        Ok(())
    }

    fn min_width(&self) -> usize {
        let mut width = self.token_column + 1;
        for column in [self.tag_column, self.observed_column].into_iter().flatten() {
            width = width.max(match column {
                Column::Index(i) => i + 1,
                Column::Last => 2,
            });
        }
        width
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self.separator {
            Separator::Whitespace => line.split_whitespace().collect(),
            Separator::Tab => line.split('\t').collect(),
        }
    }

    fn join(&self) -> &'static str {
        match self.separator {
            Separator::Whitespace => " ",
            Separator::Tab => "\t",
        }
    }
}

/// Converts a BIO sequence into BILUO.
///
/// An `I-c` that does not continue a `B-c`/`I-c` run opens a new span, as
/// `B-c` would. Strings that are neither `O` nor `B-`/`I-` prefixed pass
/// through unchanged.
pub fn bio_to_biluo<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    let parsed: Vec<Option<(char, &str)>> = tags
        .iter()
        .map(|t| {
            let t = t.as_ref();
            match t.split_once('-') {
                Some(("B", class)) => Some(('B', class)),
                Some(("I", class)) => Some(('I', class)),
                _ => None,
            }
        })
        .collect();
    let mut out: Vec<String> = tags.iter().map(|t| t.as_ref().to_string()).collect();
    let mut i = 0;
    while i < parsed.len() {
        let Some((_, class)) = parsed[i] else {
            i += 1;
            continue;
        };
        let start = i;
        let mut end = i;
        while end + 1 < parsed.len() && parsed[end + 1] == Some(('I', class)) {
            end += 1;
        }
        if start == end {
            out[start] = format!("U-{class}");
        } else {
            out[start] = format!("B-{class}");
            for tag in &mut out[start + 1..end] {
                *tag = format!("I-{class}");
            }
            out[end] = format!("L-{class}");
        }
        i = end + 1;
    }
    out
}

fn looks_biluo(tags: &[&str]) -> bool {
    tags.iter().any(|t| t.starts_with("L-") || t.starts_with("U-"))
}

struct PendingLine<'a> {
    line: usize,
    token: &'a str,
    tag: Option<&'a str>,
    observed: Option<&'a str>,
}

/// Parses corpus text. `read_corpus` is this plus file I/O.
pub fn parse_corpus(text: &str, config: &ColumnFormatConfig, tagset: &TagSet) -> Result<Dataset, ConllError> {
    config.validate()?;
    let min_width = config.min_width();
    let mut documents = Vec::new();
    let mut doc_id: Option<String> = None;
    let mut doc_sentences: Vec<AnnotatedSentence> = Vec::new();
    let mut pending: Vec<PendingLine> = Vec::new();

    let finish_document = |id: Option<String>, sentences: &mut Vec<AnnotatedSentence>, documents: &mut Vec<Document>| {
        if sentences.is_empty() {
            return;
        }
        let id = id.unwrap_or_else(|| format!("doc{}", documents.len() + 1));
        documents.push(Document::new(id, std::mem::take(sentences)).expect("non-empty"));
    };

    for (offset, raw) in text.lines().enumerate() {
        let line = offset + 1;
        let fields = config.split(raw);
        let blank = fields.iter().all(|f| f.trim().is_empty());
        if blank {
            if !pending.is_empty() {
                doc_sentences.push(build_sentence(&pending, config, tagset)?);
                pending.clear();
                if config.sentence_documents && doc_id.is_none() {
                    finish_document(None, &mut doc_sentences, &mut documents);
                }
            }
            continue;
        }
        if fields.get(config.token_column) == Some(&config.docstart_marker.as_str())
            || fields.first() == Some(&config.docstart_marker.as_str())
        {
            if !pending.is_empty() {
                doc_sentences.push(build_sentence(&pending, config, tagset)?);
                pending.clear();
            }
            finish_document(doc_id.take(), &mut doc_sentences, &mut documents);
            let id = fields
                .get(1)
                .filter(|f| **f != "-X-" && !f.is_empty())
                .map(|f| f.to_string())
                .unwrap_or_else(|| format!("doc{}", documents.len() + 1));
            doc_id = Some(id);
            continue;
        }
        if fields.len() < min_width {
            return Err(ConllError::Ragged {
                line,
                expected: min_width,
                found: fields.len(),
            });
        }
        let width = fields.len();
        let get = |column: Option<Column>| column.map(|c| fields[c.resolve(width)]);
        pending.push(PendingLine {
            line,
            token: fields[config.token_column],
            tag: get(config.tag_column),
            observed: get(config.observed_column),
        });
    }
    if !pending.is_empty() {
        doc_sentences.push(build_sentence(&pending, config, tagset)?);
    }
    finish_document(doc_id, &mut doc_sentences, &mut documents);
    Dataset::new(tagset.clone(), documents).map_err(|source| ConllError::Corpus { line: 0, source })
}

fn build_sentence(lines: &[PendingLine], config: &ColumnFormatConfig, tagset: &TagSet) -> Result<AnnotatedSentence, ConllError> {
    let first_line = lines[0].line;
    let sentence = Sentence::new(lines.iter().map(|l| l.token))
        .map_err(|source| ConllError::Corpus { line: first_line, source })?;

    let gold = match config.tag_column {
        None => None,
        Some(_) => {
            let raw: Vec<&str> = lines.iter().map(|l| l.tag.unwrap_or("O")).collect();
            let converted: Vec<String> = if looks_biluo(&raw) {
                raw.iter().map(|s| s.to_string()).collect()
            } else {
                bio_to_biluo(&raw)
            };
            let mut tags = Vec::with_capacity(converted.len());
            for (name, l) in converted.iter().zip(lines) {
                let tag = tagset.parse(name).map_err(|_| ConllError::UnknownTag {
                    line: l.line,
                    tag: l.tag.unwrap_or_default().to_string(),
                })?;
                tags.push(tag);
            }
            if let Err(CorpusError::Ungrammatical { position, reason }) = tags_to_spans(&tags) {
                let line = lines.get(position - 1).map_or(lines[lines.len() - 1].line, |l| l.line);
                return Err(ConllError::Corpus {
                    line,
                    source: CorpusError::Ungrammatical { position, reason },
                });
            }
            Some(tags)
        }
    };

    let observed = match config.observed_column {
        Some(_) => {
            let mut observed = ObservedTags::new();
            for (i, l) in lines.iter().enumerate() {
                let value = l.observed.unwrap_or(LATENT);
                if value == LATENT {
                    continue;
                }
                let tag = tagset.parse(value).map_err(|_| ConllError::UnknownTag {
                    line: l.line,
                    tag: value.to_string(),
                })?;
                observed
                    .insert(i + 1, tag)
                    .map_err(|source| ConllError::Corpus { line: l.line, source })?;
            }
            observed
        }
        None => {
            let mut observed = ObservedTags::new();
            for (i, &tag) in gold.iter().flatten().enumerate() {
                if !tag.is_outside() {
                    observed.insert(i + 1, tag).expect("positions are distinct");
                }
            }
            observed
        }
    };

    AnnotatedSentence::new(sentence, observed, gold).map_err(|source| ConllError::Corpus { line: first_line, source })
}

pub fn read_corpus(path: &Path, config: &ColumnFormatConfig, tagset: &TagSet) -> Result<Dataset, ConllError> {
    let text = fs::read_to_string(path).map_err(|source| ConllError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text, config, tagset)
}

/// Renders a dataset as `token [gold] [observed]` lines.
///
/// The gold column is written when `config.tag_column` is set and the
/// observation column when `config.observed_column` is set, so the same
/// configuration reads the output back. Column indices in the configuration
/// are not consulted beyond that; use [`ColumnFormatConfig::default`],
/// [`ColumnFormatConfig::partial`], [`ColumnFormatConfig::partial_without_gold`]
/// or [`ColumnFormatConfig::unlabeled`] for round trips.
pub fn format_corpus(dataset: &Dataset, config: &ColumnFormatConfig) -> Result<String, ConllError> {
    config.validate()?;
    let tagset = dataset.tagset();
    let sep = config.join();
    let mut out = String::new();
    for doc in dataset.documents() {
        let unrepresentable = |reason: String| ConllError::Unrepresentable {
            document: doc.id().to_string(),
            reason,
        };
        if doc.id().chars().any(char::is_whitespace) {
            return Err(unrepresentable("document id contains whitespace".into()));
        }
        out.push_str(&config.docstart_marker);
        out.push_str(sep);
        out.push_str(doc.id());
        out.push_str("\n\n");
        for sentence in doc.sentences() {
            let gold = match (config.tag_column, sentence.gold()) {
                (Some(_), None) => return Err(unrepresentable("sentence without gold tags".into())),
                (Some(_), Some(g)) => Some(g),
                (None, _) => None,
            };
            for (i, token) in sentence.tokens().iter().enumerate() {
                if token.chars().any(char::is_whitespace) || token == &config.docstart_marker {
                    return Err(unrepresentable(format!("token {token:?} cannot be written")));
                }
                out.push_str(token);
                if let Some(gold) = gold {
                    out.push_str(sep);
                    out.push_str(tagset.name(gold[i]));
                }
                if config.observed_column.is_some() {
                    out.push_str(sep);
                    match sentence.observed().get(i + 1) {
                        Some(tag) => out.push_str(tagset.name(tag)),
                        None => out.push_str(LATENT),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_corpus(dataset: &Dataset, path: &Path, config: &ColumnFormatConfig) -> Result<(), ConllError> {
    let text = format_corpus(dataset, config)?;
    let io_err = |source| ConllError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Writes predicted tag sequences for `dataset`'s tokens in the default
/// `token tag` layout.
pub fn format_predictions(dataset: &Dataset, predictions: &[Vec<Tag>]) -> Result<String, ConllError> {
    let mut documents = Vec::with_capacity(dataset.documents().len());
    let mut next = predictions.iter();
    for doc in dataset.documents() {
        let mut sentences = Vec::with_capacity(doc.sentences().len());
        for sentence in doc.sentences() {
            let tags = next.next().ok_or_else(|| ConllError::Unrepresentable {
                document: doc.id().to_string(),
                reason: "fewer predictions than sentences".into(),
            })?;
            let annotated = AnnotatedSentence::new(sentence.sentence().clone(), ObservedTags::new(), Some(tags.clone()))
                .map_err(|source| ConllError::Corpus { line: 0, source })?;
            sentences.push(annotated);
        }
        documents.push(Document::new(doc.id(), sentences).map_err(|source| ConllError::Corpus { line: 0, source })?);
    }
    let predicted = Dataset::new(dataset.tagset().clone(), documents).map_err(|source| ConllError::Corpus { line: 0, source })?;
    format_corpus(&predicted, &ColumnFormatConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Role, Span};

    fn tagset() -> TagSet {
        TagSet::new(&["PER", "ORG", "LOC", "MISC"]).unwrap()
    }

    #[test]
    fn bio_conversion_examples() {
        assert_eq!(bio_to_biluo(&["B-LOC", "I-LOC", "I-LOC"]), ["B-LOC", "I-LOC", "L-LOC"]);
        assert_eq!(bio_to_biluo(&["I-PER"]), ["U-PER"]);
        assert_eq!(bio_to_biluo(&["B-ORG", "B-ORG"]), ["U-ORG", "U-ORG"]);
        assert_eq!(bio_to_biluo(&["B-ORG"]), ["U-ORG"]);
        assert_eq!(bio_to_biluo(&["B-PER", "I-PER"]), ["B-PER", "L-PER"]);
        assert_eq!(bio_to_biluo(&["B-PER", "I-ORG", "O"]), ["U-PER", "U-ORG", "O"]);
        assert_eq!(bio_to_biluo(&["O", "I-PER", "I-PER", "B-PER"]), ["O", "B-PER", "L-PER", "U-PER"]);
    }

    #[test]
    fn reads_two_sentences_as_one_document() {
        let text = "John NNP B-PER\nSmith NNP I-PER\nruns VBZ O\n\nIBM NNP B-ORG\n";
        let ds = parse_corpus(text, &ColumnFormatConfig::default(), &tagset()).unwrap();
        assert_eq!(ds.documents().len(), 1);
        assert_eq!(ds.sentence_count(), 2);
        let ts = ds.tagset();
        let first: Vec<&str> = ds.documents()[0].sentences()[0].gold().unwrap().iter().map(|&t| ts.name(t)).collect();
        assert_eq!(first, ["B-PER", "L-PER", "O"]);
        let second = ds.documents()[0].sentences()[1].gold().unwrap();
        assert_eq!(ts.name(second[0]), "U-ORG");
        // full observation of entity tags, O left latent
        let obs = ds.documents()[0].sentences()[0].observed();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs.get(3), None);
    }

    #[test]
    fn docstart_splits_documents() {
        let text = "-DOCSTART- -X- -X- O\n\nA x O\n\nB x O\n\n-DOCSTART- -X- -X- O\n\nC x U-LOC\n";
        let ds = parse_corpus(text, &ColumnFormatConfig::default(), &tagset()).unwrap();
        assert_eq!(ds.documents().len(), 2);
        assert_eq!(ds.documents()[0].sentences().len(), 2);
        assert_eq!(ds.documents()[1].id(), "doc2");
    }

    #[test]
    fn sentence_documents_flag() {
        let text = "A O\n\nB O\n\nC O\n";
        let config = ColumnFormatConfig {
            sentence_documents: true,
            ..Default::default()
        };
        let ds = parse_corpus(text, &config, &tagset()).unwrap();
        assert_eq!(ds.documents().len(), 3);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let ts = tagset();
        match parse_corpus("A O\nB B-FOO\n", &ColumnFormatConfig::default(), &ts) {
            Err(ConllError::UnknownTag { line, tag }) => {
                assert_eq!(line, 2);
                assert_eq!(tag, "B-FOO");
            }
            other => panic!("unexpected {other:?}"),
        }
        let config = ColumnFormatConfig {
            tag_column: Some(Column::Index(2)),
            ..Default::default()
        };
        match parse_corpus("A x O\nB O\n", &config, &ts) {
            Err(ConllError::Ragged { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_corpus("A O\nB U-PER\nC I-PER\n", &ColumnFormatConfig::default(), &ts) {
            Err(ConllError::Corpus { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        let config = ColumnFormatConfig {
            tag_column: Some(Column::Index(0)),
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(ConllError::Config(_))));
    }

    fn sample_dataset() -> Dataset {
        let ts = tagset();
        let s1 = AnnotatedSentence::fully_observed(
            Sentence::new(["Anna", "Berg", "visits", "Oslo"]).unwrap(),
            crate::corpus::spans_to_tags(&[Span::new(1, 2, 0), Span::new(4, 4, 2)], 4).unwrap(),
        )
        .unwrap();
        let s2 = AnnotatedSentence::fully_observed(Sentence::new(["nothing", "here"]).unwrap(), vec![Tag::O; 2]).unwrap();
        let s3 = AnnotatedSentence::fully_observed(
            Sentence::new(["IBM", "ships"]).unwrap(),
            vec![Tag::new(Role::U, 1), Tag::O],
        )
        .unwrap();
        let observed_entities = |s: &AnnotatedSentence| {
            let mut o = ObservedTags::new();
            for (i, &t) in s.gold().unwrap().iter().enumerate() {
                if !t.is_outside() {
                    o.insert(i + 1, t).unwrap();
                }
            }
            s.with_observed(o).unwrap()
        };
        Dataset::new(
            ts,
            vec![
                Document::new("d1", vec![observed_entities(&s1), observed_entities(&s2)]).unwrap(),
                Document::new("d2", vec![observed_entities(&s3)]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_three_sentences() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conll");
        let config = ColumnFormatConfig::default();
        write_corpus(&ds, &path, &config).unwrap();
        let back = read_corpus(&path, &config, ds.tagset()).unwrap();
        assert_eq!(back, ds);
        // byte stability
        assert_eq!(format_corpus(&back, &config).unwrap(), fs::read_to_string(&path).unwrap());
    }

    #[test]
    fn empty_dataset_writes_empty_file() {
        let ds = Dataset::new(tagset(), vec![]).unwrap();
        assert_eq!(format_corpus(&ds, &ColumnFormatConfig::default()).unwrap(), "");
        assert_eq!(parse_corpus("", &ColumnFormatConfig::default(), &tagset()).unwrap(), ds);
    }

    #[test]
    fn partial_round_trip_keeps_latent_and_observed_o() {
        let ds = sample_dataset();
        let partial = ds
            .map_observations(|s| {
                let mut o = ObservedTags::new();
                if let Some(t) = s.gold().unwrap().first() {
                    o.insert(1, *t)?;
                }
                Ok(o)
            })
            .unwrap();
        let config = ColumnFormatConfig::partial();
        let text = format_corpus(&partial, &config).unwrap();
        assert!(text.contains("Berg B-PER -\n") || text.contains("Berg L-PER -\n"));
        assert!(text.contains("nothing O O\n"));
        let back = parse_corpus(&text, &config, partial.tagset()).unwrap();
        assert_eq!(back, partial);

        let hidden = ColumnFormatConfig::partial_without_gold();
        let text = format_corpus(&partial, &hidden).unwrap();
        let back = parse_corpus(&text, &hidden, partial.tagset()).unwrap();
        for (a, b) in back.sentences().zip(partial.sentences()) {
            assert_eq!(a.observed(), b.observed());
            assert_eq!(a.gold(), None);
        }
    }
}
