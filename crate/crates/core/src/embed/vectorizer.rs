use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::{tokenize, EmbedError, SparseVector};

pub const DEFAULT_MAX_VOCABULARY: usize = 30_000;

const FORMAT_HEADER: &str = "# xroute-vectorizer v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorizerKind {
    Bow,
    Tfidf,
}

impl VectorizerKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Bow => "bow",
            Self::Tfidf => "tfidf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorizerSettings {
    pub kind: VectorizerKind,
    pub min_frequency: usize,
    pub max_size: usize,
}

impl Default for VectorizerSettings {
    fn default() -> Self {
        Self {
            kind: VectorizerKind::Bow,
            min_frequency: 1,
            max_size: DEFAULT_MAX_VOCABULARY,
        }
    }
}

/// Token to dense index mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A fitted bag-of-words or TF-IDF vectorizer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizerModel {
    settings: VectorizerSettings,
    vocabulary: Vocabulary,
    documents: usize,
    frequency: Vec<u64>,
    document_frequency: Vec<u64>,
    idf: Vec<f64>,
}

impl VectorizerModel {
    pub fn settings(&self) -> VectorizerSettings {
        self.settings
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn dimension(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn document_frequency(&self, token: &str) -> Option<u64> {
        self.vocabulary
            .get(token)
            .map(|i| self.document_frequency[i])
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.vocabulary.get(token).map(|i| self.idf[i])
    }

    pub fn vectorize(&self, text: &str) -> SparseVector {
        vectorize(text, self)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<(), EmbedError> {
        let mut buf = String::new();
        let s = &self.settings;
        writeln!(buf, "{FORMAT_HEADER}").unwrap();
        writeln!(buf, "kind\t{}", s.kind.as_str()).unwrap();
        writeln!(buf, "min_frequency\t{}", s.min_frequency).unwrap();
        writeln!(buf, "max_size\t{}", s.max_size).unwrap();
        writeln!(buf, "documents\t{}", self.documents).unwrap();
        writeln!(buf, "tokens\t{}", self.vocabulary.len()).unwrap();
        for (i, token) in self.vocabulary.tokens.iter().enumerate() {
            writeln!(
                buf,
                "{token}\t{}\t{}\t{}",
                self.frequency[i], self.document_frequency[i], self.idf[i]
            )
            .unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self, EmbedError> {
        let mut lines = BufReader::new(input).lines();
        let mut next = |what: &str| -> Result<String, EmbedError> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| EmbedError::Format(format!("missing {what}")))
        };
        let header = next("header")?;
        if header != FORMAT_HEADER {
            return Err(EmbedError::Format(format!("unsupported header {header:?}")));
        }
        let mut field = |key: &str| -> Result<String, EmbedError> {
            let line = next(key)?;
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(EmbedError::Format(format!(
                    "expected {key}, found {line:?}"
                ))),
            }
        };
        let kind = match field("kind")?.as_str() {
            "bow" => VectorizerKind::Bow,
            "tfidf" => VectorizerKind::Tfidf,
            other => return Err(EmbedError::Format(format!("unknown kind {other:?}"))),
        };
        let min_frequency = parse(&field("min_frequency")?)?;
        let max_size = parse(&field("max_size")?)?;
        let documents = parse(&field("documents")?)?;
        let count: usize = parse(&field("tokens")?)?;

        let mut tokens = Vec::with_capacity(count);
        let mut frequency = Vec::with_capacity(count);
        let mut document_frequency = Vec::with_capacity(count);
        let mut idf = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next("token row")?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(EmbedError::Format(format!("bad token row {line:?}")));
            }
            tokens.push(cols[0].to_string());
            frequency.push(parse(cols[1])?);
            document_frequency.push(parse(cols[2])?);
            idf.push(parse(cols[3])?);
        }
        Ok(Self {
            settings: VectorizerSettings {
                kind,
                min_frequency,
                max_size,
            },
            vocabulary: Vocabulary::from_tokens(tokens),
            documents,
            frequency,
            document_frequency,
            idf,
        })
    }
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T, EmbedError> {
    s.parse()
        .map_err(|_| EmbedError::Format(format!("cannot parse {s:?}")))
}

/// Fit a vocabulary (top `max_size` tokens by corpus frequency, ties broken
/// lexicographically) and the smoothed IDF table
/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.
pub fn fit_vectorizer<S: AsRef<str>>(
    corpus: &[S],
    settings: VectorizerSettings,
) -> Result<VectorizerModel, EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let mut stats: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for doc in corpus {
        let mut seen: Vec<String> = tokenize(doc.as_ref());
        for t in &seen {
            stats.entry(t.clone()).or_default().0 += 1;
        }
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            stats.get_mut(&t).unwrap().1 += 1;
        }
    }

    let mut ranked: Vec<(String, u64, u64)> = stats
        .into_iter()
        .filter(|(_, (freq, _))| *freq >= settings.min_frequency as u64)
        .map(|(t, (freq, df))| (t, freq, df))
        .collect();
    // BTreeMap iteration is already lexicographic, so a stable sort on
    // frequency keeps that order among ties.
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    ranked.truncate(settings.max_size);

    let n = corpus.len() as f64;
    let idf = ranked
        .iter()
        .map(|(_, _, df)| ((1.0 + n) / (1.0 + *df as f64)).ln() + 1.0)
        .collect();
    let frequency = ranked.iter().map(|r| r.1).collect();
    let document_frequency = ranked.iter().map(|r| r.2).collect();
    let tokens = ranked.into_iter().map(|r| r.0).collect();

    Ok(VectorizerModel {
        settings,
        vocabulary: Vocabulary::from_tokens(tokens),
        documents: corpus.len(),
        frequency,
        document_frequency,
        idf,
    })
}

/// Raw counts for bag-of-words; count × idf, L2-normalized, for TF-IDF.
/// Out-of-vocabulary tokens are dropped; an all-OOV text yields a zero
/// vector (`SparseVector::is_zero`).
pub fn vectorize(text: &str, model: &VectorizerModel) -> SparseVector {
    let entries: Vec<(usize, f64)> = tokenize(text)
        .iter()
        .filter_map(|t| model.vocabulary.get(t))
        .map(|i| (i, 1.0))
        .collect();
    let mut v = SparseVector::from_entries(model.dimension(), entries);
    if model.settings.kind == VectorizerKind::Tfidf {
        for (i, value) in v.entries.iter_mut() {
            *value *= model.idf[*i];
        }
        let norm = v.norm();
        if norm > 0.0 {
            v.entries.iter_mut().for_each(|(_, value)| *value /= norm);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn settings(kind: VectorizerKind) -> VectorizerSettings {
        VectorizerSettings {
            kind,
            ..Default::default()
        }
    }

    #[test]
    fn counts_document_frequency() {
        let m = fit_vectorizer(&["a b", "a c"], settings(VectorizerKind::Bow)).unwrap();
        let mut vocab = m.vocabulary().tokens().to_vec();
        vocab.sort();
        assert_eq!(vocab, ["a", "b", "c"]);
        assert_eq!(m.document_frequency("a"), Some(2));
        assert_eq!(m.document_frequency("b"), Some(1));
    }

    #[test]
    fn max_size_keeps_most_frequent() {
        let s = VectorizerSettings {
            max_size: 2,
            ..settings(VectorizerKind::Bow)
        };
        let m = fit_vectorizer(&["a a b", "a b c"], s).unwrap();
        assert_eq!(m.vocabulary().tokens(), ["a", "b"]);
    }

    #[test]
    fn frequency_ties_are_lexicographic() {
        let m = fit_vectorizer(&["z y x"], settings(VectorizerKind::Bow)).unwrap();
        assert_eq!(m.vocabulary().tokens(), ["x", "y", "z"]);
    }

    #[test]
    fn min_frequency_filters_rare_tokens() {
        let s = VectorizerSettings {
            min_frequency: 2,
            ..settings(VectorizerKind::Bow)
        };
        let m = fit_vectorizer(&["a a b"], s).unwrap();
        assert_eq!(m.vocabulary().tokens(), ["a"]);
    }

    #[test]
    fn idf_of_ubiquitous_token_is_one() {
        let m = fit_vectorizer(&["a b", "a c", "a"], settings(VectorizerKind::Tfidf)).unwrap();
        assert_eq!(m.idf("a"), Some(1.0));
        // df = 1 of N = 3: ln(4 / 2) + 1
        assert!((m.idf("b").unwrap() - (2.0f64.ln() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            fit_vectorizer(&empty, settings(VectorizerKind::Bow)),
            Err(EmbedError::EmptyCorpus)
        ));
    }

    #[test]
    fn bow_counts() {
        let m = fit_vectorizer(&["a a a b b"], settings(VectorizerKind::Bow)).unwrap();
        assert_eq!(m.vocabulary().get("a"), Some(0));
        assert_eq!(vectorize("a a b", &m).entries(), &[(0, 2.0), (1, 1.0)]);
    }

    #[test]
    fn all_oov_text_is_zero() {
        let m = fit_vectorizer(&["a b"], settings(VectorizerKind::Tfidf)).unwrap();
        let v = vectorize("nothing known here", &m);
        assert!(v.is_zero());
        assert_eq!(v.dimension(), 2);
    }

    #[test]
    fn round_trips_bit_identically() {
        let m = fit_vectorizer(
            &["the cat sat", "the dog ran far", "a cat ran"],
            settings(VectorizerKind::Tfidf),
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = VectorizerModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.idf.iter().zip(&m.idf) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_unknown_header() {
        assert!(VectorizerModel::read_from("# other v9\n".as_bytes()).is_err());
    }

    fn corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,2}( [a-e]{1,2}){0,6}", 1..8)
    }

    proptest! {
        #[test]
        fn tfidf_vectors_have_unit_norm(docs in corpus(), probe in "[a-e]{1,2}( [a-e]{1,2}){0,6}") {
            let m = fit_vectorizer(&docs, settings(VectorizerKind::Tfidf)).unwrap();
            let v = vectorize(&probe, &m);
            if !v.is_zero() {
                prop_assert!((v.norm() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn bow_mass_equals_in_vocabulary_tokens(docs in corpus(), probe in "[a-g]{1,2}( [a-g]{1,2}){0,6}") {
            let m = fit_vectorizer(&docs, settings(VectorizerKind::Bow)).unwrap();
            let v = vectorize(&probe, &m);
            let known = tokenize(&probe).iter().filter(|t| m.vocabulary().get(t).is_some()).count();
            let mass: f64 = v.entries().iter().map(|(_, c)| c).sum();
            prop_assert_eq!(mass, known as f64);
        }

        #[test]
        fn fitting_is_deterministic(docs in corpus()) {
            let a = fit_vectorizer(&docs, settings(VectorizerKind::Tfidf)).unwrap();
            let b = fit_vectorizer(&docs, settings(VectorizerKind::Tfidf)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
