//! Vocabulary, corpus and embedding loaders, tag-scheme conversion and
//! synthetic tasks.

pub mod metrics;
pub mod synth;
pub mod tags;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Bidirectional token/id map with the reserved entries at ids `0..4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary does not start with the reserved tokens".into()));
        }
        let mut v = Self {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for t in tokens {
            if v.ids.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
            v.add(&t);
        }
        Ok(v)
    }

    /// Id of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Ids of `words` wrapped in `<s>` and `</s>`; unseen words are added
    /// when `grow` is set and map to `<unk>` otherwise.
    pub fn encode<S: AsRef<str>>(&mut self, words: &[S], grow: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(BOS);
        for w in words {
            let w = w.as_ref();
            ids.push(if grow { self.add(w) } else { self.id_or_unk(w) });
        }
        ids.push(EOS);
        ids
    }
}

/// Label names with ids in first-seen order and no reserved entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Labels {
    ids: HashMap<String, usize>,
    names: Vec<String>,
}

impl Labels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: Vec<String>) -> Self {
        let mut l = Self::new();
        for n in names {
            l.add(&n);
        }
        l
    }

    pub fn add(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationExample {
    /// Token ids including both boundary tokens.
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggingExample {
    /// Token ids including both boundary tokens.
    pub tokens: Vec<usize>,
    /// One tag per word, boundaries excluded.
    pub tags: Vec<usize>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Text embeddings: one token per line followed by `dim` floats.
///
/// Row layout of the returned matrix follows the vocabulary: `<pad>` is
/// zero, `<unk>` is the mean of all loaded vectors, `<s>` and `</s>` are
/// drawn uniformly from `(-0.05, 0.05)` with `seed`. When `keep` is given,
/// only listed tokens are retained (their mean still defines `<unk>`).
pub fn load_embeddings(
    path: &Path,
    dim: usize,
    seed: u64,
    keep: Option<&dyn Fn(&str) -> bool>,
) -> Result<(Vocab, Tensor)> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let text = fs::read_to_string(path)?;
    let mut vocab = Vocab::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(parse_err(path, ln, format!("expected {dim} values, found {}", values.len())));
        }
        let mut vec = Vec::with_capacity(dim);
        for v in values {
            let x: f64 = v
                .parse()
                .map_err(|_| parse_err(path, ln, format!("invalid number {v:?}")))?;
            vec.push(x);
        }
        if vocab.id_of(token).is_some() {
            continue;
        }
        for (s, x) in sum.iter_mut().zip(&vec) {
            *s += x;
        }
        count += 1;
        if keep.is_some_and(|k| !k(token)) {
            continue;
        }
        vocab.add(token);
        rows.extend(vec);
    }
    if count == 0 {
        return Err(parse_err(path, 0, "no embedding vectors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; dim];
    data.extend(sum.iter().map(|s| s / count as f64));
    data.extend(Tensor::uniform(&[2, dim], 0.05, &mut rng).into_data());
    data.extend(rows);
    let matrix = Tensor::matrix(vocab.len(), dim, data)?;
    Ok((vocab, matrix))
}

/// Random embedding rows for every vocabulary entry except `<pad>`.
pub fn random_embeddings(vocab: &Vocab, dim: usize, bound: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::uniform(&[vocab.len(), dim], bound, &mut rng);
    t.row_mut(PAD).fill(0.0);
    t
}

/// Lines of `label<TAB>text`; text is lowercased and split on whitespace.
pub fn load_classification_tsv(
    path: &Path,
    vocab: &mut Vocab,
    labels: &mut Labels,
    grow: bool,
) -> Result<Vec<ClassificationExample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            return Err(parse_err(path, ln + 1, "missing tab between label and text"));
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(parse_err(path, ln + 1, "empty label"));
        }
        let lower = body.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().collect();
        out.push(ClassificationExample {
            tokens: vocab.encode(&words, grow),
            label: labels.add(label),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConllOptions {
    /// Column holding the tag; the token is always column 0.
    pub column: usize,
    /// Convert BIO input to BIOES.
    pub to_bioes: bool,
    /// Replace every ASCII digit with `0`.
    pub normalize_digits: bool,
    pub grow: bool,
}

impl Default for ConllOptions {
    fn default() -> Self {
        Self {
            column: 3,
            to_bioes: true,
            normalize_digits: false,
            grow: true,
        }
    }
}

/// Sentences as `(words, tag strings)`; `-DOCSTART-` lines are skipped.
pub fn read_conll(path: &Path, column: usize) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut width = None;
    let mut flush = |words: &mut Vec<String>, tags: &mut Vec<String>, width: &mut Option<usize>| {
        if !words.is_empty() {
            out.push((std::mem::take(words), std::mem::take(tags)));
        }
        *width = None;
    };
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut words, &mut tags, &mut width);
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(parse_err(path, ln, format!("{} columns, sentence started with {w}", cols.len())));
            }
            _ => {}
        }
        let Some(tag) = cols.get(column) else {
            return Err(parse_err(path, ln, format!("tag column {column} out of range for {} columns", cols.len())));
        };
        words.push(cols[0].to_string());
        tags.push(tag.to_string());
    }
    flush(&mut words, &mut tags, &mut width);
    Ok(out)
}

/// Column-format tagging corpus; case is preserved.
pub fn load_conll(path: &Path, vocab: &mut Vocab, labels: &mut Labels, opts: ConllOptions) -> Result<Vec<TaggingExample>> {
    let sentences = read_conll(path, opts.column)?;
    let mut out = Vec::with_capacity(sentences.len());
    for (words, tags) in sentences {
        let tags = if opts.to_bioes { tags::bio_to_bioes(&tags).0 } else { tags };
        let words: Vec<String> = if opts.normalize_digits {
            words
                .into_iter()
                .map(|w| w.chars().map(|c| if c.is_ascii_digit() { '0' } else { c }).collect())
                .collect()
        } else {
            words
        };
        out.push(TaggingExample {
            tokens: vocab.encode(&words, opts.grow),
            tags: tags.iter().map(|t| labels.add(t)).collect(),
        });
    }
    Ok(out)
}
