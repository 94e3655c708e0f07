//! Documents, datasets, the aux/victim/query partition and a synthetic corpus
//! generator whose label and attribute signal strengths are known.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Attribute value used for "not declared / unknown". Such documents are
/// skipped when training or scoring attribute inference.
pub const UNKNOWN_ATTRIBUTE: i64 = -1;

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub label: usize,
    pub attributes: BTreeMap<String, i64>,
}

impl Document {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: i64) -> Self {
        self.attributes.insert(name.into(), value);
        self
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn attribute(&self, name: &str) -> Option<i64> {
        self.attributes.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    documents: Vec<Document>,
    num_classes: usize,
    attribute_names: Vec<String>,
}

impl Dataset {
    /// Build a dataset, checking labels against `num_classes` and that every
    /// document declares every attribute.
    pub fn new(
        documents: Vec<Document>,
        num_classes: usize,
        attribute_names: Vec<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        for (i, doc) in documents.iter().enumerate() {
            if doc.label >= num_classes {
                return Err(Error::Validation(format!(
                    "document {i}: label {} >= num_classes {num_classes}",
                    doc.label
                )));
            }
            for name in &attribute_names {
                if !doc.attributes.contains_key(name) {
                    return Err(Error::Validation(format!(
                        "document {i}: missing attribute `{name}`"
                    )));
                }
            }
        }
        Ok(Self {
            documents,
            num_classes,
            attribute_names,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.text.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.documents.iter().map(|d| d.label).collect()
    }

    /// Documents at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            num_classes: self.num_classes,
            attribute_names: self.attribute_names.clone(),
        }
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(self.to_jsonl()?.as_bytes())?;
        out.flush()?;
        Ok(())
    }

    /// Serialize as JSONL: a header line declaring K and the attribute names,
    /// then one record per document.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&JsonlHeader {
            num_classes: self.num_classes,
            attributes: self.attribute_names.clone(),
        })?;
        s.push('\n');
        for doc in &self.documents {
            s.push_str(&serde_json::to_string(&JsonlRecord {
                text: doc.text.clone(),
                label: doc.label as i64,
                attributes: doc.attributes.clone(),
            })?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    num_classes: usize,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    label: i64,
    #[serde(default)]
    attributes: BTreeMap<String, i64>,
}

/// Load a JSONL corpus. An optional first line `{"num_classes": K,
/// "attributes": [...]}` declares K and the attribute names; otherwise
/// K = 1 + max label and the attribute names are those of the first record.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut header: Option<JsonlHeader> = None;
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if docs.is_empty() && header.is_none() {
            let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if value.get("num_classes").is_some() && value.get("text").is_none() {
                header = Some(serde_json::from_value(value).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?);
                continue;
            }
        }
        let rec: JsonlRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.label < 0 {
            return Err(Error::Validation(format!(
                "line {line_no}: negative label {}",
                rec.label
            )));
        }
        if let Some(h) = &header {
            if rec.label as usize >= h.num_classes {
                return Err(Error::Validation(format!(
                    "line {line_no}: label {} >= declared num_classes {}",
                    rec.label, h.num_classes
                )));
            }
        }
        docs.push((
            line_no,
            Document {
                text: rec.text,
                label: rec.label as usize,
                attributes: rec.attributes,
            },
        ));
    }
    if docs.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let (num_classes, attribute_names) = match header {
        Some(h) => (h.num_classes, h.attributes),
        None => {
            let max_label = docs.iter().map(|(_, d)| d.label).max().unwrap_or(0);
            let names = docs[0].1.attributes.keys().cloned().collect();
            ((max_label + 1).max(2), names)
        }
    };
    for (line_no, doc) in &docs {
        for name in &attribute_names {
            if !doc.attributes.contains_key(name) {
                return Err(Error::Validation(format!(
                    "line {line_no}: missing attribute `{name}`"
                )));
            }
        }
    }
    Dataset::new(
        docs.into_iter().map(|(_, d)| d).collect(),
        num_classes,
        attribute_names,
    )
}

// ---------------------------------------------------------------------------
// Synthetic generator

fn default_block() -> usize {
    20
}

fn default_overlap() -> f64 {
    1.0
}

fn default_tag() -> String {
    "x".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    /// Marginal probability that the attribute takes value 1.
    pub probability: f64,
    /// Exponential tilt applied to the value's token block.
    pub strength: f64,
    /// Shifts the label prior, in units of `strength`: value 1 of the `j`-th
    /// attribute favours the classes whose bit `j mod ceil(log2 K)` is 0 and
    /// value 0 the others. Has no effect when `strength` is 0.
    #[serde(default)]
    pub label_coupling: f64,
    /// Value `v` of the `j`-th attribute also raises the label block of
    /// class `(2j + v) mod K` by `strength * topic_coupling`, so the value
    /// shows up as a secondary topic. Has no effect when `strength` is 0.
    #[serde(default)]
    pub topic_coupling: f64,
}

/// Configuration of the synthetic generator.
///
/// Attribute values are drawn first; the label is then drawn from a prior
/// that `label_coupling` tilts by attribute value. The vocabulary is laid
/// out as K label blocks, then two blocks per attribute (one per value), then background tokens. Every token has base
/// log-weight 0; the block of the document's label gets `label_strength`
/// added and the block of each attribute's value gets that attribute's
/// `strength` added. Tokens are drawn i.i.d. from the resulting softmax.
///
/// `domain_overlap < 1` renames the tail of every block to tokens prefixed
/// with `domain_tag`, producing a corpus with the same label semantics but a
/// partially disjoint vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub label_strength: f64,
    #[serde(default = "default_block")]
    pub label_block_size: usize,
    #[serde(default = "default_block")]
    pub attribute_block_size: usize,
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
    pub min_len: usize,
    pub max_len: usize,
    pub num_docs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_overlap")]
    pub domain_overlap: f64,
    #[serde(default = "default_tag")]
    pub domain_tag: String,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(self.label_strength >= 0.0 && self.label_strength.is_finite()) {
            return err("label_strength must be finite and >= 0".into());
        }
        if self.label_block_size == 0 || self.attribute_block_size == 0 {
            return err("block sizes must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return err(format!(
                "document length range [{}, {}] is invalid",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.domain_overlap) {
            return err("domain_overlap must lie in [0, 1]".into());
        }
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return err(format!("duplicate attribute `{}`", a.name));
            }
            if !(0.0..=1.0).contains(&a.probability) {
                return err(format!("attribute `{}`: probability outside [0, 1]", a.name));
            }
            if !(a.strength >= 0.0 && a.strength.is_finite()) {
                return err(format!("attribute `{}`: strength must be >= 0", a.name));
            }
            if !(a.label_coupling >= 0.0 && a.label_coupling.is_finite()) {
                return err(format!("attribute `{}`: label_coupling must be >= 0", a.name));
            }
            if !(a.topic_coupling >= 0.0 && a.topic_coupling.is_finite()) {
                return err(format!("attribute `{}`: topic_coupling must be >= 0", a.name));
            }
        }
        if self.reserved_tokens() >= self.vocab_size {
            return err(format!(
                "vocab_size {} too small for {} label and {} attribute tokens plus background",
                self.vocab_size,
                self.num_classes * self.label_block_size,
                2 * self.attributes.len() * self.attribute_block_size
            ));
        }
        Ok(())
    }

    fn reserved_tokens(&self) -> usize {
        self.num_classes * self.label_block_size
            + 2 * self.attributes.len() * self.attribute_block_size
    }
}

/// A contiguous id range in the synthetic vocabulary.
#[derive(Clone, Copy)]
struct Block {
    start: usize,
    len: usize,
}

struct Vocab {
    label_blocks: Vec<Block>,
    attribute_blocks: Vec<[Block; 2]>,
    background: Block,
    shared_prefix: Vec<usize>,
    overlap: f64,
    tag: String,
}

impl Vocab {
    fn new(cfg: &SynthConfig) -> Self {
        let mut next = 0;
        let mut take = |len: usize| {
            let b = Block { start: next, len };
            next += len;
            b
        };
        let label_blocks = (0..cfg.num_classes)
            .map(|_| take(cfg.label_block_size))
            .collect();
        let attribute_blocks = cfg
            .attributes
            .iter()
            .map(|_| [take(cfg.attribute_block_size), take(cfg.attribute_block_size)])
            .collect();
        let background = take(cfg.vocab_size - cfg.reserved_tokens());
        Self {
            label_blocks,
            attribute_blocks,
            background,
            shared_prefix: Vec::new(),
            overlap: cfg.domain_overlap,
            tag: cfg.domain_tag.clone(),
        }
        .with_shared_prefixes()
    }

    fn with_shared_prefixes(mut self) -> Self {
        let all: Vec<Block> = self
            .label_blocks
            .iter()
            .copied()
            .chain(self.attribute_blocks.iter().flat_map(|b| b.iter().copied()))
            .chain(std::iter::once(self.background))
            .collect();
        self.shared_prefix = all
            .iter()
            .map(|b| (self.overlap * b.len as f64).round() as usize)
            .collect();
        self
    }

    fn token(&self, block_idx: usize, block: Block, offset: usize) -> String {
        let id = block.start + offset;
        if offset < self.shared_prefix[block_idx] {
            format!("w{id}")
        } else {
            format!("{}{id}", self.tag)
        }
    }
}

/// Generate a synthetic corpus. Pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_classes;
    let n_attr = cfg.attributes.len();
    let background_idx = k + 2 * n_attr;

    let mut docs = Vec::with_capacity(cfg.num_docs);
    let mut masses: Vec<(usize, Block, f64)> = Vec::with_capacity(background_idx + 1);
    for _ in 0..cfg.num_docs {
        let values: Vec<i64> = cfg
            .attributes
            .iter()
            .map(|a| i64::from(rng.random::<f64>() < a.probability))
            .collect();

        let bits = (usize::BITS - (k - 1).leading_zeros()).max(1) as usize;
        let mut label_logits = vec![0.0; k];
        for (j, (spec, &v)) in cfg.attributes.iter().zip(&values).enumerate() {
            let push = spec.strength * spec.label_coupling * if v == 1 { 1.0 } else { -1.0 };
            for (c, logit) in label_logits.iter_mut().enumerate() {
                *logit += if (c >> (j % bits)) & 1 == 0 { push } else { -push };
            }
        }
        let label = sample_softmax(&label_logits, &mut rng);

        masses.clear();
        let mut label_tilt = vec![0.0; k];
        label_tilt[label] = cfg.label_strength;
        for (j, (spec, &v)) in cfg.attributes.iter().zip(&values).enumerate() {
            label_tilt[(2 * j + v as usize) % k] += spec.strength * spec.topic_coupling;
        }
        for (c, b) in vocab.label_blocks.iter().enumerate() {
            masses.push((c, *b, b.len as f64 * label_tilt[c].exp()));
        }
        for (j, blocks) in vocab.attribute_blocks.iter().enumerate() {
            for (v, b) in blocks.iter().enumerate() {
                let tilt = if values[j] == v as i64 {
                    cfg.attributes[j].strength
                } else {
                    0.0
                };
                masses.push((k + 2 * j + v, *b, b.len as f64 * tilt.exp()));
            }
        }
        masses.push((background_idx, vocab.background, vocab.background.len as f64));
        let total: f64 = masses.iter().map(|m| m.2).sum();

        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = masses[masses.len() - 1];
            for m in &masses {
                if u < m.2 {
                    chosen = *m;
                    break;
                }
                u -= m.2;
            }
            let (block_idx, block, _) = chosen;
            let offset = rng.random_range(0..block.len);
            words.push(vocab.token(block_idx, block, offset));
        }

        let attributes = cfg
            .attributes
            .iter()
            .zip(values)
            .map(|(a, v)| (a.name.clone(), v))
            .collect();
        docs.push(Document {
            text: words.join(" "),
            label,
            attributes,
        });
    }
    Dataset::new(
        docs,
        k,
        cfg.attributes.iter().map(|a| a.name.clone()).collect(),
    )
}

fn sample_softmax(logits: &[f64], rng: &mut impl Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    logits.len() - 1
}

// ---------------------------------------------------------------------------
// Partition

fn default_aux_fraction() -> f64 {
    0.10
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_aux_fraction")]
    pub aux_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            aux_fraction: default_aux_fraction(),
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.aux_fraction > 0.0 && self.aux_fraction < 1.0) {
            return Err(Error::Config(format!(
                "aux_fraction must lie in (0, 1), got {}",
                self.aux_fraction
            )));
        }
        Ok(())
    }
}

/// The three disjoint parts of a corpus: attribute-labelled auxiliary data,
/// the victim's training data and the attacker's same-domain query pool.
#[derive(Clone, Debug)]
pub struct Split {
    pub aux: Dataset,
    pub victim: Dataset,
    pub query: Dataset,
}

/// Shuffle with `spec.seed`, take ⌊aux_fraction·n⌋ documents as D_aux and
/// halve the remainder into D_V and D_Q; an odd remainder gives D_V the extra
/// document. Each part keeps the original relative order of its documents.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if ds.len() < 10 {
        return Err(Error::Validation(format!(
            "split needs at least 10 documents, got {}",
            ds.len()
        )));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let n_aux = (spec.aux_fraction * n as f64).floor() as usize;
    let rest = n - n_aux;
    let n_victim = rest.div_ceil(2);

    let mut aux = order[..n_aux].to_vec();
    let mut victim = order[n_aux..n_aux + n_victim].to_vec();
    let mut query = order[n_aux + n_victim..].to_vec();
    aux.sort_unstable();
    victim.sort_unstable();
    query.sort_unstable();
    Ok(Split {
        aux: ds.subset(&aux),
        victim: ds.subset(&victim),
        query: ds.subset(&query),
    })
}

// ---------------------------------------------------------------------------
// Lexical overlap

fn ngram_set<'a>(texts: impl Iterator<Item = &'a str>, n: usize) -> HashSet<String> {
    let mut set = HashSet::new();
    for text in texts {
        let toks = tokenize(text);
        for w in toks.windows(n) {
            set.insert(w.join(" "));
        }
    }
    set
}

/// Type-level recall of the test set's distinct n-grams among the queries'.
pub fn ngram_recall_overlap(queries: &Dataset, test: &Dataset, n: usize) -> Result<f64> {
    let q: Vec<&str> = queries.documents.iter().map(|d| d.text.as_str()).collect();
    let t: Vec<&str> = test.documents.iter().map(|d| d.text.as_str()).collect();
    text_ngram_recall(&q, &t, n)
}

/// [`ngram_recall_overlap`] over raw texts.
pub fn text_ngram_recall<S: AsRef<str>>(queries: &[S], test: &[S], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be >= 1".into()));
    }
    let test_set = ngram_set(test.iter().map(AsRef::as_ref), n);
    if test_set.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "test set has no document with at least {n} tokens"
        )));
    }
    let query_set = ngram_set(queries.iter().map(AsRef::as_ref), n);
    let hits = test_set.iter().filter(|g| query_set.contains(*g)).count();
    Ok(hits as f64 / test_set.len() as f64)
}
