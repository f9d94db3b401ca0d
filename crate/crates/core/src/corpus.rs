//! Datasets: token and label vocabularies, the whitespace/punctuation
//! tokenizer, JSON-lines I/O and the synthetic corpus generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! train.jsonl   {"id": 17, "text": "...", "labels": [3, 9]}   one per line
//! test.jsonl    same schema
//! labels.tsv    "<id>\t<label text>"                          one per line
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};

pub type TokenId = u32;
pub type LabelId = usize;

pub const CLS: TokenId = 0;
pub const PAD: TokenId = 1;
pub const UNK: TokenId = 2;

const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const LABELS_FILE: &str = "labels.tsv";

/// Lowercases and splits on every non-alphanumeric character.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TokenVocabulary {
    /// Builds a vocabulary over the normalized words of `texts`, ids assigned
    /// in lexicographic order after the reserved ids.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        Self::from_words(words)
    }

    /// `words` must not repeat and must not contain the reserved tokens.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Corpus tokens in id order, reserved tokens excluded.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Maps normalized words of `text`, without CLS or padding.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        normalize(text).iter().map(|w| self.id(w)).collect()
    }
}

impl Serialize for TokenVocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.corpus_tokens().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        Ok(Self::from_words(words))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<TokenId>,
    /// The text had no tokens after normalization.
    pub empty: bool,
    pub truncated: bool,
}

/// CLS, then the head of the mapped words, right-padded to exactly `max_len`.
pub fn tokenize(text: &str, vocab: &TokenVocabulary, max_len: usize) -> Result<Tokenized> {
    if max_len < 2 {
        return Err(config_err(format!("max_len must be >= 2, got {max_len}")));
    }
    let words = vocab.encode_words(text);
    let truncated = words.len() > max_len - 1;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(words.iter().take(max_len - 1));
    ids.resize(max_len, PAD);
    Ok(Tokenized {
        ids,
        empty: words.is_empty(),
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    texts: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(texts: Vec<String>) -> Result<Self> {
        for (id, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(data_err(format!("label {id} has empty text")));
            }
        }
        Ok(Self { texts })
    }

    /// Accepts `(id, text)` pairs in any order; ids must cover `0..L` exactly.
    pub fn from_entries(mut entries: Vec<(LabelId, String)>) -> Result<Self> {
        entries.sort_by_key(|(id, _)| *id);
        for (pos, (id, _)) in entries.iter().enumerate() {
            if *id != pos {
                return Err(data_err(if *id < pos {
                    format!("duplicate label id {id}")
                } else {
                    format!("label ids have a gap: missing {pos}")
                }));
            }
        }
        Self::new(entries.into_iter().map(|(_, t)| t).collect())
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, id: LabelId) -> &str {
        &self.texts[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (LabelId, &str)> {
        self.texts.iter().map(String::as_str).enumerate()
    }
}

/// One line of a JSONL sample file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: u64,
    pub text: String,
    #[serde(default)]
    pub labels: Vec<LabelId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub text: String,
    pub text_tokens: Vec<TokenId>,
    /// Sorted, deduplicated.
    pub positive_labels: Vec<LabelId>,
    /// CLS followed by the tokens of every positive label, unpadded. Only
    /// filled for training samples.
    pub label_tokens: Option<Vec<TokenId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub trn: usize,
    pub tst: usize,
    pub lbl: usize,
    /// Mean training samples per label.
    pub spl: f64,
    /// Mean labels per training sample.
    pub lps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub labels: LabelVocabulary,
    pub tokens: TokenVocabulary,
    pub stats: DatasetStats,
    pub max_input_len: usize,
    label_groups: Vec<Vec<TokenId>>,
}

impl DatasetBundle {
    /// Assembles a bundle, building the token vocabulary over training text
    /// and label text.
    pub fn from_raw(
        train: Vec<RawSample>,
        test: Vec<RawSample>,
        labels: LabelVocabulary,
        max_input_len: usize,
    ) -> Result<Self> {
        let texts = train
            .iter()
            .map(|s| s.text.as_str())
            .chain(labels.iter().map(|(_, t)| t));
        let tokens = TokenVocabulary::from_texts(texts);
        Self::with_vocab(train, test, labels, tokens, max_input_len)
    }

    pub fn with_vocab(
        train: Vec<RawSample>,
        test: Vec<RawSample>,
        labels: LabelVocabulary,
        tokens: TokenVocabulary,
        max_input_len: usize,
    ) -> Result<Self> {
        let label_groups: Vec<Vec<TokenId>> = labels
            .iter()
            .map(|(_, t)| tokens.encode_words(t))
            .collect();
        let build = |raw: RawSample, training: bool| -> Result<Sample> {
            let mut positive: Vec<LabelId> = raw.labels.clone();
            positive.sort_unstable();
            positive.dedup();
            if let Some(&bad) = positive.iter().find(|&&l| l >= labels.len()) {
                return Err(data_err(format!(
                    "sample {}: label id {bad} out of range (L = {})",
                    raw.id,
                    labels.len()
                )));
            }
            if training && positive.is_empty() {
                return Err(data_err(format!(
                    "training sample {} has no positive labels",
                    raw.id
                )));
            }
            let text_tokens = tokenize(&raw.text, &tokens, max_input_len)?.ids;
            let label_tokens = training.then(|| {
                let mut seq = vec![CLS];
                for &l in &positive {
                    seq.extend_from_slice(&label_groups[l]);
                }
                seq
            });
            Ok(Sample {
                sample_id: raw.id,
                text: raw.text,
                text_tokens,
                positive_labels: positive,
                label_tokens,
            })
        };
        let train: Vec<Sample> = train
            .into_iter()
            .map(|r| build(r, true))
            .collect::<Result<_>>()?;
        let test: Vec<Sample> = test
            .into_iter()
            .map(|r| build(r, false))
            .collect::<Result<_>>()?;
        let stats = compute_stats(&train, test.len(), labels.len());
        Ok(Self {
            train,
            test,
            labels,
            tokens,
            stats,
            max_input_len,
            label_groups,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Token body (no CLS, no padding) of each label's text.
    pub fn label_group(&self, label: LabelId) -> &[TokenId] {
        &self.label_groups[label]
    }

    /// Token groups of a sample's positive labels, in label-id order.
    pub fn label_groups_of(&self, sample: &Sample) -> Vec<Vec<TokenId>> {
        sample
            .positive_labels
            .iter()
            .map(|&l| self.label_groups[l].clone())
            .collect()
    }

    /// Same samples and vocabulary, texts re-cut to a new input length.
    pub fn retokenize(&self, max_input_len: usize) -> Result<Self> {
        let mut out = self.clone();
        for s in out.train.iter_mut().chain(out.test.iter_mut()) {
            s.text_tokens = tokenize(&s.text, &out.tokens, max_input_len)?.ids;
        }
        out.max_input_len = max_input_len;
        Ok(out)
    }

    fn raw(samples: &[Sample]) -> Vec<RawSample> {
        samples
            .iter()
            .map(|s| RawSample {
                id: s.sample_id,
                text: s.text.clone(),
                labels: s.positive_labels.clone(),
            })
            .collect()
    }

    /// Writes `train.jsonl`, `test.jsonl` and `labels.tsv` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(TRAIN_FILE), &Self::raw(&self.train))?;
        write_jsonl(&dir.join(TEST_FILE), &Self::raw(&self.test))?;
        let mut out = fs::File::create(dir.join(LABELS_FILE))?;
        for (id, text) in self.labels.iter() {
            if text.contains(['\n', '\r', '\t']) {
                return Err(data_err(format!(
                    "label {id} text contains a tab or newline"
                )));
            }
            writeln!(out, "{id}\t{text}")?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path, max_input_len: usize) -> Result<Self> {
        load_jsonl(
            &dir.join(TRAIN_FILE),
            &dir.join(TEST_FILE),
            &dir.join(LABELS_FILE),
            max_input_len,
        )
    }
}

fn compute_stats(train: &[Sample], tst: usize, lbl: usize) -> DatasetStats {
    let total: usize = train.iter().map(|s| s.positive_labels.len()).sum();
    let trn = train.len();
    DatasetStats {
        trn,
        tst,
        lbl,
        spl: if lbl == 0 { 0.0 } else { total as f64 / lbl as f64 },
        lps: if trn == 0 { 0.0 } else { total as f64 / trn as f64 },
    }
}

pub fn read_samples(path: &Path) -> Result<Vec<RawSample>> {
    let file = fs::File::open(path)
        .map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: RawSample = serde_json::from_str(&line).map_err(|e| {
            data_err(format!("{}: line {}: malformed sample: {e}", path.display(), i + 1))
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<LabelVocabulary> {
    let file = fs::File::open(path)
        .map_err(|e| data_err(format!("cannot open {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = || data_err(format!("{}: line {}: expected \"id<TAB>text\"", path.display(), i + 1));
        let (id, text) = line.split_once('\t').ok_or_else(malformed)?;
        let id: LabelId = id.trim().parse().map_err(|_| malformed())?;
        entries.push((id, text.to_string()));
    }
    LabelVocabulary::from_entries(entries)
}

fn write_jsonl(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_jsonl(
    path_train: &Path,
    path_test: &Path,
    path_labels: &Path,
    max_input_len: usize,
) -> Result<DatasetBundle> {
    let labels = read_labels(path_labels)?;
    let train = read_samples(path_train)?;
    let test = read_samples(path_test)?;
    DatasetBundle::from_raw(train, test, labels, max_input_len)
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_labels: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub labels_per_sample: usize,
    pub noise_tokens: usize,
    /// Probability that a label's text carries its signature words.
    pub semantic_strength: f64,
    pub seed: u64,
    /// Signature words owned by each label.
    pub signature_words: usize,
    /// Size of the shared noise-word pool; `None` picks `max(32, 4 L)`.
    pub noise_vocab: Option<usize>,
    pub max_input_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_labels: 16,
            n_train: 200,
            n_test: 50,
            labels_per_sample: 2,
            noise_tokens: 5,
            semantic_strength: 1.0,
            seed: 7,
            signature_words: 2,
            noise_vocab: None,
            max_input_len: 32,
        }
    }
}

pub fn signature_word(label: LabelId, j: usize) -> String {
    format!("l{label}w{j}")
}

/// Generates a bundle where every sample text contains the signature words
/// of all its labels plus uniformly drawn noise words. A label's text is its
/// signature words with probability `semantic_strength`, otherwise an opaque
/// symbol sharing no words with any text.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    let l = cfg.num_labels;
    if cfg.labels_per_sample == 0 || cfg.labels_per_sample > l {
        return Err(config_err(format!(
            "need L >= labels_per_sample >= 1, got L = {l}, labels_per_sample = {}",
            cfg.labels_per_sample
        )));
    }
    if !(0.0..=1.0).contains(&cfg.semantic_strength) {
        return Err(config_err("semantic_strength must lie in [0, 1]"));
    }
    if cfg.signature_words == 0 {
        return Err(config_err("signature_words must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise_vocab = cfg.noise_vocab.unwrap_or((4 * l).max(32));
    let noise: Vec<String> = (0..noise_vocab).map(|k| format!("n{k}")).collect();

    let mut symbols = BTreeSet::new();
    let mut label_texts = Vec::with_capacity(l);
    for label in 0..l {
        if rng.gen_bool(cfg.semantic_strength) {
            let words: Vec<String> = (0..cfg.signature_words)
                .map(|j| signature_word(label, j))
                .collect();
            label_texts.push(words.join(" "));
        } else {
            let sym = loop {
                let code: String = (0..6)
                    .map(|_| {
                        let c = rng.gen_range(0..36u8);
                        if c < 26 {
                            (b'a' + c) as char
                        } else {
                            (b'0' + c - 26) as char
                        }
                    })
                    .collect();
                let sym = format!("x{code}");
                if symbols.insert(sym.clone()) {
                    break sym;
                }
            };
            label_texts.push(sym);
        }
    }
    let labels = LabelVocabulary::new(label_texts)?;

    let all_labels: Vec<LabelId> = (0..l).collect();
    let mut make = |count: usize, id_base: u64| -> Vec<RawSample> {
        (0..count)
            .map(|i| {
                let mut chosen: Vec<LabelId> = all_labels
                    .choose_multiple(&mut rng, cfg.labels_per_sample)
                    .copied()
                    .collect();
                chosen.sort_unstable();
                let mut words: Vec<String> = chosen
                    .iter()
                    .flat_map(|&lab| (0..cfg.signature_words).map(move |j| signature_word(lab, j)))
                    .collect();
                words.extend((0..cfg.noise_tokens).map(|_| noise[rng.gen_range(0..noise.len())].clone()));
                words.shuffle(&mut rng);
                RawSample {
                    id: id_base + i as u64,
                    text: words.join(" "),
                    labels: chosen,
                }
            })
            .collect()
    };
    let train = make(cfg.n_train, 0);
    let test = make(cfg.n_test, cfg.n_train as u64);
    DatasetBundle::from_raw(train, test, labels, cfg.max_input_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> TokenVocabulary {
        TokenVocabulary::from_words(words.iter().map(|s| s.to_string()))
    }

    #[test]
    fn tokenize_maps_and_pads() {
        let v = vocab(&["machine", "learning"]);
        assert_eq!(v.id("machine"), 3);
        assert_eq!(v.id("learning"), 4);
        let t = tokenize("machine learning", &v, 5).unwrap();
        assert_eq!(t.ids, vec![0, 3, 4, 1, 1]);
        assert!(!t.empty);
    }

    #[test]
    fn tokenize_empty_and_unknown() {
        let v = vocab(&["machine"]);
        let t = tokenize("", &v, 4).unwrap();
        assert_eq!(t.ids, vec![0, 1, 1, 1]);
        assert!(t.empty);
        let t = tokenize("  ...  ", &v, 4).unwrap();
        assert!(t.empty);
        let t = tokenize("Machine, DEEP!", &v, 4).unwrap();
        assert_eq!(t.ids, vec![0, 3, UNK, PAD]);
        assert!(tokenize("x", &v, 1).is_err());
    }

    #[test]
    fn tokenize_truncates_head() {
        let words: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let v = TokenVocabulary::from_words(words.iter().cloned());
        let long = words[..510].join(" ");
        let t = tokenize(&long, &v, 512).unwrap();
        assert_eq!(t.ids.len(), 512);
        assert_eq!(t.ids.iter().filter(|&&i| i == PAD).count(), 1);
        let longer = words.join(" ");
        let t = tokenize(&longer, &v, 512).unwrap();
        assert!(t.truncated);
        assert_eq!(t.ids[1], v.id("w0"));
        assert_eq!(t.ids[511], v.id("w510"));
    }

    #[test]
    fn label_vocabulary_validation() {
        assert!(LabelVocabulary::from_entries(vec![(1, "b".into()), (0, "a".into())]).is_ok());
        assert!(LabelVocabulary::from_entries(vec![(0, "a".into()), (2, "c".into())]).is_err());
        assert!(LabelVocabulary::from_entries(vec![(0, "a".into()), (0, "b".into())]).is_err());
        assert!(LabelVocabulary::new(vec!["  ".into()]).is_err());
    }

    #[test]
    fn two_sample_stats_and_dedup() {
        let labels = LabelVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let train = vec![
            RawSample { id: 1, text: "a b".into(), labels: vec![0, 1, 1] },
            RawSample { id: 2, text: "c".into(), labels: vec![2] },
        ];
        let b = DatasetBundle::from_raw(train, vec![], labels, 8).unwrap();
        assert_eq!(b.train[0].positive_labels, vec![0, 1]);
        assert_eq!(b.stats.trn, 2);
        assert_eq!(b.stats.lbl, 3);
        assert_eq!(b.stats.lps, 1.5);
        assert_eq!(b.stats.spl, 1.0);
        assert_eq!(b.train[0].label_tokens.as_deref(), Some(&[CLS, b.tokens.id("a"), b.tokens.id("b")][..]));
    }

    #[test]
    fn out_of_range_label_names_sample() {
        let labels = LabelVocabulary::new(vec!["a".into()]).unwrap();
        let train = vec![RawSample { id: 42, text: "a".into(), labels: vec![3] }];
        let err = DatasetBundle::from_raw(train, vec![], labels, 8).unwrap_err();
        assert!(err.to_string().contains("sample 42"), "{err}");
    }

    #[test]
    fn synthetic_contract() {
        let cfg = SynthConfig { num_labels: 16, n_train: 200, n_test: 50, labels_per_sample: 2, noise_tokens: 5, semantic_strength: 1.0, seed: 7, ..SynthConfig::default() };
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(b.train.len(), 200);
        assert_eq!(b.test.len(), 50);
        for s in b.train.iter().chain(&b.test) {
            assert_eq!(s.positive_labels.len(), 2);
            let words = normalize(&s.text);
            for &l in &s.positive_labels {
                for j in 0..cfg.signature_words {
                    assert!(words.contains(&signature_word(l, j)));
                }
            }
        }
        let symbolic = gen_synthetic(&SynthConfig { semantic_strength: 0.0, ..cfg }).unwrap();
        for (l, text) in symbolic.labels.iter() {
            for j in 0..2 {
                assert!(!normalize(text).contains(&signature_word(l, j)));
            }
            assert!(normalize(text).iter().all(|w| w.starts_with('x')));
        }
    }

    #[test]
    fn synthetic_rejects_bad_params() {
        let cfg = SynthConfig { num_labels: 2, labels_per_sample: 3, ..SynthConfig::default() };
        assert!(gen_synthetic(&cfg).is_err());
    }
}
