//! Tokenized corpora, joint BPE, the shared vocabulary, noise-removal
//! filtering and deterministic batching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synthlang::SentencePair;

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const N_SPECIALS: usize = 5;
pub const SPECIALS: [&str; N_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

/// Continuation marker appended to non-final subwords.
pub const BPE_MARKER: &str = "@@";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Src,
    Tgt,
    SrcReordered,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Src => "src",
            Side::Tgt => "tgt",
            Side::SrcReordered => "src-reordered",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Word-level corpus, one sentence per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCorpus {
    pub side: Side,
    pub sentences: Vec<Vec<String>>,
}

impl TextCorpus {
    pub fn new(side: Side, sentences: Vec<Vec<String>>) -> Self {
        TextCorpus { side, sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_lines(path, self.sentences.iter().map(|s| s.join(" ")))
    }

    pub fn read_from(path: &Path, side: Side) -> Result<Self> {
        let sentences = read_lines(path)?
            .into_iter()
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect();
        Ok(TextCorpus::new(side, sentences))
    }
}

pub(crate) fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Artifact { path: path.into(), msg: e.to_string() })?;
    std::io::BufReader::new(f).lines().map(|l| l.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub origin: String,
    pub fingerprint: String,
}

/// Integer-encoded corpus over a [`Vocab`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub side: Side,
    pub sentences: Vec<TokenSeq>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.sentences.iter().map(Vec::len).max().unwrap_or(0)
    }
}

// ---------------------------------------------------------------- vocab

/// Joint token vocabulary with the five specials at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(SPECIALS[UNK as usize])
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Non-special tokens in id order.
    pub fn regular_tokens(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.tokens.iter().enumerate().skip(N_SPECIALS).map(|(i, t)| (i as TokenId, t.as_str()))
    }

    pub fn encode(&self, subwords: &[String]) -> TokenSeq {
        subwords.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = sha2::Sha256::new();
        for t in &self.tokens {
            sha2::Digest::update(&mut h, t.as_bytes());
            sha2::Digest::update(&mut h, b"\n");
        }
        hex::encode(sha2::Digest::finalize(h))
    }

    /// `token<TAB>id` lines.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        write_lines(path, self.tokens.iter().enumerate().map(|(i, t)| format!("{t}\t{i}")))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let mut tokens = Vec::with_capacity(lines.len());
        for (n, line) in lines.iter().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Corpus(format!("vocab line {} is not token<TAB>id", n + 1)))?;
            let id: usize = id.parse().map_err(|_| Error::Corpus(format!("bad id on vocab line {}", n + 1)))?;
            if id != n {
                return Err(Error::Corpus(format!("vocab ids must be dense; line {} has id {id}", n + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < N_SPECIALS || tokens[..N_SPECIALS] != SPECIALS {
            return Err(Error::Corpus("vocab file does not start with the reserved specials".into()));
        }
        Vocab::from_tokens(tokens.into_iter().skip(N_SPECIALS))
    }
}

use sha2::Digest as _;

/// Joint vocabulary over segmented corpora. Tokens are ordered by descending
/// count, ties broken lexicographically; tokens below `min_count` are left
/// out and encode to `<unk>`.
pub fn build_vocab<'a, I>(corpora: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a [Vec<String>]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for corpus in corpora {
        for s in corpus {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
}

// ------------------------------------------------------------------ bpe

/// Ordered merge list. Merges apply within words only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub fingerprint: String,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, fingerprint: String) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        BpeModel { merges, fingerprint, ranks }
    }

    /// One merge pair per line, in learning order, after a fingerprint header.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let header = std::iter::once(format!("#fingerprint {}", self.fingerprint));
        write_lines(path, header.chain(self.merges.iter().map(|(a, b)| format!("{a} {b}"))))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut fingerprint = String::new();
        let mut merges = Vec::new();
        for (n, line) in read_lines(path)?.into_iter().enumerate() {
            if let Some(fp) = line.strip_prefix("#fingerprint ") {
                fingerprint = fp.to_string();
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Corpus(format!("bad merge on line {}", n + 1)))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel::new(merges, fingerprint))
    }

    /// Segments one word into subwords, marking all but the last with `@@`.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == *a && parts[i + 1] == *b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        let n = parts.len();
        parts
            .into_iter()
            .enumerate()
            .map(|(i, p)| if i + 1 < n { format!("{p}{BPE_MARKER}") } else { p })
            .collect()
    }
}

/// Learns merges jointly over all corpora (words are whitespace-separated
/// tokens). Each step merges the most frequent adjacent symbol pair; ties go
/// to the lexicographically smallest pair. Stops early once no pair occurs
/// at least twice.
pub fn learn_bpe<'a, I>(corpora: I, n_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a [Vec<String>]>,
{
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fp = sha2::Sha256::new();
    for corpus in corpora {
        for s in corpus {
            for w in s {
                *word_counts.entry(w.as_str()).or_default() += 1;
                fp.update(w.as_bytes());
                fp.update(b" ");
            }
            fp.update(b"\n");
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Corpus("cannot learn BPE from an empty corpus".into()));
    }
    let fingerprint = hex::encode(fp.finalize());
    let mut words: Vec<(Vec<String>, usize)> =
        word_counts.into_iter().map(|(w, c)| (w.chars().map(String::from).collect(), c)).collect();
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order; keep the first maximum.
        let mut best: Option<((&str, &str), usize)> = None;
        for (p, c) in pairs {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((p, c));
            }
        }
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == a && syms[i + 1] == b {
                    syms[i] = joined.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((a, b));
    }
    Ok(BpeModel::new(merges, fingerprint))
}

pub fn apply_bpe(model: &BpeModel, sentence: &[String]) -> Vec<String> {
    sentence.iter().flat_map(|w| model.segment_word(w)).collect()
}

/// Joins subwords back into words by removing continuation markers.
pub fn detokenize(subwords: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for s in subwords {
        match s.strip_suffix(BPE_MARKER) {
            Some(stem) => cur.push_str(stem),
            None => {
                cur.push_str(s);
                out.push(std::mem::take(&mut cur));
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ------------------------------------------------------- noise removal

/// An evaluation split together with the pair indices whose source failed to
/// reorder.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub pairs: Vec<SentencePair>,
    /// Oracle-reordered sources, index-aligned with `pairs`.
    pub reordered_src: Vec<Vec<String>>,
    pub failed: BTreeSet<usize>,
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub original: TextCorpus,
    pub reordered: TextCorpus,
    pub eval: Vec<EvalSplit>,
    pub removed_mono: BTreeSet<usize>,
}

fn keep<T: Clone>(items: &[T], drop: &BTreeSet<usize>) -> Vec<T> {
    items.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, x)| x.clone()).collect()
}

/// Drops every failed sentence from both the original and the reordered
/// monolingual corpus, and every failed pair (both sides) from each
/// evaluation split.
pub fn filter_noise_removal(
    original: &TextCorpus,
    reordered: &TextCorpus,
    failed_ids: &BTreeSet<usize>,
    eval: &[EvalSplit],
) -> Result<Filtered> {
    if original.len() != reordered.len() {
        return Err(Error::Corpus(format!(
            "original ({}) and reordered ({}) corpora are not index-aligned",
            original.len(),
            reordered.len()
        )));
    }
    if let Some(&bad) = failed_ids.iter().find(|&&i| i >= original.len()) {
        return Err(Error::Corpus(format!("failed id {bad} is out of range")));
    }
    let mut out_eval = Vec::with_capacity(eval.len());
    for split in eval {
        if split.pairs.len() != split.reordered_src.len() {
            return Err(Error::Corpus("evaluation pairs and reordered sources are misaligned".into()));
        }
        if split.failed.iter().any(|&i| i >= split.pairs.len()) {
            return Err(Error::Corpus("evaluation failed id out of range".into()));
        }
        out_eval.push(EvalSplit {
            pairs: keep(&split.pairs, &split.failed),
            reordered_src: keep(&split.reordered_src, &split.failed),
            failed: BTreeSet::new(),
        });
    }
    Ok(Filtered {
        original: TextCorpus::new(original.side, keep(&original.sentences, failed_ids)),
        reordered: TextCorpus::new(reordered.side, keep(&reordered.sentences, failed_ids)),
        eval: out_eval,
        removed_mono: failed_ids.clone(),
    })
}

// ------------------------------------------------------------ batching

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "size")]
pub enum BatchSize {
    Sentences(usize),
    /// Upper bound on `rows × padded length`.
    Tokens(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Corpus indices of the sentences in this batch.
    pub indices: Vec<usize>,
    /// Per-sentence noise seeds, `hash(base, epoch, index)`.
    pub seeds: Vec<u64>,
    /// Row-major `rows × width`, padded with [`PAD`].
    pub padded: Vec<TokenId>,
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.padded[r * self.width..r * self.width + self.lengths[r]]
    }
}

/// One epoch over a corpus in a seed-determined order.
pub struct BatchIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    pos: usize,
    size: BatchSize,
    base_seed: u64,
    epoch: u64,
}

pub fn batch_iter(corpus: &Corpus, size: BatchSize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot batch an empty corpus".into()));
    }
    match size {
        BatchSize::Sentences(0) | BatchSize::Tokens(0) => {
            return Err(Error::Corpus("batch size must be positive".into()))
        }
        _ => {}
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seed::rng(seed::mix(&[seed, epoch, 0x000b_47c4])));
    Ok(BatchIter { corpus, order, pos: 0, size, base_seed: seed, epoch })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let mut indices = Vec::new();
        let mut width = 0usize;
        while self.pos < self.order.len() {
            let idx = self.order[self.pos];
            let len = self.corpus.sentences[idx].len();
            let fits = match self.size {
                BatchSize::Sentences(n) => indices.len() < n,
                // A lone over-budget sentence still forms its own batch.
                BatchSize::Tokens(budget) => indices.is_empty() || (indices.len() + 1) * width.max(len) <= budget,
            };
            if !fits {
                break;
            }
            width = width.max(len);
            indices.push(idx);
            self.pos += 1;
        }
        let mut padded = vec![PAD; indices.len() * width];
        let mut lengths = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let s = &self.corpus.sentences[i];
            padded[r * width..r * width + s.len()].copy_from_slice(s);
            lengths.push(s.len());
        }
        let seeds = indices.iter().map(|&i| seed::sentence_seed(self.base_seed, self.epoch, i as u64)).collect();
        Some(Batch { indices, seeds, padded, width, lengths })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(ls: &[&str]) -> Vec<Vec<String>> {
        ls.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    fn corpus_of(lens: &[usize]) -> Corpus {
        Corpus {
            side: Side::Src,
            sentences: lens.iter().map(|&l| vec![7; l]).collect(),
            provenance: Provenance { origin: "test".into(), fingerprint: String::new() },
        }
    }

    #[test]
    fn hand_traced_first_merge() {
        // Words "abab" and "abc": (a,b) occurs 2 + 1 = 3 times, more than any other pair.
        let c = lines(&["abab", "abc"]);
        let m = learn_bpe([c.as_slice()], 1).unwrap();
        assert_eq!(m.merges, vec![("a".to_string(), "b".to_string())]);
        let m0 = learn_bpe([c.as_slice()], 0).unwrap();
        assert!(m0.merges.is_empty());
        assert_eq!(apply_bpe(&m0, &lines(&["abc"])[0]), vec!["a@@", "b@@", "c"]);
    }

    #[test]
    fn learning_stops_when_no_pair_repeats() {
        let c = lines(&["xy"]);
        assert!(learn_bpe([c.as_slice()], 10).unwrap().merges.is_empty());
        let empty: Vec<Vec<String>> = vec![];
        assert!(learn_bpe([empty.as_slice()], 10).is_err());
    }

    #[test]
    fn joint_learning_differs_from_source_only() {
        let src = lines(&["abab abab", "abc"]);
        let tgt = lines(&["QRQR QRQR QRQR QRQR"]);
        let solo = learn_bpe([src.as_slice()], 2).unwrap();
        let joint = learn_bpe([src.as_slice(), tgt.as_slice()], 2).unwrap();
        assert_eq!(joint.merges[0], ("Q".to_string(), "R".to_string()));
        assert_ne!(solo.merges, joint.merges);
    }

    #[test]
    fn segmentation_cases() {
        let c = lines(&["abab abab", "abc"]);
        let m = learn_bpe([c.as_slice()], 10).unwrap();
        // (a,b) then (ab,ab) chain "abab" to a single token.
        assert_eq!(m.segment_word("abab"), vec!["abab"]);
        assert_eq!(m.segment_word("zq"), vec!["z@@", "q"]);
        let s = lines(&["abab zq abc"])[0].clone();
        assert_eq!(apply_bpe(&m, &s), apply_bpe(&m, &s));
        assert_eq!(detokenize(&apply_bpe(&m, &s)), s);
    }

    #[test]
    fn bpe_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = lines(&["abab abab", "abc cab"]);
        let m = learn_bpe([c.as_slice()], 10).unwrap();
        let p = dir.path().join("bpe.codes");
        m.write_to(&p).unwrap();
        assert_eq!(BpeModel::read_from(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn bpe_round_trips_words(words in proptest::collection::vec("[a-e]{1,8}", 1..20), probe in "[a-f]{1,10}") {
            let corpus = vec![words.clone()];
            let m = learn_bpe([corpus.as_slice()], 30).unwrap();
            let seg = m.segment_word(&probe);
            prop_assert_eq!(detokenize(&seg), vec![probe.clone()]);
            prop_assert_eq!(detokenize(&apply_bpe(&m, &words)), words);
        }
    }

    #[test]
    fn vocab_counts_and_specials() {
        let c = lines(&["a b c d e", "f g h i j"]);
        let v = build_vocab([c.as_slice()], 1).unwrap();
        assert_eq!(v.len(), 10 + N_SPECIALS);
        assert_eq!(v.id("<mask>"), Some(MASK));
        assert_eq!(v.id("<pad>"), Some(PAD));
        let c2 = lines(&["a a b"]);
        let v2 = build_vocab([c2.as_slice()], 2).unwrap();
        assert_eq!(v2.encode(&lines(&["a b"])[0]), vec![v2.id("a").unwrap(), UNK]);
        assert_eq!(build_vocab([c.as_slice()], 1).unwrap(), v);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.write_to(&p).unwrap();
        assert_eq!(Vocab::read_from(&p).unwrap(), v);
        assert!(Vocab::from_tokens(vec!["<mask>".to_string()]).is_err());
    }

    fn text(n: usize) -> TextCorpus {
        TextCorpus::new(Side::Src, (0..n).map(|i| vec![format!("w{i}")]).collect())
    }

    #[test]
    fn noise_removal_filters_aligned_sets() {
        let orig = text(10_000);
        let reord = TextCorpus::new(Side::SrcReordered, orig.sentences.clone());
        let failed: BTreeSet<usize> = (0..10_000).step_by(20).collect();
        assert_eq!(failed.len(), 500);
        let pair = |i: usize| SentencePair {
            src: vec![format!("s{i}")],
            tgt: vec![format!("T{i}")],
            derivation: crate::synthlang::Derivation::Word { class: 0, entry: 0 },
        };
        let valid = EvalSplit {
            pairs: (0..1000).map(pair).collect(),
            reordered_src: (0..1000).map(|i| vec![format!("s{i}")]).collect(),
            failed: (0..289).map(|i| i * 3).collect(),
        };
        let f = filter_noise_removal(&orig, &reord, &failed, std::slice::from_ref(&valid)).unwrap();
        assert_eq!(f.original.len(), 9_500);
        assert_eq!(f.reordered.len(), 9_500);
        assert_eq!(f.original.sentences, f.reordered.sentences);
        assert_eq!(f.eval[0].pairs.len(), 711);
        assert_eq!(f.eval[0].reordered_src.len(), 711);
        for p in &f.eval[0].pairs {
            let id: usize = p.src[0][1..].parse().unwrap();
            assert!(!valid.failed.contains(&id));
            assert_eq!(p.tgt[0], format!("T{id}"));
        }

        let none = filter_noise_removal(&orig, &reord, &BTreeSet::new(), &[]).unwrap();
        assert_eq!(none.original, orig);
        assert!(filter_noise_removal(&orig, &text(3), &BTreeSet::new(), &[]).is_err());
    }

    #[test]
    fn sentence_batches_cover_the_corpus_once() {
        let c = corpus_of(&vec![3; 130]);
        let sizes: Vec<usize> = batch_iter(&c, BatchSize::Sentences(64), 1, 0).unwrap().map(|b| b.rows()).collect();
        assert_eq!(sizes, vec![64, 64, 2]);
        let mut seen: Vec<usize> =
            batch_iter(&c, BatchSize::Sentences(64), 1, 0).unwrap().flat_map(|b| b.indices).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..130).collect::<Vec<_>>());
        let a: Vec<Batch> = batch_iter(&c, BatchSize::Sentences(64), 9, 3).unwrap().collect();
        let b: Vec<Batch> = batch_iter(&c, BatchSize::Sentences(64), 9, 3).unwrap().collect();
        assert_eq!(a, b);
        let other: Vec<Batch> = batch_iter(&c, BatchSize::Sentences(64), 9, 4).unwrap().collect();
        assert_ne!(a[0].indices, other[0].indices);
    }

    #[test]
    fn token_budget_is_respected() {
        let lens: Vec<usize> = (0..2000).map(|i| 1 + (i * 7919) % 30).collect();
        let c = corpus_of(&lens);
        let mut total = 0;
        for b in batch_iter(&c, BatchSize::Tokens(3000), 5, 0).unwrap() {
            assert!(b.rows() * b.width <= 3000);
            for r in 0..b.rows() {
                assert_eq!(b.row(r).len(), lens[b.indices[r]]);
                assert!(b.padded[r * b.width + b.lengths[r]..(r + 1) * b.width].iter().all(|&t| t == PAD));
            }
            total += b.rows();
        }
        assert_eq!(total, 2000);
    }

    #[test]
    fn seeds_depend_only_on_epoch_and_index() {
        let c = corpus_of(&vec![2; 50]);
        let a: HashMap<usize, u64> = batch_iter(&c, BatchSize::Sentences(7), 4, 2)
            .unwrap()
            .flat_map(|b| b.indices.into_iter().zip(b.seeds))
            .collect();
        let b: HashMap<usize, u64> = batch_iter(&c, BatchSize::Sentences(50), 4, 2)
            .unwrap()
            .flat_map(|b| b.indices.into_iter().zip(b.seeds))
            .collect();
        assert_eq!(a, b);
    }
}
