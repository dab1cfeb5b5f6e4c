//! Paired synthetic languages with controllable word-order divergence.
//!
//! A [`GrammarPair`] is a weighted context-free grammar over word classes.
//! Source sentences are read off derivations in rule order (SVO); the target
//! language permutes every rule's children by its `target_order` (SOV) and
//! relabels each word through a bijective token map whose image uses a
//! disjoint alphabet. The reorderer is therefore an exact oracle: parse the
//! source, permute, flatten.
//!
//! Lexical choice is conditioned on a latent per-sentence topic so that every
//! word has a distinct co-occurrence profile, which is what lets skip-gram
//! embeddings of the two languages be aligned at all.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Side, TextCorpus};
use crate::error::{Error, Result};
use crate::seed;

pub const GRAMMAR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub lhs: String,
    pub rhs: Vec<String>,
    pub weight: f64,
    /// Target-language child order as indices into `rhs`.
    pub target_order: Vec<usize>,
}

impl RuleSpec {
    pub fn new(lhs: &str, rhs: &[&str], weight: f64, target_order: &[usize]) -> Self {
        RuleSpec {
            lhs: lhs.to_string(),
            rhs: rhs.iter().map(|s| s.to_string()).collect(),
            weight,
            target_order: target_order.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub size: usize,
    /// Open classes carry topic preferences and are subject to the minimum
    /// lexicon size check.
    pub open: bool,
}

impl ClassSpec {
    fn new(name: &str, size: usize, open: bool) -> Self {
        ClassSpec { name: name.to_string(), size, open }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub start: String,
    pub rules: Vec<RuleSpec>,
    pub classes: Vec<ClassSpec>,
    pub max_depth: usize,
    pub max_len: usize,
    pub n_topics: usize,
    pub topics_per_word: usize,
    /// Weight multiplier for a word under one of its own topics.
    pub topic_affinity: f64,
    pub zipf_exponent: f64,
    /// Ambiguity hook: some transitive verbs take a dative-marked subject in
    /// the target language, so one source noun maps to two target forms.
    pub dative_subjects: bool,
    pub dative_verb_fraction: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            start: "S".into(),
            rules: default_svo_rules(),
            classes: vec![
                ClassSpec::new("N", 100, true),
                ClassSpec::new("Vt", 60, true),
                ClassSpec::new("Vi", 40, true),
                ClassSpec::new("Adj", 60, true),
                ClassSpec::new("Det", 6, false),
                ClassSpec::new("P", 10, false),
                ClassSpec::new("G", 2, false),
                ClassSpec::new("Intj", 10, false),
            ],
            max_depth: 6,
            max_len: 30,
            n_topics: 16,
            topics_per_word: 3,
            topic_affinity: 100.0,
            zipf_exponent: 0.7,
            dative_subjects: false,
            dative_verb_fraction: 0.2,
        }
    }
}

impl GrammarConfig {
    /// Default rules with every open class resized to `per_class` words.
    pub fn with_open_class_size(per_class: usize) -> Self {
        let mut cfg = GrammarConfig::default();
        for c in cfg.classes.iter_mut().filter(|c| c.open) {
            c.size = per_class;
        }
        cfg
    }
}

/// SVO source grammar whose target orders give an SOV, postpositional,
/// possessor-first target.
pub fn default_svo_rules() -> Vec<RuleSpec> {
    vec![
        RuleSpec::new("S", &["NP", "VP"], 0.96, &[0, 1]),
        RuleSpec::new("S", &["Intj"], 0.04, &[0]),
        RuleSpec::new("NP", &["Det", "NOM"], 0.55, &[0, 1]),
        RuleSpec::new("NP", &["NOM"], 0.45, &[0]),
        RuleSpec::new("NOM", &["N"], 0.65, &[0]),
        RuleSpec::new("NOM", &["Adj", "NOM"], 0.25, &[0, 1]),
        RuleSpec::new("NOM", &["N", "G", "NP"], 0.10, &[2, 1, 0]),
        RuleSpec::new("VP", &["Vt", "NP"], 0.55, &[1, 0]),
        RuleSpec::new("VP", &["Vt", "NP", "PP"], 0.10, &[2, 1, 0]),
        RuleSpec::new("VP", &["Vi"], 0.20, &[0]),
        RuleSpec::new("VP", &["Vi", "PP"], 0.15, &[1, 0]),
        RuleSpec::new("PP", &["P", "NP"], 1.0, &[1, 0]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    pub src: String,
    pub tgt: String,
    /// Alternate target form used under the dative hook.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_dative: Option<String>,
    pub weight: f64,
    pub topics: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Sym {
    Nt(usize),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GrammarFile {
    format_version: u32,
    seed: u64,
    start: String,
    rules: Vec<RuleSpec>,
    lexicon: BTreeMap<String, Vec<LexEntry>>,
    max_depth: usize,
    max_len: usize,
    n_topics: usize,
    topic_affinity: f64,
    dative_verbs: BTreeSet<String>,
}

/// Rule trace of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Derivation {
    Word { class: usize, entry: usize },
    Node { rule: usize, children: Vec<Derivation> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub derivation: Derivation,
}

/// Paired source/target grammar. Construct with [`build_grammar`] or
/// [`GrammarPair::from_parts`].
#[derive(Debug, Clone)]
pub struct GrammarPair {
    file: GrammarFile,
    nt_names: Vec<String>,
    class_names: Vec<String>,
    rules: Vec<CompiledRule>,
    rules_by_lhs: Vec<Vec<usize>>,
    start: usize,
    rule_height: Vec<usize>,
    lex: Vec<Vec<LexEntry>>,
    src_index: HashMap<String, (usize, usize)>,
    tgt_index: HashMap<String, (usize, usize)>,
    dative_verbs: HashSet<String>,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    lhs: usize,
    rhs: Vec<Sym>,
    weight: f64,
    target_order: Vec<usize>,
}

impl PartialEq for GrammarPair {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

const UNREACHABLE: usize = usize::MAX;

impl GrammarPair {
    /// Validates and compiles an explicit grammar.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        start: &str,
        rules: Vec<RuleSpec>,
        lexicon: BTreeMap<String, Vec<LexEntry>>,
        max_depth: usize,
        max_len: usize,
        n_topics: usize,
        topic_affinity: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::compile(GrammarFile {
            format_version: GRAMMAR_FORMAT_VERSION,
            seed,
            start: start.to_string(),
            rules,
            lexicon,
            max_depth,
            max_len,
            n_topics,
            topic_affinity,
            dative_verbs: BTreeSet::new(),
        })
    }

    fn compile(file: GrammarFile) -> Result<Self> {
        if file.format_version != GRAMMAR_FORMAT_VERSION {
            return Err(Error::Grammar(format!(
                "unsupported grammar format version {}",
                file.format_version
            )));
        }
        let mut nt_names: Vec<String> = Vec::new();
        for r in &file.rules {
            if !nt_names.contains(&r.lhs) {
                nt_names.push(r.lhs.clone());
            }
        }
        let class_names: Vec<String> = file.lexicon.keys().cloned().collect();
        for n in &nt_names {
            if file.lexicon.contains_key(n) {
                return Err(Error::Grammar(format!("`{n}` is both a nonterminal and a word class")));
            }
        }
        let resolve = |s: &str| -> Result<Sym> {
            if let Some(i) = nt_names.iter().position(|n| n == s) {
                Ok(Sym::Nt(i))
            } else if let Some(i) = class_names.iter().position(|n| n == s) {
                Ok(Sym::Class(i))
            } else {
                Err(Error::Grammar(format!("symbol `{s}` is neither a nonterminal nor a word class")))
            }
        };
        let mut rules = Vec::with_capacity(file.rules.len());
        for r in &file.rules {
            if r.rhs.is_empty() {
                return Err(Error::Grammar(format!("empty production for `{}`", r.lhs)));
            }
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return Err(Error::Grammar(format!("rule weight must be positive, got {}", r.weight)));
            }
            let mut order = r.target_order.clone();
            order.sort_unstable();
            if order != (0..r.rhs.len()).collect::<Vec<_>>() {
                return Err(Error::Grammar(format!(
                    "target order {:?} is not a permutation of {} children",
                    r.target_order,
                    r.rhs.len()
                )));
            }
            rules.push(CompiledRule {
                lhs: nt_names.iter().position(|n| *n == r.lhs).unwrap(),
                rhs: r.rhs.iter().map(|s| resolve(s)).collect::<Result<_>>()?,
                weight: r.weight,
                target_order: r.target_order.clone(),
            });
        }
        let start = nt_names
            .iter()
            .position(|n| *n == file.start)
            .ok_or_else(|| Error::Grammar(format!("start symbol `{}` has no rules", file.start)))?;
        let mut rules_by_lhs = vec![Vec::new(); nt_names.len()];
        for (i, r) in rules.iter().enumerate() {
            rules_by_lhs[r.lhs].push(i);
        }

        // Minimal derivation height by fixpoint; classes have height 0.
        let mut nt_height = vec![UNREACHABLE; nt_names.len()];
        let mut rule_height = vec![UNREACHABLE; rules.len()];
        loop {
            let mut changed = false;
            for (i, r) in rules.iter().enumerate() {
                let mut h = 0usize;
                for s in &r.rhs {
                    let sh = match s {
                        Sym::Class(_) => 0,
                        Sym::Nt(n) => nt_height[*n],
                    };
                    h = h.max(sh);
                }
                let h = if h == UNREACHABLE { UNREACHABLE } else { h + 1 };
                if h < rule_height[i] {
                    rule_height[i] = h;
                    changed = true;
                }
                if h < nt_height[r.lhs] {
                    nt_height[r.lhs] = h;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(bad) = nt_height.iter().position(|&h| h == UNREACHABLE) {
            return Err(Error::Grammar(format!(
                "nonterminal `{}` cannot terminate: no terminal-only production is reachable",
                nt_names[bad]
            )));
        }
        if nt_height[start] > file.max_depth + 1 {
            return Err(Error::Grammar(format!(
                "max_depth {} is too small: the shortest derivation needs depth {}",
                file.max_depth,
                nt_height[start] - 1
            )));
        }

        let lex: Vec<Vec<LexEntry>> = class_names.iter().map(|c| file.lexicon[c].clone()).collect();
        let mut src_index = HashMap::new();
        let mut tgt_index = HashMap::new();
        for (ci, entries) in lex.iter().enumerate() {
            if entries.is_empty() {
                return Err(Error::Grammar(format!("word class `{}` is empty", class_names[ci])));
            }
            for (ei, e) in entries.iter().enumerate() {
                if !(e.weight.is_finite() && e.weight > 0.0) {
                    return Err(Error::Grammar(format!("lexical weight of `{}` must be positive", e.src)));
                }
                if e.topics.iter().any(|&t| t >= file.n_topics.max(1)) {
                    return Err(Error::Grammar(format!("topic out of range for `{}`", e.src)));
                }
                if src_index.insert(e.src.clone(), (ci, ei)).is_some() {
                    return Err(Error::Grammar(format!("duplicate source word `{}`", e.src)));
                }
                for t in std::iter::once(&e.tgt).chain(e.tgt_dative.iter()) {
                    if tgt_index.insert(t.clone(), (ci, ei)).is_some() {
                        return Err(Error::Grammar(format!("duplicate target word `{t}`")));
                    }
                }
            }
        }
        if let Some(w) = src_index.keys().find(|w| tgt_index.contains_key(*w)) {
            return Err(Error::Grammar(format!("`{w}` occurs in both surface vocabularies")));
        }
        let dative_verbs = file.dative_verbs.iter().cloned().collect();

        Ok(GrammarPair {
            nt_names,
            class_names,
            rules,
            rules_by_lhs,
            start,
            rule_height,
            lex,
            src_index,
            tgt_index,
            dative_verbs,
            file,
        })
    }

    pub fn seed(&self) -> u64 {
        self.file.seed
    }

    pub fn max_len(&self) -> usize {
        self.file.max_len
    }

    pub fn max_depth(&self) -> usize {
        self.file.max_depth
    }

    pub fn n_topics(&self) -> usize {
        self.file.n_topics
    }

    pub fn topic_affinity(&self) -> f64 {
        self.file.topic_affinity
    }

    pub fn start_symbol(&self) -> &str {
        &self.file.start
    }

    pub fn rules(&self) -> &[RuleSpec] {
        &self.file.rules
    }

    pub fn lexicon(&self) -> &BTreeMap<String, Vec<LexEntry>> {
        &self.file.lexicon
    }

    pub fn nonterminals(&self) -> &[String] {
        &self.nt_names
    }

    pub fn has_ambiguity_hooks(&self) -> bool {
        !self.dative_verbs.is_empty()
    }

    /// Source → target word, the bijective token map.
    pub fn token_map(&self, src_word: &str) -> Option<&str> {
        self.src_index.get(src_word).map(|&(c, e)| self.lex[c][e].tgt.as_str())
    }

    /// Target → source word. Dative forms map back to their noun.
    pub fn inverse_token_map(&self, tgt_word: &str) -> Option<&str> {
        self.tgt_index.get(tgt_word).map(|&(c, e)| self.lex[c][e].src.as_str())
    }

    pub fn src_vocabulary(&self) -> BTreeSet<&str> {
        self.src_index.keys().map(String::as_str).collect()
    }

    pub fn tgt_vocabulary(&self) -> BTreeSet<&str> {
        self.tgt_index.keys().map(String::as_str).collect()
    }

    /// All (source word, target word) pairs of the bijection, in lexicon order.
    pub fn bijection(&self) -> Vec<(String, String)> {
        self.lex.iter().flatten().map(|e| (e.src.clone(), e.tgt.clone())).collect()
    }

    pub fn class_of(&self, src_word: &str) -> Option<&str> {
        self.src_index.get(src_word).map(|&(c, _)| self.class_names[c].as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GrammarFile = serde_json::from_str(text)?;
        Self::compile(file)
    }

    // ---- sampling ----

    fn sample_derivation<R: Rng>(&self, rng: &mut R) -> Derivation {
        // Surplus derivations longer than max_len are rejected and resampled.
        loop {
            let topic = if self.file.n_topics > 0 { rng.random_range(0..self.file.n_topics) } else { 0 };
            let d = self.expand(Sym::Nt(self.start), self.file.max_depth, topic, rng);
            if leaf_count(&d) <= self.file.max_len {
                return d;
            }
        }
    }

    fn expand<R: Rng>(&self, sym: Sym, budget: usize, topic: usize, rng: &mut R) -> Derivation {
        match sym {
            Sym::Class(c) => Derivation::Word { class: c, entry: self.pick_word(c, topic, rng) },
            Sym::Nt(n) => {
                let allowed: Vec<usize> = self.rules_by_lhs[n]
                    .iter()
                    .copied()
                    .filter(|&r| self.rule_height[r] <= budget + 1)
                    .collect();
                let total: f64 = allowed.iter().map(|&r| self.rules[r].weight).sum();
                let mut x = rng.random::<f64>() * total;
                let mut chosen = *allowed.last().expect("validated: some rule fits the budget");
                for &r in &allowed {
                    x -= self.rules[r].weight;
                    if x < 0.0 {
                        chosen = r;
                        break;
                    }
                }
                let children = self.rules[chosen]
                    .rhs
                    .iter()
                    .map(|&s| self.expand(s, budget.saturating_sub(1), topic, rng))
                    .collect();
                Derivation::Node { rule: chosen, children }
            }
        }
    }

    /// Lexical weight of an entry under a topic.
    pub fn entry_weight(&self, entry: &LexEntry, topic: usize) -> f64 {
        if entry.topics.contains(&topic) {
            entry.weight * self.file.topic_affinity
        } else {
            entry.weight
        }
    }

    fn pick_word<R: Rng>(&self, class: usize, topic: usize, rng: &mut R) -> usize {
        let entries = &self.lex[class];
        let total: f64 = entries.iter().map(|e| self.entry_weight(e, topic)).sum();
        let mut x = rng.random::<f64>() * total;
        for (i, e) in entries.iter().enumerate() {
            x -= self.entry_weight(e, topic);
            if x < 0.0 {
                return i;
            }
        }
        entries.len() - 1
    }

    // ---- rendering ----

    pub fn source_words(&self, d: &Derivation) -> Vec<String> {
        let mut out = Vec::new();
        self.collect(d, false, &mut out);
        out
    }

    /// Source words in target constituent order (no token mapping).
    pub fn reordered_words(&self, d: &Derivation) -> Vec<String> {
        let mut out = Vec::new();
        self.collect(d, true, &mut out);
        out
    }

    pub fn target_words(&self, d: &Derivation) -> Vec<String> {
        let reordered = self.reordered_leaves(d);
        let dative = !self.dative_verbs.is_empty()
            && reordered.iter().any(|&(c, e, _)| self.dative_verbs.contains(&self.lex[c][e].src));
        reordered
            .into_iter()
            .map(|(c, e, in_subject)| {
                let entry = &self.lex[c][e];
                match (&entry.tgt_dative, dative && in_subject) {
                    (Some(alt), true) => alt.clone(),
                    _ => entry.tgt.clone(),
                }
            })
            .collect()
    }

    fn collect(&self, d: &Derivation, reorder: bool, out: &mut Vec<String>) {
        match d {
            Derivation::Word { class, entry } => out.push(self.lex[*class][*entry].src.clone()),
            Derivation::Node { rule, children } => {
                if reorder {
                    for &i in &self.rules[*rule].target_order {
                        self.collect(&children[i], reorder, out);
                    }
                } else {
                    for c in children {
                        self.collect(c, reorder, out);
                    }
                }
            }
        }
    }

    /// Leaves in target order, tagged with whether they sit under the first
    /// child of the root (the subject position for the default grammar).
    fn reordered_leaves(&self, d: &Derivation) -> Vec<(usize, usize, bool)> {
        fn walk(g: &GrammarPair, d: &Derivation, subj: bool, out: &mut Vec<(usize, usize, bool)>) {
            match d {
                Derivation::Word { class, entry } => out.push((*class, *entry, subj)),
                Derivation::Node { rule, children } => {
                    for &i in &g.rules[*rule].target_order {
                        walk(g, &children[i], subj, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        match d {
            Derivation::Node { rule, children } if children.len() > 1 => {
                for &i in &self.rules[*rule].target_order {
                    walk(self, &children[i], i == 0, &mut out);
                }
            }
            _ => walk(self, d, false, &mut out),
        }
        out
    }

    pub fn sentence_pair(&self, d: Derivation) -> SentencePair {
        SentencePair { src: self.source_words(&d), tgt: self.target_words(&d), derivation: d }
    }

    // ---- parsing ----

    /// Parses a source-order sentence; `None` when it is not derivable.
    pub fn parse(&self, sentence: &[String]) -> Option<Derivation> {
        self.parse_with(sentence, false)
    }

    fn parse_with(&self, sentence: &[String], target_order: bool) -> Option<Derivation> {
        if sentence.is_empty() {
            return None;
        }
        let mut leaves = Vec::with_capacity(sentence.len());
        for w in sentence {
            leaves.push(*self.src_index.get(w)?);
        }
        let mut parser = SpanParser { g: self, leaves: &leaves, target_order, memo: HashMap::new() };
        parser.parse(self.start, 0, leaves.len())
    }

    /// Inverse of the oracle reorderer: parses a target-ordered sentence
    /// (source vocabulary) with the permuted grammar and restores source order.
    pub fn inverse_reorder(&self, sentence: &[String]) -> Result<Vec<String>> {
        let d = self
            .parse_with(sentence, true)
            .ok_or_else(|| Error::ParseFailure { sentence: sentence.join(" ") })?;
        Ok(self.source_words(&d))
    }
}

fn leaf_count(d: &Derivation) -> usize {
    match d {
        Derivation::Word { .. } => 1,
        Derivation::Node { children, .. } => children.iter().map(leaf_count).sum(),
    }
}

/// Span-memoized top-down parser. Every symbol yields at least one word, so
/// strict sub-spans guarantee termination; unary cycles over one span are cut
/// by the in-progress marker.
struct SpanParser<'a> {
    g: &'a GrammarPair,
    leaves: &'a [(usize, usize)],
    target_order: bool,
    memo: HashMap<(usize, usize, usize), Option<Option<Derivation>>>,
}

impl SpanParser<'_> {
    fn parse(&mut self, nt: usize, i: usize, j: usize) -> Option<Derivation> {
        match self.memo.get(&(nt, i, j)) {
            Some(Some(done)) => return done.clone(),
            Some(None) => return None,
            None => {}
        }
        self.memo.insert((nt, i, j), None);
        let mut found = None;
        for &r in &self.g.rules_by_lhs[nt] {
            let rule = &self.g.rules[r];
            let rhs: Vec<(usize, Sym)> = if self.target_order {
                rule.target_order.iter().map(|&k| (k, rule.rhs[k])).collect()
            } else {
                rule.rhs.iter().copied().enumerate().collect()
            };
            if j - i < rhs.len() {
                continue;
            }
            if let Some(parts) = self.seq(&rhs, i, j) {
                let mut children: Vec<Option<Derivation>> = vec![None; rule.rhs.len()];
                for (k, d) in parts {
                    children[k] = Some(d);
                }
                found = Some(Derivation::Node { rule: r, children: children.into_iter().map(Option::unwrap).collect() });
                break;
            }
        }
        self.memo.insert((nt, i, j), Some(found.clone()));
        found
    }

    fn seq(&mut self, rhs: &[(usize, Sym)], i: usize, j: usize) -> Option<Vec<(usize, Derivation)>> {
        let (k, sym) = rhs[0];
        let rest = &rhs[1..];
        if rest.is_empty() {
            return self.symbol(sym, i, j).map(|d| vec![(k, d)]);
        }
        let max_end = j - rest.len();
        for mid in (i + 1)..=max_end {
            if let Some(d) = self.symbol(sym, i, mid) {
                if let Some(mut tail) = self.seq(rest, mid, j) {
                    tail.insert(0, (k, d));
                    return Some(tail);
                }
            }
        }
        None
    }

    fn symbol(&mut self, sym: Sym, i: usize, j: usize) -> Option<Derivation> {
        match sym {
            Sym::Class(c) => {
                if j == i + 1 && self.leaves[i].0 == c {
                    Some(Derivation::Word { class: c, entry: self.leaves[i].1 })
                } else {
                    None
                }
            }
            Sym::Nt(n) => self.parse(n, i, j),
        }
    }
}

// ---- public operations ----

const SRC_ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const SRC_NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];
const TGT_ONSETS: &[&str] = &["K", "T", "P", "M", "N", "R", "L", "S", "H", "J", "D", "B", "G", "CH", "TH"];
const TGT_NUCLEI: &[&str] = &["A", "I", "U", "AA", "EE", "OO"];

fn make_word<R: Rng>(rng: &mut R, onsets: &[&str], nuclei: &[&str], taken: &mut HashSet<String>, coda: &str) -> String {
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(onsets[rng.random_range(0..onsets.len())]);
            w.push_str(nuclei[rng.random_range(0..nuclei.len())]);
        }
        w.push_str(coda);
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Generates a grammar pair from a configuration; a pure function of
/// `(config, seed)`.
pub fn build_grammar(config: &GrammarConfig, seed: u64) -> Result<GrammarPair> {
    let mut nts: Vec<&str> = Vec::new();
    for r in &config.rules {
        if !nts.contains(&r.lhs.as_str()) {
            nts.push(&r.lhs);
        }
    }
    if nts.len() < 3 {
        return Err(Error::Grammar(format!("need at least 3 nonterminals, got {}", nts.len())));
    }
    if config.max_len < 4 {
        return Err(Error::Grammar(format!("max_len must be at least 4, got {}", config.max_len)));
    }
    for c in &config.classes {
        if c.open && c.size < 10 {
            return Err(Error::Grammar(format!("open class `{}` needs at least 10 words, got {}", c.name, c.size)));
        }
        if c.size == 0 {
            return Err(Error::Grammar(format!("class `{}` is empty", c.name)));
        }
    }
    if config.n_topics == 0 && config.classes.iter().any(|c| c.open) {
        return Err(Error::Grammar("n_topics must be positive".into()));
    }

    let mut rng = seed::rng(seed::derive(seed, &["grammar"]));
    let mut src_taken = HashSet::new();
    let mut tgt_taken = HashSet::new();
    let mut lexicon = BTreeMap::new();
    for c in &config.classes {
        let mut ranks: Vec<usize> = (0..c.size).collect();
        ranks.shuffle(&mut rng);
        let mut entries = Vec::with_capacity(c.size);
        for &rank in &ranks {
            let src = make_word(&mut rng, SRC_ONSETS, SRC_NUCLEI, &mut src_taken, "");
            let tgt = make_word(&mut rng, TGT_ONSETS, TGT_NUCLEI, &mut tgt_taken, "");
            let topics = if c.open {
                let mut all: Vec<usize> = (0..config.n_topics).collect();
                all.shuffle(&mut rng);
                all.truncate(config.topics_per_word.min(config.n_topics));
                all.sort_unstable();
                all
            } else {
                Vec::new()
            };
            let weight = 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);
            entries.push(LexEntry { src, tgt, tgt_dative: None, weight, topics });
        }
        lexicon.insert(c.name.clone(), entries);
    }

    let mut dative_verbs = BTreeSet::new();
    if config.dative_subjects {
        if let Some(verbs) = lexicon.get("Vt") {
            let n = ((verbs.len() as f64) * config.dative_verb_fraction).round().max(1.0) as usize;
            dative_verbs.extend(verbs.iter().take(n).map(|e| e.src.clone()));
        }
        if let Some(nouns) = lexicon.get_mut("N") {
            for e in nouns.iter_mut() {
                e.tgt_dative = Some(make_word(&mut rng, TGT_ONSETS, TGT_NUCLEI, &mut tgt_taken, "M"));
            }
        }
    }

    GrammarPair::compile(GrammarFile {
        format_version: GRAMMAR_FORMAT_VERSION,
        seed,
        start: config.start.clone(),
        rules: config.rules.clone(),
        lexicon,
        max_depth: config.max_depth,
        max_len: config.max_len,
        n_topics: config.n_topics,
        topic_affinity: config.topic_affinity,
        dative_verbs,
    })
}

/// `n` independent sentences from one side of the grammar.
pub fn sample_monolingual(grammar: &GrammarPair, side: Side, n: usize, seed: u64) -> Result<TextCorpus> {
    if n == 0 {
        return Err(Error::Corpus("sample size must be at least 1".into()));
    }
    let mut rng = seed::rng(seed::derive(seed, &["mono", side.as_str()]));
    let sentences = (0..n)
        .map(|_| {
            let d = grammar.sample_derivation(&mut rng);
            match side {
                Side::Tgt => grammar.target_words(&d),
                Side::SrcReordered => grammar.reordered_words(&d),
                Side::Src => grammar.source_words(&d),
            }
        })
        .collect();
    Ok(TextCorpus::new(side, sentences))
}

/// Reorders a source sentence into target constituent order, keeping source
/// vocabulary.
pub fn oracle_reorder(sentence: &[String], grammar: &GrammarPair) -> Result<Vec<String>> {
    let d = grammar
        .parse(sentence)
        .ok_or_else(|| Error::ParseFailure { sentence: sentence.join(" ") })?;
    Ok(grammar.reordered_words(&d))
}

/// Reorders every sentence, except those independently marked as failed with
/// probability `fail_rate`. Failed positions keep their original word order
/// so the output stays index-aligned with the input.
pub fn inject_parse_failures(
    corpus: &TextCorpus,
    grammar: &GrammarPair,
    fail_rate: f64,
    seed: u64,
) -> Result<(TextCorpus, BTreeSet<usize>)> {
    if !(0.0..1.0).contains(&fail_rate) {
        return Err(Error::Corpus(format!("fail_rate must be in [0, 1), got {fail_rate}")));
    }
    let mut rng = seed::rng(seed::derive(seed, &["parse-failures"]));
    let mut failed = BTreeSet::new();
    let mut out = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.sentences.iter().enumerate() {
        if rng.random::<f64>() < fail_rate {
            failed.insert(i);
            out.push(s.clone());
        } else {
            out.push(oracle_reorder(s, grammar)?);
        }
    }
    Ok((TextCorpus::new(Side::SrcReordered, out), failed))
}

/// Parallel validation and test pairs with gold references.
pub fn make_eval_sets(
    grammar: &GrammarPair,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>)> {
    make_eval_sets_excluding(grammar, n_valid, n_test, seed, &HashSet::new())
}

/// As [`make_eval_sets`], rejecting any pair whose source or target sentence
/// is in `exclude` so evaluation data never overlaps training data.
pub fn make_eval_sets_excluding(
    grammar: &GrammarPair,
    n_valid: usize,
    n_test: usize,
    seed: u64,
    exclude: &HashSet<Vec<String>>,
) -> Result<(Vec<SentencePair>, Vec<SentencePair>)> {
    if n_valid == 0 || n_test == 0 {
        return Err(Error::Corpus("validation and test sizes must be at least 1".into()));
    }
    let draw = |label: &str, n: usize| -> Result<Vec<SentencePair>> {
        let mut rng = seed::rng(seed::derive(seed, &["eval", label]));
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(Error::Corpus(format!(
                    "could not draw {n} {label} pairs disjoint from the excluded set"
                )));
            }
            let d = grammar.sample_derivation(&mut rng);
            let pair = grammar.sentence_pair(d);
            if !exclude.contains(&pair.src) && !exclude.contains(&pair.tgt) {
                out.push(pair);
            }
        }
        Ok(out)
    };
    let valid = draw("valid", n_valid)?;
    let test = draw("test", n_test)?;
    Ok((valid, test))
}
