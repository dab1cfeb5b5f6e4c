//! Static cross-lingual embeddings: skip-gram with negative sampling over the
//! combined corpora, an orthogonal Procrustes map from source rows onto
//! target rows, and CSLS self-learning refinement.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_lines, TokenId, TokenSeq, Vocab, N_SPECIALS};
use crate::error::{Error, Result};
use crate::seed;

/// Dense `rows × dim` matrix, one row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// Common row norm after export, if rows were normalized.
    pub row_norm: Option<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix { rows, dim, data: vec![0.0; rows * dim], row_norm: None }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// word2vec text format: `count dim` header, then `token v1 .. vd`.
    pub fn write_word2vec(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{} {}", self.rows, self.dim)?;
        for i in 0..self.rows {
            let vals: Vec<String> = self.row(i).iter().map(|v| format!("{v:.9}")).collect();
            writeln!(w, "{} {}", vocab.token(i as TokenId), vals.join(" "))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a word2vec text file whose rows follow `vocab` order.
    pub fn read_word2vec(vocab: &Vocab, path: &Path) -> Result<Self> {
        let lines = read_lines(path)?;
        let header = lines.first().ok_or_else(|| Error::Embedding("empty embedding file".into()))?;
        let mut it = header.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(rows)), Some(Ok(dim))) = (it.next(), it.next()) else {
            return Err(Error::Embedding("bad word2vec header".into()));
        };
        if rows != vocab.len() || lines.len() != rows + 1 {
            return Err(Error::Embedding(format!("embedding file has {rows} rows, vocab has {}", vocab.len())));
        }
        let mut m = EmbeddingMatrix::zeros(rows, dim);
        for (i, line) in lines[1..].iter().enumerate() {
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default();
            if tok != vocab.token(i as TokenId) {
                return Err(Error::Embedding(format!("row {i} is `{tok}`, expected `{}`", vocab.token(i as TokenId))));
            }
            let vals: Vec<f64> = parts.map(|p| p.parse().map_err(|_| Error::Embedding(format!("bad value on row {i}")))).collect::<Result<_>>()?;
            if vals.len() != dim {
                return Err(Error::Embedding(format!("row {i} has {} values, expected {dim}", vals.len())));
            }
            m.row_mut(i).copy_from_slice(&vals);
        }
        Ok(m)
    }
}

// ------------------------------------------------------------ skip-gram

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig { dim: 64, window: 5, negatives: 5, epochs: 5, learning_rate: 0.025 }
    }
}

const UNIGRAM_TABLE: usize = 1 << 20;

fn sigmoid(x: f32) -> f32 {
    if x > 8.0 {
        1.0
    } else if x < -8.0 {
        0.0
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Skip-gram with negative sampling. Single-threaded and deterministic in
/// `seed`. Returns the input vectors; rows of tokens that never occur keep
/// their initialization.
pub fn train_skipgram(corpus: &[TokenSeq], vocab_size: usize, cfg: &SkipgramConfig, seed: u64) -> Result<EmbeddingMatrix> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::Embedding("skip-gram corpus is empty".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::Embedding(format!("embedding dimension must be at least 2, got {}", cfg.dim)));
    }
    let d = cfg.dim;
    let mut rng = seed::rng(seed::derive(seed, &["skipgram"]));
    let mut input: Vec<f32> = (0..vocab_size * d).map(|_| (rng.random::<f32>() - 0.5) / d as f32).collect();
    let mut output = vec![0f32; vocab_size * d];

    let mut counts = vec![0u64; vocab_size];
    for s in corpus {
        for &t in s {
            if (t as usize) >= vocab_size {
                return Err(Error::Embedding(format!("token id {t} outside vocabulary of {vocab_size}")));
            }
            counts[t as usize] += 1;
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let total_w: f64 = weights.iter().sum();
    let mut table = Vec::with_capacity(UNIGRAM_TABLE);
    let mut acc = 0.0;
    let mut tok = 0usize;
    for i in 0..UNIGRAM_TABLE {
        while tok + 1 < vocab_size && (i as f64 + 0.5) / UNIGRAM_TABLE as f64 > (acc + weights[tok]) / total_w {
            acc += weights[tok];
            tok += 1;
        }
        table.push(tok as TokenId);
    }

    let total_tokens: u64 = counts.iter().sum::<u64>() * cfg.epochs as u64;
    let mut processed = 0u64;
    let mut grad = vec![0f32; d];
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let s = &corpus[si];
            for (pos, &center) in s.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - processed as f64 / (total_tokens + 1) as f64)).max(cfg.learning_rate * 1e-4) as f32;
                processed += 1;
                let shrink = rng.random_range(0..cfg.window.max(1));
                let w = cfg.window - shrink;
                let lo = pos.saturating_sub(w);
                let hi = (pos + w + 1).min(s.len());
                for (cpos, &context) in s.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    let ci = context as usize * d;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (target, label) = if k == 0 {
                            (center, 1.0f32)
                        } else {
                            let t = table[rng.random_range(0..UNIGRAM_TABLE)];
                            if t == center {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let ti = target as usize * d;
                        let dot: f32 = (0..d).map(|j| input[ci + j] * output[ti + j]).sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for j in 0..d {
                            grad[j] += g * output[ti + j];
                            output[ti + j] += g * input[ci + j];
                        }
                    }
                    for j in 0..d {
                        input[ci + j] += grad[j];
                    }
                }
            }
        }
    }
    Ok(EmbeddingMatrix { rows: vocab_size, dim: d, data: input.into_iter().map(f64::from).collect(), row_norm: None })
}

// ----------------------------------------------------- seed dictionary

/// Oracle fallback for the seed dictionary: a held-out fraction of the
/// grammar's word bijection, used only when too few identical subwords exist.
#[derive(Debug, Clone)]
pub struct OracleFallback<'a> {
    pub bijection: &'a [(String, String)],
    pub fraction: f64,
    pub seed: u64,
}

/// Word pairs of `bijection` where both words are single tokens present in
/// their language's token set.
pub fn oracle_pairs(
    vocab: &Vocab,
    bijection: &[(String, String)],
    src_tokens: &BTreeSet<TokenId>,
    tgt_tokens: &BTreeSet<TokenId>,
) -> Vec<(TokenId, TokenId)> {
    bijection
        .iter()
        .filter_map(|(s, t)| {
            let (si, ti) = (vocab.id(s)?, vocab.id(t)?);
            (src_tokens.contains(&si) && tgt_tokens.contains(&ti)).then_some((si, ti))
        })
        .collect()
}

/// Pairs of identical surface strings used by both languages; falls back to
/// the oracle bijection when fewer than `min_pairs` exist.
pub fn seed_dictionary(
    vocab: &Vocab,
    src_tokens: &BTreeSet<TokenId>,
    tgt_tokens: &BTreeSet<TokenId>,
    min_pairs: usize,
    fallback: Option<&OracleFallback<'_>>,
) -> Result<Vec<(TokenId, TokenId)>> {
    let shared: Vec<(TokenId, TokenId)> =
        src_tokens.intersection(tgt_tokens).filter(|&&t| !Vocab::is_special(t)).map(|&t| (t, t)).collect();
    if shared.len() >= min_pairs {
        return Ok(shared);
    }
    let Some(fb) = fallback else {
        if shared.is_empty() {
            return Err(Error::Embedding("no identical subwords shared by the two languages and no fallback".into()));
        }
        return Ok(shared);
    };
    let mut candidates = oracle_pairs(vocab, fb.bijection, src_tokens, tgt_tokens);
    candidates.shuffle(&mut seed::rng(seed::derive(fb.seed, &["seed-dictionary"])));
    let n = ((candidates.len() as f64) * fb.fraction).round() as usize;
    candidates.truncate(n);
    candidates.sort_unstable();
    let mut out = shared;
    let have: HashSet<(TokenId, TokenId)> = out.iter().copied().collect();
    out.extend(candidates.into_iter().filter(|p| !have.contains(p)));
    if out.is_empty() {
        return Err(Error::Embedding("seed dictionary is empty even after the oracle fallback".into()));
    }
    Ok(out)
}

// ---------------------------------------------------------- alignment

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub dictionary_size: usize,
    /// Objective of the previous map on this step's induced dictionary.
    pub objective_before: f64,
    /// Objective of the re-solved map on the same dictionary.
    pub objective_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub w: DMatrix<f64>,
    pub seed_dictionary: Vec<(usize, usize)>,
    pub iterations: usize,
    pub history: Vec<RefineStep>,
}

impl AlignmentMap {
    pub fn identity(d: usize) -> Self {
        AlignmentMap { w: DMatrix::identity(d, d), seed_dictionary: Vec::new(), iterations: 0, history: Vec::new() }
    }

    /// `max |WᵀW − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.w.ncols();
        let g = self.w.transpose() * &self.w - DMatrix::<f64>::identity(d, d);
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_to(&self, path: &Path, provenance: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in provenance.lines() {
            writeln!(f, "# {line}")?;
        }
        writeln!(f, "# seed_pairs {} refinement_iterations {}", self.seed_dictionary.len(), self.iterations)?;
        writeln!(f, "{} {}", self.w.nrows(), self.w.ncols())?;
        for r in 0..self.w.nrows() {
            let vals: Vec<String> = (0..self.w.ncols()).map(|c| format!("{:.17e}", self.w[(r, c)])).collect();
            writeln!(f, "{}", vals.join(" "))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<DMatrix<f64>> {
        let lines: Vec<String> = read_lines(path)?.into_iter().filter(|l| !l.starts_with('#')).collect();
        let dims: Vec<usize> = lines
            .first()
            .ok_or_else(|| Error::Embedding("empty alignment file".into()))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| Error::Embedding("bad alignment header".into())))
            .collect::<Result<_>>()?;
        let (r, c) = (dims[0], dims[1]);
        let mut vals = Vec::with_capacity(r * c);
        for l in &lines[1..] {
            for x in l.split_whitespace() {
                vals.push(x.parse::<f64>().map_err(|_| Error::Embedding("bad alignment value".into()))?);
            }
        }
        if vals.len() != r * c {
            return Err(Error::Embedding("alignment matrix has the wrong number of entries".into()));
        }
        Ok(DMatrix::from_row_slice(r, c, &vals))
    }
}

/// Unit-length rows; with `center`, also subtract the mean row and
/// renormalize.
pub fn normalize_rows(m: &DMatrix<f64>, center: bool) -> DMatrix<f64> {
    let unit = |m: &mut DMatrix<f64>| {
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
    };
    let mut out = m.clone();
    unit(&mut out);
    if center && out.nrows() > 0 {
        let mean = out.row_mean();
        for mut row in out.row_iter_mut() {
            row -= &mean;
        }
        unit(&mut out);
    }
    out
}

/// Sum of squared residuals `Σ ‖x_i W − y_j‖²` over a dictionary.
pub fn procrustes_objective(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>, dict: &[(usize, usize)]) -> f64 {
    dict.iter()
        .map(|&(i, j)| (x.row(i) * w - y.row(j)).norm_squared())
        .sum()
}

/// Orthogonal `W` minimizing `Σ ‖x_i W − y_j‖²`: `W = U Vᵀ` where
/// `X_Dᵀ Y_D = U Σ Vᵀ`.
pub fn procrustes_align(x: &DMatrix<f64>, y: &DMatrix<f64>, dict: &[(usize, usize)]) -> Result<AlignmentMap> {
    let d = x.ncols();
    if y.ncols() != d {
        return Err(Error::Embedding(format!("dimension mismatch: {} vs {}", d, y.ncols())));
    }
    if dict.is_empty() {
        return Err(Error::Embedding("Procrustes needs a non-empty dictionary".into()));
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for &(i, j) in dict {
        if i >= x.nrows() || j >= y.nrows() {
            return Err(Error::Embedding(format!("dictionary pair ({i}, {j}) out of range")));
        }
        m += x.row(i).transpose() * y.row(j);
    }
    let svd = m.svd(true, true);
    let rank = svd.rank(1e-10);
    if rank < d {
        log::warn!("Procrustes dictionary is rank-deficient ({rank} < {d}); the map is not unique");
    }
    let (u, vt) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
    Ok(AlignmentMap { w: u * vt, seed_dictionary: dict.to_vec(), iterations: 0, history: Vec::new() })
}

fn top_k_mean(values: impl Iterator<Item = f64>, k: usize) -> f64 {
    let mut v: Vec<f64> = values.collect();
    let k = k.min(v.len()).max(1);
    v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// CSLS scores `2 cos(x, y) − r_T(x) − r_S(y)` for row-normalized inputs.
pub fn csls_matrix(xw: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let sim = xw * y.transpose();
    let r_src: Vec<f64> = (0..sim.nrows()).map(|i| top_k_mean(sim.row(i).iter().copied(), k)).collect();
    let r_tgt: Vec<f64> = (0..sim.ncols()).map(|j| top_k_mean(sim.column(j).iter().copied(), k)).collect();
    DMatrix::from_fn(sim.nrows(), sim.ncols(), |i, j| 2.0 * sim[(i, j)] - r_src[i] - r_tgt[j])
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Mutual CSLS nearest neighbours.
pub fn induce_dictionary(xw: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Vec<(usize, usize)> {
    let c = csls_matrix(xw, y, k);
    let fwd: Vec<usize> = (0..c.nrows()).map(|i| argmax(c.row(i).iter().copied())).collect();
    let bwd: Vec<usize> = (0..c.ncols()).map(|j| argmax(c.column(j).iter().copied())).collect();
    fwd.iter().enumerate().filter(|&(i, &j)| bwd[j] == i).map(|(i, &j)| (i, j)).collect()
}

/// Self-learning: induce a mutual-CSLS dictionary under the current map,
/// merge in the seed pairs, re-solve Procrustes; repeat `iters` times.
pub fn self_learning_refine(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w0: &AlignmentMap,
    iters: usize,
    csls_k: usize,
) -> Result<AlignmentMap> {
    let mut current = w0.clone();
    for _ in 0..iters {
        let xw = x * &current.w;
        let mut dict = induce_dictionary(&xw, y, csls_k);
        let seen: HashSet<usize> = dict.iter().map(|p| p.0).collect();
        dict.extend(w0.seed_dictionary.iter().copied().filter(|p| !seen.contains(&p.0)));
        if dict.is_empty() {
            log::warn!("self-learning induced an empty dictionary; stopping early");
            break;
        }
        let before = procrustes_objective(x, y, &current.w, &dict);
        let next = procrustes_align(x, y, &dict)?;
        let after = procrustes_objective(x, y, &next.w, &dict);
        let mut history = std::mem::take(&mut current.history);
        history.push(RefineStep { dictionary_size: dict.len(), objective_before: before, objective_after: after });
        current = AlignmentMap {
            w: next.w,
            seed_dictionary: w0.seed_dictionary.clone(),
            iterations: current.iterations + 1,
            history,
        };
    }
    Ok(current)
}

// ------------------------------------------------------------- export

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub scale: f64,
    pub special_sigma: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { scale: 1.0, special_sigma: 0.01 }
    }
}

/// Row layout of a bilingual embedding problem: which vocabulary ids belong
/// to each language and their row positions in `X` / `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageRows {
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
}

impl LanguageRows {
    pub fn new(src: &BTreeSet<TokenId>, tgt: &BTreeSet<TokenId>) -> Self {
        let f = |s: &BTreeSet<TokenId>| s.iter().copied().filter(|&t| !Vocab::is_special(t)).collect();
        LanguageRows { src_ids: f(src), tgt_ids: f(tgt) }
    }

    pub fn gather(&self, m: &EmbeddingMatrix, ids: &[TokenId]) -> DMatrix<f64> {
        DMatrix::from_fn(ids.len(), m.dim, |r, c| m.row(ids[r] as usize)[c])
    }

    pub fn local_dictionary(&self, dict: &[(TokenId, TokenId)]) -> Vec<(usize, usize)> {
        let si: HashMap<TokenId, usize> = self.src_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let ti: HashMap<TokenId, usize> = self.tgt_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        dict.iter().filter_map(|(s, t)| Some((*si.get(s)?, *ti.get(t)?))).collect()
    }
}

/// Joint matrix in the target-aligned space: source rows `x_i W`, target rows
/// `y_j`, tokens used by both languages the mean of the two, specials small
/// random-normal rows. Every row is then normalized to `cfg.scale`.
pub fn export_static_embeddings(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    map: &AlignmentMap,
    rows: &LanguageRows,
    vocab_size: usize,
    cfg: &ExportConfig,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let d = map.w.ncols();
    if x.ncols() != d || y.ncols() != d {
        return Err(Error::Embedding("embedding and map dimensions differ".into()));
    }
    let xw = x * &map.w;
    let mut out = EmbeddingMatrix::zeros(vocab_size, d);
    let mut filled = vec![0u8; vocab_size];
    for (r, &id) in rows.src_ids.iter().enumerate() {
        for c in 0..d {
            out.row_mut(id as usize)[c] += xw[(r, c)];
        }
        filled[id as usize] += 1;
    }
    for (r, &id) in rows.tgt_ids.iter().enumerate() {
        for c in 0..d {
            out.row_mut(id as usize)[c] += y[(r, c)];
        }
        filled[id as usize] += 1;
    }
    let mut rng = seed::rng(seed::derive(seed, &["special-rows"]));
    for (id, &f) in filled.iter().enumerate() {
        if f == 0 {
            for v in out.row_mut(id) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * cfg.special_sigma;
            }
        }
    }
    for id in 0..vocab_size {
        let row = out.row_mut(id);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v *= cfg.scale / n);
        }
    }
    out.row_norm = Some(cfg.scale);
    if !out.is_finite() {
        return Err(Error::Embedding("exported embeddings contain non-finite values".into()));
    }
    Ok(out)
}

// ------------------------------------------------------- end to end

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XembedConfig {
    pub skipgram: SkipgramConfig,
    pub center: bool,
    pub min_seed_pairs: usize,
    pub fallback_fraction: f64,
    pub refine_iters: usize,
    pub csls_k: usize,
    pub export: ExportConfig,
}

impl Default for XembedConfig {
    fn default() -> Self {
        XembedConfig {
            skipgram: SkipgramConfig::default(),
            center: true,
            min_seed_pairs: 25,
            fallback_fraction: 0.2,
            refine_iters: 5,
            csls_k: 10,
            export: ExportConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossLingual {
    pub embeddings: EmbeddingMatrix,
    pub alignment: AlignmentMap,
    pub rows: LanguageRows,
    pub seed_pairs: Vec<(TokenId, TokenId)>,
}

pub fn token_set(corpus: &[TokenSeq]) -> BTreeSet<TokenId> {
    corpus.iter().flatten().copied().collect()
}

/// Skip-gram on the combined corpora, seed dictionary, Procrustes,
/// self-learning, export.
pub fn build_cross_lingual(
    src: &[TokenSeq],
    tgt: &[TokenSeq],
    vocab: &Vocab,
    bijection: Option<&[(String, String)]>,
    cfg: &XembedConfig,
    seed: u64,
) -> Result<CrossLingual> {
    let combined: Vec<TokenSeq> = src.iter().chain(tgt).cloned().collect();
    let raw = train_skipgram(&combined, vocab.len(), &cfg.skipgram, seed)?;
    let src_set = token_set(src);
    let tgt_set = token_set(tgt);
    let fallback = bijection.map(|b| OracleFallback { bijection: b, fraction: cfg.fallback_fraction, seed });
    let seed_pairs = seed_dictionary(vocab, &src_set, &tgt_set, cfg.min_seed_pairs, fallback.as_ref())?;
    let rows = LanguageRows::new(&src_set, &tgt_set);
    let x = normalize_rows(&rows.gather(&raw, &rows.src_ids), cfg.center);
    let y = normalize_rows(&rows.gather(&raw, &rows.tgt_ids), cfg.center);
    let local = rows.local_dictionary(&seed_pairs);
    let w0 = procrustes_align(&x, &y, &local)?;
    let alignment = self_learning_refine(&x, &y, &w0, cfg.refine_iters, cfg.csls_k)?;
    let embeddings = export_static_embeddings(&x, &y, &alignment, &rows, vocab.len(), &cfg.export, seed)?;
    Ok(CrossLingual { embeddings, alignment, rows, seed_pairs })
}

/// Fraction of `pairs` whose source row's nearest target row (cosine) under
/// the exported joint matrix is the paired target token.
pub fn lexicon_induction_accuracy(m: &EmbeddingMatrix, rows: &LanguageRows, pairs: &[(TokenId, TokenId)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let hits = pairs
        .iter()
        .filter(|(s, t)| {
            let sv = m.row(*s as usize);
            let best = rows
                .tgt_ids
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let ca = sv.iter().zip(m.row(a as usize)).map(|(p, q)| p * q).sum::<f64>() / norm(m.row(a as usize));
                    let cb = sv.iter().zip(m.row(b as usize)).map(|(p, q)| p * q).sum::<f64>() / norm(m.row(b as usize));
                    ca.total_cmp(&cb)
                })
                .unwrap();
            best == *t
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Vocabulary ids of the source / target token sets, excluding specials.
pub fn language_ids(vocab: &Vocab, corpus: &[TokenSeq]) -> BTreeSet<TokenId> {
    token_set(corpus).into_iter().filter(|&t| (t as usize) >= N_SPECIALS && (t as usize) < vocab.len()).collect()
}
