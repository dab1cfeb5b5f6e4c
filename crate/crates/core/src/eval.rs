//! Translation metrics and the analyses built on them.
//!
//! BLEU and chrF follow the SacreBLEU corpus-level definitions on
//! whitespace-tokenized text. BLEU uses no smoothing (a zero n-gram
//! precision gives a zero score); orders for which the hypotheses contain no
//! n-grams at all are dropped from the geometric mean, so short-sentence
//! corpora still score 100 against themselves.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Cell, DataVariant, Objective, RunRecord};

pub const BLEU_ORDER: usize = 4;
pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

fn check_lengths(h: usize, r: usize) -> Result<()> {
    if h != r {
        return Err(Error::Eval(format!("{h} hypotheses but {r} references")));
    }
    Ok(())
}

fn ngram_counts<T: std::hash::Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = BleuStats { hyp_len: h.len(), ref_len: r.len(), ..Default::default() };
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut order = 0;
        for n in 0..BLEU_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            order += 1;
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / order as f64).exp()
    }
}

/// Corpus BLEU on 0–100.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChrfOptions {
    pub include_whitespace: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct ChrfStats {
    hyp: [usize; CHRF_ORDER],
    reference: [usize; CHRF_ORDER],
    matches: [usize; CHRF_ORDER],
}

fn chars_of(s: &str, opts: ChrfOptions) -> Vec<char> {
    if opts.include_whitespace {
        s.split_whitespace().collect::<Vec<_>>().join(" ").chars().collect()
    } else {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }
}

/// Corpus chrF (β = 2, character n-grams 1..6) on 0–100. Statistics are
/// summed over the corpus; precision and recall are averaged over the orders
/// present on both sides before forming the F-score.
pub fn chrf_with<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], opts: ChrfOptions) -> Result<f64> {
    check_lengths(hypotheses.len(), references.len())?;
    let mut st = ChrfStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        let hc = chars_of(h.as_ref(), opts);
        let rc = chars_of(r.as_ref(), opts);
        for n in 1..=CHRF_ORDER {
            let hg = ngram_counts(&hc, n);
            let rg = ngram_counts(&rc, n);
            st.hyp[n - 1] += hc.len().saturating_sub(n - 1);
            st.reference[n - 1] += rc.len().saturating_sub(n - 1);
            st.matches[n - 1] += hg.iter().map(|(g, &c)| c.min(rg.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let (mut p, mut r, mut order) = (0.0, 0.0, 0usize);
    for n in 0..CHRF_ORDER {
        if st.hyp[n] > 0 && st.reference[n] > 0 {
            p += st.matches[n] as f64 / st.hyp[n] as f64;
            r += st.matches[n] as f64 / st.reference[n] as f64;
            order += 1;
        }
    }
    if order == 0 {
        return Ok(0.0);
    }
    p /= order as f64;
    r /= order as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

pub fn chrf<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    chrf_with(hypotheses, references, ChrfOptions::default())
}

// -------------------------------------------------------- length bins

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    /// Inclusive source-length range.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
    pub low_confidence: bool,
}

pub const MIN_BIN_SENTENCES: usize = 5;

/// Corpus BLEU within source-length bins. `upper_edges` are ascending
/// inclusive upper bounds; the first bin starts at length 0.
pub fn bleu_by_length<H: AsRef<str>, R: AsRef<str>, S: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    sources: &[S],
    upper_edges: &[usize],
) -> Result<Vec<LengthBin>> {
    check_lengths(hypotheses.len(), references.len())?;
    check_lengths(hypotheses.len(), sources.len())?;
    if upper_edges.is_empty() || upper_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Eval("length bin edges must be non-empty and strictly ascending".into()));
    }
    let mut stats = vec![(0usize, BleuStats::default()); upper_edges.len()];
    for ((h, r), s) in hypotheses.iter().zip(references).zip(sources) {
        let len = s.as_ref().split_whitespace().count();
        let b = upper_edges
            .iter()
            .position(|&hi| len <= hi)
            .ok_or_else(|| Error::Eval(format!("source length {len} is not covered by the bins")))?;
        stats[b].0 += 1;
        stats[b].1.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    Ok(stats
        .into_iter()
        .enumerate()
        .map(|(i, (count, st))| LengthBin {
            lo: if i == 0 { 0 } else { upper_edges[i - 1] + 1 },
            hi: upper_edges[i],
            count,
            bleu: if count == 0 { 0.0 } else { st.score() },
            low_confidence: count < MIN_BIN_SENTENCES,
        })
        .collect())
}

// ------------------------------------------------ position similarity

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSimilarity {
    pub sim: Vec<Vec<f64>>,
    pub tau: f64,
    /// Mean number of other positions with similarity ≥ τ.
    pub neighborhood_width: f64,
    pub zero_rows: Vec<usize>,
}

impl PositionSimilarity {
    pub fn positions(&self) -> usize {
        self.sim.len()
    }

    pub fn width_at(&self, tau: f64) -> f64 {
        neighborhood_width(&self.sim, tau)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.sim {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }
}

fn neighborhood_width(sim: &[Vec<f64>], tau: f64) -> f64 {
    let p = sim.len();
    if p == 0 {
        return 0.0;
    }
    let total: usize = (0..p).map(|i| (0..p).filter(|&j| j != i && sim[i][j] >= tau).count()).sum();
    total as f64 / p as f64
}

/// Cosine similarity between the first `positions` rows of a position table.
pub fn position_similarity_from_table(table: &[Vec<f64>], positions: usize, tau: f64) -> Result<PositionSimilarity> {
    if positions > table.len() {
        return Err(Error::Eval(format!("{positions} positions requested but the table has {}", table.len())));
    }
    let rows = &table[..positions];
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let zero_rows: Vec<usize> = norms.iter().enumerate().filter(|(_, &n)| n == 0.0).map(|(i, _)| i).collect();
    if !zero_rows.is_empty() {
        log::warn!("position rows {zero_rows:?} have zero norm; their similarities are set to 0");
    }
    let mut sim = vec![vec![0.0; positions]; positions];
    for i in 0..positions {
        for j in i..positions {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            sim[i][j] = v;
            sim[j][i] = v;
        }
    }
    let neighborhood_width = neighborhood_width(&sim, tau);
    Ok(PositionSimilarity { sim, tau, neighborhood_width, zero_rows })
}

pub fn position_similarity(state: &crate::model::ModelState, positions: usize, tau: f64) -> Result<PositionSimilarity> {
    position_similarity_from_table(&state.position_table()?, positions, tau)
}

pub const DEFAULT_TAU: f64 = 0.5;
pub const TAU_SWEEP: [f64; 3] = [0.3, 0.5, 0.7];

// --------------------------------------------------------- reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    SrcToTgt,
    TgtToSrc,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::SrcToTgt => "src->tgt",
            Direction::TgtToSrc => "tgt->src",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    pub direction: Direction,
    pub bleu: f64,
    pub chrf: f64,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell: Cell,
    pub checkpoint: String,
    pub entries: Vec<DirectionScores>,
    pub length_bins: Vec<LengthBin>,
    pub position_width: Vec<(f64, f64)>,
    pub config_hash: String,
    pub master_seed: u64,
}

impl EvalReport {
    pub fn score(&self, d: Direction) -> Option<&DirectionScores> {
        self.entries.iter().find(|e| e.direction == d)
    }
}

// ------------------------------------------------------- comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Bleu,
    Chrf,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Bleu => "BLEU",
            Metric::Chrf => "CHRF",
        }
    }
}

/// Improvement or degradation relative to the original-data counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub value: f64,
    pub tie: bool,
}

impl Delta {
    /// Difference of the two scores as rendered (2 decimals), so the delta
    /// always agrees with the printed cells.
    pub fn between(original: f64, reordered: f64) -> Delta {
        let r = |x: f64| (x * 100.0).round() / 100.0;
        let value = r(r(reordered) - r(original));
        Delta { value, tie: value == 0.0 }
    }

    pub fn render(&self) -> String {
        if self.value >= 0.0 {
            format!("(↑ {:.2})", self.value.abs())
        } else {
            format!("(↓ {:.2})", self.value.abs())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub score: Option<f64>,
    pub delta: Option<Delta>,
}

impl ComparisonCell {
    fn render(&self) -> String {
        match (self.score, self.delta) {
            (Some(s), Some(d)) => format!("{s:.2} {}", d.render()),
            (Some(s), None) => format!("{s:.2}"),
            (None, _) => "-".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: Metric,
    pub cell: Cell,
    pub src_to_tgt: ComparisonCell,
    pub tgt_to_src: ComparisonCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub pair: String,
    pub rows: Vec<ComparisonRow>,
}

fn final_score(r: &RunRecord, metric: Metric, d: Direction) -> Option<f64> {
    let s = r.test.as_ref()?.score(d)?;
    Some(match metric {
        Metric::Bleu => s.bleu,
        Metric::Chrf => s.chrf,
    })
}

/// Four-model comparison with reordered rows carrying deltas against the
/// original-data row of the same objective. Reordered models are never
/// scored target→source.
pub fn compare_runs(pair: &str, records: &[RunRecord]) -> ComparisonTable {
    let find = |c: Cell| records.iter().find(|r| r.cell == c);
    let mut rows = Vec::new();
    for metric in [Metric::Bleu, Metric::Chrf] {
        for objective in [Objective::Mass, Objective::Dae] {
            let orig_cell = Cell { objective, variant: DataVariant::Original };
            let re_cell = Cell { objective, variant: DataVariant::Reordered };
            let orig = find(orig_cell);
            let re = find(re_cell);
            let o_st = orig.and_then(|r| final_score(r, metric, Direction::SrcToTgt));
            let o_ts = orig.and_then(|r| final_score(r, metric, Direction::TgtToSrc));
            let r_st = re.and_then(|r| final_score(r, metric, Direction::SrcToTgt));
            rows.push(ComparisonRow {
                metric,
                cell: orig_cell,
                src_to_tgt: ComparisonCell { score: o_st, delta: None },
                tgt_to_src: ComparisonCell { score: o_ts, delta: None },
            });
            rows.push(ComparisonRow {
                metric,
                cell: re_cell,
                src_to_tgt: ComparisonCell {
                    score: r_st,
                    delta: match (o_st, r_st) {
                        (Some(o), Some(r)) => Some(Delta::between(o, r)),
                        _ => None,
                    },
                },
                tgt_to_src: ComparisonCell { score: None, delta: None },
            });
        }
    }
    ComparisonTable { pair: pair.to_string(), rows }
}

impl ComparisonTable {
    pub fn render_text(&self) -> String {
        let header = ["metric", "model", "S->T", "T->S"];
        let mut lines: Vec<[String; 4]> = vec![header.map(String::from)];
        for r in &self.rows {
            lines.push([
                r.metric.label().to_string(),
                r.cell.label(),
                r.src_to_tgt.render(),
                r.tgt_to_src.render(),
            ]);
        }
        let widths: Vec<usize> = (0..4).map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("language pair: {}\n", self.pair);
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        for r in &self.rows {
            if r.src_to_tgt.delta.is_some_and(|d| d.tie) {
                let _ = writeln!(out, "note: {} {} ties its original-data counterpart", r.metric.label(), r.cell.label());
            }
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("metric,model,src_to_tgt,src_to_tgt_delta,tgt_to_src\n");
        let f = |x: Option<f64>| x.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.metric.label(),
                r.cell.label(),
                f(r.src_to_tgt.score),
                r.src_to_tgt.delta.map(|d| format!("{:.2}", d.value)).unwrap_or_default(),
                f(r.tgt_to_src.score)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_scores_100() {
        let h = ["the cat sat on the mat", "a b"];
        assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        assert!((chrf(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        assert!((bleu(&["x"], &["x"]).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn clipped_unigrams_without_higher_orders_score_zero() {
        // p1 = 1/4 after clipping, p2 = p3 = p4 = 0.
        let s = BleuStats::sentence("the the the the", "the cat sat down");
        assert_eq!(s.matches, [1, 0, 0, 0]);
        assert_eq!(bleu(&["the the the the"], &["the cat sat down"]).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(bleu(&["a"], &["a", "b"]).is_err());
        assert!(chrf(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn disjoint_characters_give_zero_chrf() {
        assert_eq!(chrf(&["abcd"], &["wxyz"]).unwrap(), 0.0);
    }

    #[test]
    fn single_bin_equals_corpus_bleu() {
        let h = ["a b c d e", "a b x d", "q r s"];
        let r = ["a b c d e", "a b c d", "q r s t"];
        let src = ["1 2 3 4 5", "1 2 3 4", "1 2 3 4"];
        let bins = bleu_by_length(&h, &r, &src, &[30]).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].bleu, bleu(&h, &r).unwrap());
        assert_eq!(bins[0].count, 3);
        assert!(bins[0].low_confidence);
        assert!(bleu_by_length(&h, &r, &src, &[3]).is_err());
    }

    #[test]
    fn rigged_length_bins() {
        let mut h = Vec::new();
        let mut r = Vec::new();
        let mut s = Vec::new();
        for len in 1..=20usize {
            let sent: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
            let sent = sent.join(" ");
            h.push(if len <= 10 { sent.clone() } else { String::new() });
            r.push(sent.clone());
            s.push(sent);
        }
        let bins = bleu_by_length(&h, &r, &s, &[10, 20]).unwrap();
        assert_eq!(bins[0].bleu, 100.0);
        assert_eq!(bins[1].bleu, 0.0);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 20);
    }

    #[test]
    fn position_similarity_degenerate_tables() {
        let same = vec![vec![0.3, -1.0, 2.0]; 6];
        let ps = position_similarity_from_table(&same, 6, 0.5).unwrap();
        assert!(ps.sim.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(ps.neighborhood_width, 5.0);

        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let ps = position_similarity_from_table(&eye, 4, 0.5).unwrap();
        assert_eq!(ps.neighborhood_width, 0.0);
        for i in 0..4 {
            assert_eq!(ps.sim[i][i], 1.0);
        }
        assert!(position_similarity_from_table(&eye, 5, 0.5).is_err());

        let mut z = eye.clone();
        z[2] = vec![0.0; 4];
        let ps = position_similarity_from_table(&z, 4, 0.5).unwrap();
        assert_eq!(ps.zero_rows, vec![2]);
        assert!(ps.sim[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deltas_render_like_the_results_table() {
        assert_eq!(Delta::between(14.16, 14.63).render(), "(↑ 0.47)");
        assert_eq!(Delta::between(21.03, 15.22).render(), "(↓ 5.81)");
        let tie = Delta::between(3.0, 3.0);
        assert_eq!(tie.render(), "(↑ 0.00)");
        assert!(tie.tie);
    }
}
