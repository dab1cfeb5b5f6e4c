mod common;

use std::collections::BTreeSet;

use common::{gaussian, random_orthogonal, unit_rows};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use unmt_core::corpus::{TokenId, TokenSeq, N_SPECIALS};
use unmt_core::seed;
use unmt_core::xembed::{
    export_static_embeddings, lexicon_induction_accuracy, procrustes_align, procrustes_objective,
    self_learning_refine, train_skipgram, ExportConfig, LanguageRows, SkipgramConfig,
};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn co_occurrence_cliques_cluster() {
    // Tokens 5..15 only ever appear with each other, likewise 15..25.
    let mut rng = seed::rng(3);
    let corpus: Vec<TokenSeq> = (0..3000)
        .map(|i| {
            let base = if i % 2 == 0 { 5 } else { 15 };
            (0..8).map(|_| base + rng.random_range(0..10)).collect()
        })
        .collect();
    let cfg = SkipgramConfig { dim: 16, epochs: 3, ..SkipgramConfig::default() };
    let e = train_skipgram(&corpus, 25, &cfg, 1).unwrap();
    let (mut intra, mut inter, mut ni, mut nx) = (0.0, 0.0, 0, 0);
    for a in 5..25usize {
        for b in (a + 1)..25 {
            let c = cosine(e.row(a), e.row(b));
            if (a < 15) == (b < 15) {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                nx += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / nx as f64);
    assert!(intra > inter + 0.2, "intra {intra} inter {inter}");
}

#[test]
fn planted_rotation_full_dictionary() {
    common::criterion_procrustes().unwrap();
}

fn planted(n: usize, d: usize, noise: f64, s: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let x = unit_rows(&gaussian(n, d, s));
    let r = random_orthogonal(d, s + 1);
    let y = unit_rows(&(&x * &r + gaussian(n, d, s + 2) * noise));
    (x, y, r)
}

fn corrupt(n: usize, frac: f64, s: u64) -> Vec<(usize, usize)> {
    let mut rng = seed::rng(s);
    (0..n).map(|i| if rng.random::<f64>() < frac { (i, rng.random_range(0..n)) } else { (i, i) }).collect()
}

#[test]
fn noisy_dictionaries_degrade_monotonically() {
    let (x, y, r) = planted(500, 24, 0.0, 10);
    let err = |frac: f64| -> f64 {
        (0..5).map(|s| (&procrustes_align(&x, &y, &corrupt(500, frac, 100 + s)).unwrap().w - &r).norm()).sum::<f64>()
    };
    let (e0, e10, e50) = (err(0.0), err(0.1), err(0.5));
    assert!(e0 < 1e-9);
    assert!(e10 < e50, "10% noise {e10} vs 50% noise {e50}");
}

#[test]
fn refinement_beats_a_ten_pair_seed() {
    let (x, y, r) = planted(400, 32, 0.05, 20);
    let seed_dict: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
    let w0 = procrustes_align(&x, &y, &seed_dict).unwrap();
    let refined = self_learning_refine(&x, &y, &w0, 5, 10).unwrap();
    let (e0, e1) = ((&w0.w - &r).norm(), (&refined.w - &r).norm());
    assert!(e1 < e0, "refined {e1} vs seed-only {e0}");
    assert!(refined.orthogonality_error() < 1e-9);
}

#[test]
fn lexicon_induction_on_planted_pairs() {
    // 300 word pairs; 30 of them seed the alignment, 100 held-out pairs are
    // scored through the exported joint matrix.
    let (n, d) = (300, 32);
    let (x, y, _) = planted(n, d, 0.1, 30);
    let src: BTreeSet<TokenId> = (0..n).map(|i| (N_SPECIALS + i) as TokenId).collect();
    let tgt: BTreeSet<TokenId> = (0..n).map(|i| (N_SPECIALS + n + i) as TokenId).collect();
    let rows = LanguageRows::new(&src, &tgt);
    let seed_dict: Vec<(usize, usize)> = (0..30).map(|i| (i, i)).collect();
    let w0 = procrustes_align(&x, &y, &seed_dict).unwrap();
    let map = self_learning_refine(&x, &y, &w0, 5, 10).unwrap();
    let m = export_static_embeddings(&x, &y, &map, &rows, N_SPECIALS + 2 * n, &ExportConfig::default(), 1).unwrap();
    let held_out: Vec<(TokenId, TokenId)> =
        (200..300).map(|i| ((N_SPECIALS + i) as TokenId, (N_SPECIALS + n + i) as TokenId)).collect();
    let acc = lexicon_induction_accuracy(&m, &rows, &held_out);
    assert!(acc >= 0.8, "held-out accuracy {acc}");
    for r in 0..m.rows {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn procrustes_is_orthogonal_and_optimal(s in any::<u64>(), d in 2usize..12, n_pairs in 1usize..40) {
        let x = gaussian(40, d, s);
        let y = gaussian(40, d, s ^ 1);
        let mut rng = seed::rng(s ^ 2);
        let dict: Vec<(usize, usize)> = (0..n_pairs).map(|_| (rng.random_range(0..40), rng.random_range(0..40))).collect();
        let map = procrustes_align(&x, &y, &dict).unwrap();
        prop_assert!(map.orthogonality_error() <= 1e-9);
        let best = procrustes_objective(&x, &y, &map.w, &dict);
        for t in 0..5 {
            let q = random_orthogonal(d, s.wrapping_add(t + 7));
            prop_assert!(best <= procrustes_objective(&x, &y, &q, &dict) + 1e-9);
        }
    }
}
