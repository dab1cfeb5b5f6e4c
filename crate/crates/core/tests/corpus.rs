use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use unmt_core::corpus::{
    apply_bpe, batch_iter, build_vocab, detokenize, filter_noise_removal, learn_bpe, BatchSize, Corpus, EvalSplit,
    Provenance, Side, TextCorpus, PAD,
};
use unmt_core::synthlang::{build_grammar, make_eval_sets, oracle_reorder, sample_monolingual, GrammarConfig};

fn corpus_of(sentences: Vec<Vec<u32>>) -> Corpus {
    Corpus { side: Side::Src, sentences, provenance: Provenance { origin: "test".into(), fingerprint: String::new() } }
}

#[test]
fn thousand_pair_split_with_289_failures_keeps_711() {
    let g = build_grammar(&GrammarConfig::default(), 2).unwrap();
    let (valid, _) = make_eval_sets(&g, 1000, 1, 3).unwrap();
    let reordered: Vec<Vec<String>> = valid.iter().map(|p| oracle_reorder(&p.src, &g).unwrap()).collect();
    let failed: BTreeSet<usize> = (0..1000).filter(|i| i % 7 == 3 || i % 5 == 0).take(289).collect();
    assert_eq!(failed.len(), 289);
    let mono = TextCorpus::new(Side::Src, vec![vec!["x".to_string()]]);
    let split = EvalSplit { pairs: valid.clone(), reordered_src: reordered.clone(), failed: failed.clone() };
    let f = filter_noise_removal(&mono, &mono, &BTreeSet::new(), &[split]).unwrap();
    let kept = &f.eval[0];
    assert_eq!(kept.pairs.len(), 711);
    assert_eq!(kept.reordered_src.len(), 711);
    let expected: Vec<usize> = (0..1000).filter(|i| !failed.contains(i)).collect();
    for (k, &i) in expected.iter().enumerate() {
        assert_eq!(kept.pairs[k].src, valid[i].src);
        assert_eq!(kept.pairs[k].tgt, valid[i].tgt);
        assert_eq!(kept.reordered_src[k], reordered[i]);
    }
}

#[test]
fn ten_thousand_with_500_failures_leaves_9500_per_variant() {
    let g = build_grammar(&GrammarConfig::default(), 4).unwrap();
    let src = sample_monolingual(&g, Side::Src, 10_000, 5).unwrap();
    let re = TextCorpus::new(Side::SrcReordered, src.sentences.iter().map(|s| oracle_reorder(s, &g).unwrap()).collect());
    let failed: BTreeSet<usize> = (0..10_000).step_by(20).collect();
    assert_eq!(failed.len(), 500);
    let f = filter_noise_removal(&src, &re, &failed, &[]).unwrap();
    assert_eq!(f.original.len(), 9500);
    assert_eq!(f.reordered.len(), 9500);
    assert_eq!(f.removed_mono, failed);
    for (a, b) in f.original.sentences.iter().zip(&f.reordered.sentences) {
        assert_eq!(&oracle_reorder(a, &g).unwrap(), b);
    }
}

#[test]
fn misaligned_corpora_are_rejected() {
    let a = TextCorpus::new(Side::Src, vec![vec!["x".into()], vec!["y".into()]]);
    let b = TextCorpus::new(Side::SrcReordered, vec![vec!["x".into()]]);
    assert!(filter_noise_removal(&a, &b, &BTreeSet::new(), &[]).is_err());
    assert!(filter_noise_removal(&a, &a, &BTreeSet::from([5]), &[]).is_err());
}

#[test]
fn bpe_on_the_synthetic_pair_round_trips_and_encodes() {
    let g = build_grammar(&GrammarConfig::default(), 6).unwrap();
    let src = sample_monolingual(&g, Side::Src, 2000, 1).unwrap();
    let tgt = sample_monolingual(&g, Side::Tgt, 2000, 1).unwrap();
    let bpe = learn_bpe([src.sentences.as_slice(), tgt.sentences.as_slice()], 200).unwrap();
    assert!(!bpe.merges.is_empty());
    let seg_src: Vec<Vec<String>> = src.sentences.iter().map(|s| apply_bpe(&bpe, s)).collect();
    let seg_tgt: Vec<Vec<String>> = tgt.sentences.iter().map(|s| apply_bpe(&bpe, s)).collect();
    let vocab = build_vocab([seg_src.as_slice(), seg_tgt.as_slice()], 1).unwrap();
    for (raw, seg) in src.sentences.iter().zip(&seg_src) {
        assert_eq!(&detokenize(seg), raw);
        let ids = vocab.encode(seg);
        assert_eq!(&vocab.decode(&ids), seg);
    }
    // Disjoint scripts give disjoint subword sets.
    let a: HashSet<&String> = seg_src.iter().flatten().collect();
    let b: HashSet<&String> = seg_tgt.iter().flatten().collect();
    assert!(a.is_disjoint(&b));
}

#[test]
fn token_budget_of_3000() {
    let g = build_grammar(&GrammarConfig::default(), 8).unwrap();
    let src = sample_monolingual(&g, Side::Src, 5000, 2).unwrap();
    let seg: Vec<Vec<String>> = src.sentences.clone();
    let vocab = build_vocab([seg.as_slice()], 1).unwrap();
    let c = corpus_of(seg.iter().map(|s| vocab.encode(s)).collect());
    let mut seen = 0;
    for b in batch_iter(&c, BatchSize::Tokens(3000), 1, 0).unwrap() {
        assert!(b.rows() * b.width <= 3000, "{} x {}", b.rows(), b.width);
        seen += b.rows();
    }
    assert_eq!(seen, c.len());
}

fn lengths() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..40, 1..200)
}

proptest! {
    #[test]
    fn batches_partition_the_corpus(lens in lengths(), n in 1usize..17, seed in any::<u64>(), epoch in 0u64..5) {
        let c = corpus_of(lens.iter().enumerate().map(|(i, &l)| vec![5 + (i % 50) as u32; l]).collect());
        let mut seen = Vec::new();
        for b in batch_iter(&c, BatchSize::Sentences(n), seed, epoch).unwrap() {
            prop_assert!(b.rows() <= n && b.rows() > 0);
            prop_assert_eq!(b.width, b.lengths.iter().copied().max().unwrap());
            for r in 0..b.rows() {
                prop_assert_eq!(b.row(r), c.sentences[b.indices[r]].as_slice());
                let pad = &b.padded[r * b.width + b.lengths[r]..(r + 1) * b.width];
                prop_assert!(pad.iter().all(|&t| t == PAD));
            }
            seen.extend(b.indices);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..c.len()).collect::<Vec<_>>());
    }

    #[test]
    fn token_budget_is_never_exceeded(lens in lengths(), budget in 40usize..400, seed in any::<u64>()) {
        let c = corpus_of(lens.iter().map(|&l| vec![9; l]).collect());
        let mut total = 0;
        for b in batch_iter(&c, BatchSize::Tokens(budget), seed, 0).unwrap() {
            prop_assert!(b.rows() * b.width <= budget || b.rows() == 1);
            total += b.rows();
        }
        prop_assert_eq!(total, c.len());
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch(lens in lengths(), seed in any::<u64>()) {
        let c = corpus_of(lens.iter().map(|&l| vec![9; l]).collect());
        let a: Vec<_> = batch_iter(&c, BatchSize::Sentences(8), seed, 3).unwrap().collect();
        let b: Vec<_> = batch_iter(&c, BatchSize::Sentences(8), seed, 3).unwrap().collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn filtering_preserves_alignment(n in 1usize..300, picks in proptest::collection::btree_set(0usize..300, 0..100)) {
        let failed: BTreeSet<usize> = picks.into_iter().filter(|&i| i < n).collect();
        let orig = TextCorpus::new(Side::Src, (0..n).map(|i| vec![format!("o{i}")]).collect());
        let re = TextCorpus::new(Side::SrcReordered, (0..n).map(|i| vec![format!("r{i}")]).collect());
        let f = filter_noise_removal(&orig, &re, &failed, &[]).unwrap();
        prop_assert_eq!(f.original.len(), n - failed.len());
        prop_assert_eq!(f.reordered.len(), n - failed.len());
        for (a, b) in f.original.sentences.iter().zip(&f.reordered.sentences) {
            prop_assert_eq!(&a[0][1..], &b[0][1..]);
            let i: usize = a[0][1..].parse().unwrap();
            prop_assert!(!failed.contains(&i));
        }
    }
}
