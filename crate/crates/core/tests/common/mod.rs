//! Checks shared by the acceptance harness and the per-module suites. Each
//! returns a short summary on success and a diagnostic on failure.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use unmt_core::corpus::{filter_noise_removal, Side, TextCorpus, TokenId, TokenSeq, Vocab, MASK, N_SPECIALS};
use unmt_core::eval::{bleu, chrf};
use unmt_core::model::{Example, ModelConfig, ModelState, OptimConfig, Optimizer, Precision};
use unmt_core::noise::{dae_dropout_blank, dae_shuffle, mass_mask, NoiseSpec};
use unmt_core::pipeline::{cmd_prepare, load_prepared, ExperimentConfig};
use unmt_core::seed;
use unmt_core::synthlang::{build_grammar, inject_parse_failures, oracle_reorder, sample_monolingual, GrammarConfig};
use unmt_core::xembed::{procrustes_align, self_learning_refine, EmbeddingMatrix};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn vocab(n_regular: usize) -> Vocab {
    Vocab::from_tokens((0..n_regular).map(|i| format!("w{i}"))).unwrap()
}

/// Sentence of distinct regular tokens.
pub fn distinct_sentence(len: usize, offset: usize) -> TokenSeq {
    (0..len).map(|i| (N_SPECIALS + offset + i) as TokenId).collect()
}

// ------------------------------------------------------------- noise

/// MASS fragment multinomial measured from the corrupted tokens themselves
/// (mask symbol / changed token / unchanged token), plus the contiguity
/// and outside-fragment invariants.
pub fn mass_statistics(n_fragment_tokens: usize) -> Result<[f64; 3], String> {
    let v = vocab(2000);
    let spec = NoiseSpec::default();
    let (mut masked, mut random, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
    let mut i = 0u64;
    while total < n_fragment_tokens {
        let len = 4 + (i % 17) as usize;
        let s = distinct_sentence(len, (i as usize * 7) % 1000);
        let ex = ok(mass_mask(&s, &spec, &v, seed::mix(&[11, i])))?;
        let k = ((len as f64) * spec.mass_ratio).round().max(1.0) as usize;
        ensure!(ex.target_fragment.len() == k, "fragment of {} tokens for len {len}, want {k}", ex.target_fragment.len());
        ensure!(ex.corrupted_input.len() == len, "corrupted length changed");
        let (a, b) = (ex.fragment_start, ex.fragment_start + k);
        ensure!(b <= len, "fragment runs past the sentence");
        ensure!(ex.target_fragment == s[a..b], "target fragment is not the original span");
        for p in 0..len {
            let (orig, got) = (s[p], ex.corrupted_input[p]);
            if p < a || p >= b {
                ensure!(orig == got, "token outside the fragment changed at {p}");
            } else if got == MASK {
                masked += 1;
            } else if got != orig {
                ensure!((got as usize) >= N_SPECIALS, "random replacement used a special token");
                random += 1;
            } else {
                kept += 1;
            }
        }
        total += k;
        i += 1;
    }
    let t = total as f64;
    Ok([masked as f64 / t, random as f64 / t, kept as f64 / t])
}

/// Maximum displacement of a `k`-shuffle over `trials` sentences of
/// distinct tokens; errors if any output is not a permutation.
pub fn shuffle_max_displacement(k: f64, len: usize, trials: u64) -> Result<usize, String> {
    let s = distinct_sentence(len, 0);
    let mut worst = 0usize;
    for t in 0..trials {
        let out = dae_shuffle(&s, k, seed::mix(&[21, t]));
        let mut a = out.clone();
        a.sort_unstable();
        ensure!(a == s, "shuffle output is not a permutation of the input");
        for (new, tok) in out.iter().enumerate() {
            let old = (*tok as usize) - N_SPECIALS;
            worst = worst.max(new.abs_diff(old));
        }
    }
    Ok(worst)
}

/// Empirical (deletion, blank) rates over at least `n_tokens` input tokens.
pub fn dropout_blank_rates(p_drop: f64, p_blank: f64, n_tokens: usize) -> (f64, f64) {
    let s = distinct_sentence(20, 0);
    let (mut seen, mut survived, mut blanked) = (0usize, 0usize, 0usize);
    let mut t = 0u64;
    while seen < n_tokens {
        let out = dae_dropout_blank(&s, p_drop, p_blank, MASK, seed::mix(&[31, t]));
        seen += s.len();
        survived += out.len();
        blanked += out.iter().filter(|&&x| x == MASK).count();
        t += 1;
    }
    (1.0 - survived as f64 / seen as f64, blanked as f64 / survived as f64)
}

pub fn criterion_noise() -> Check {
    let [m, r, k] = mass_statistics(100_000)?;
    ensure!((m - 0.8).abs() <= 0.01, "masked fraction {m:.4}");
    ensure!((r - 0.1).abs() <= 0.01, "random fraction {r:.4}");
    ensure!((k - 0.1).abs() <= 0.01, "kept fraction {k:.4}");
    let worst = shuffle_max_displacement(3.0, 20, 10_000)?;
    ensure!(worst <= 3, "shuffle moved a token {worst} positions");
    let (drop, _) = dropout_blank_rates(0.1, 0.0, 100_000);
    let (_, blank) = dropout_blank_rates(0.0, 0.1, 100_000);
    ensure!((drop - 0.1).abs() <= 0.01, "dropout rate {drop:.4}");
    ensure!((blank - 0.1).abs() <= 0.01, "blank rate {blank:.4}");
    Ok(format!("mass {m:.4}/{r:.4}/{k:.4}, max shift {worst}, drop {drop:.4}, blank {blank:.4}"))
}

// -------------------------------------------------------- procrustes

pub fn gaussian(n: usize, d: usize, s: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(s);
    DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
}

/// Random orthogonal matrix: Q of a Gaussian matrix's QR with the sign
/// convention fixed by R's diagonal.
pub fn random_orthogonal(d: usize, s: u64) -> DMatrix<f64> {
    let qr = gaussian(d, d, s).qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn unit_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m.clone();
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    m
}

pub fn criterion_procrustes() -> Check {
    let (n, d) = (400, 32);
    let x = unit_rows(&gaussian(n, d, 1));
    let r = random_orthogonal(d, 2);
    let y = &x * &r;
    let full: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let map = ok(procrustes_align(&x, &y, &full))?;
    let err = (&map.w - &r).norm();
    ensure!(err <= 1e-6, "planted rotation recovered with error {err:e}");

    let mut worst = map.orthogonality_error();
    // Noisy dictionaries and the refinement loop must stay orthogonal too.
    let yn = unit_rows(&(&y + gaussian(n, d, 3) * 0.05));
    let mut rng = seed::rng(4);
    let noisy: Vec<(usize, usize)> =
        (0..n).map(|i| if rng.random::<f64>() < 0.3 { (i, rng.random_range(0..n)) } else { (i, i) }).collect();
    let m1 = ok(procrustes_align(&x, &yn, &noisy))?;
    worst = worst.max(m1.orthogonality_error());
    let few: Vec<(usize, usize)> = (0..10).map(|i| (i, i)).collect();
    let m2 = ok(procrustes_align(&x, &yn, &few))?;
    worst = worst.max(m2.orthogonality_error());
    let m3 = ok(self_learning_refine(&x, &yn, &m2, 3, 10))?;
    worst = worst.max(m3.orthogonality_error());
    ensure!(worst <= 1e-5, "orthogonality error {worst:e}");
    Ok(format!("|W-R|_F = {err:.2e}, max |WtW-I| = {worst:.2e}"))
}

// ----------------------------------------------------------- metrics

/// Mini-corpus with hand-counted n-gram statistics:
/// p1 = 9/12, p2 = 5/9, p3 = 2/6, p4 = 1/3, hyp length 12 = ref length.
pub const GOLDEN_HYP: [&str; 3] = ["the cat sat on the mat", "a dog ran", "birds fly high"];
pub const GOLDEN_REF: [&str; 3] = ["the cat sat on a mat", "the dog ran away", "birds fly"];

pub fn golden_bleu() -> f64 {
    100.0 * ((9.0 / 12.0) * (5.0 / 9.0) * (2.0 / 6.0) * (1.0 / 3.0f64)).powf(0.25)
}

/// First two sentences only: p = 7/9, 4/7, 2/5, 1/3; hyp 9 vs ref 10 words.
pub fn golden_bleu_short() -> f64 {
    let bp = (1.0 - 10.0 / 9.0f64).exp();
    100.0 * bp * ((7.0 / 9.0) * (4.0 / 7.0) * (2.0 / 5.0) * (1.0 / 3.0f64)).powf(0.25)
}

pub fn criterion_metrics() -> Check {
    let b = ok(bleu(&GOLDEN_HYP, &GOLDEN_REF))?;
    ensure!((b - golden_bleu()).abs() <= 1e-4, "golden BLEU {b} vs {}", golden_bleu());
    let b2 = ok(bleu(&GOLDEN_HYP[..2], &GOLDEN_REF[..2]))?;
    ensure!((b2 - golden_bleu_short()).abs() <= 1e-4, "brevity golden {b2} vs {}", golden_bleu_short());
    let z = ok(bleu(&["the the the the"], &["the cat sat down"]))?;
    ensure!(z == 0.0, "clipped unigram case scored {z}");
    // "abc"/"abd": P = R = (2/3 + 1/2 + 0) / 3.
    let c1 = ok(chrf(&["abc"], &["abd"]))?;
    ensure!((c1 - 100.0 * 7.0 / 18.0).abs() <= 1e-4, "chrF abc/abd {c1}");
    // "ab"/"abc": P = 1, R = (2/3 + 1/2) / 2 = 7/12, F2 = 5PR / (4P + R) = 7/11.
    let c2 = ok(chrf(&["ab"], &["abc"]))?;
    ensure!((c2 - 100.0 * 7.0 / 11.0).abs() <= 1e-4, "chrF ab/abc {c2}");
    let c3 = ok(chrf(&["abcd"], &["wxyz"]))?;
    ensure!(c3 == 0.0, "disjoint chrF {c3}");
    let ib = ok(bleu(&GOLDEN_REF, &GOLDEN_REF))?;
    let ic = ok(chrf(&GOLDEN_REF, &GOLDEN_REF))?;
    ensure!((ib - 100.0).abs() < 1e-9 && (ic - 100.0).abs() < 1e-9, "identity scores {ib} / {ic}");
    Ok(format!("BLEU {b:.4} (hand {:.4}), chrF {c1:.4} / {c2:.4}, identity 100", golden_bleu()))
}

// ------------------------------------------------------------- model

pub fn tiny_config(precision: Precision) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        d_model: 16,
        d_ffn: 32,
        max_positions: 16,
        dropout: 0.0,
        tied_output: true,
        precision,
    }
}

pub fn random_embeddings(v: usize, d: usize, s: u64) -> EmbeddingMatrix {
    let mut e = EmbeddingMatrix::zeros(v, d);
    let mut rng = seed::rng(s);
    for x in e.data.iter_mut() {
        *x = rng.random::<f64>() - 0.5;
    }
    e
}

pub fn random_batch(n: usize, v: usize, max_len: usize, s: u64) -> Vec<Example> {
    let mut rng = seed::rng(s);
    (0..n)
        .map(|_| {
            let mut tok = |len: usize| -> TokenSeq {
                (0..len).map(|_| rng.random_range(N_SPECIALS..v) as TokenId).collect()
            };
            let ls = 2 + (s as usize + n) % (max_len - 2);
            let src = tok(ls);
            let tgt = tok(1 + ls / 2);
            Example::full(src, &tgt)
        })
        .collect()
}

fn loss_f64(state: &ModelState, batch: &[Example]) -> Result<f64, String> {
    let l = ok(state.forward_loss(batch, &mut None))?;
    ok(l.value.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()))
}

/// Central-difference check on `n_params` random scalar parameters; returns
/// the largest relative error.
pub fn gradient_check(n_params: usize, s: u64) -> Result<f64, String> {
    let v = 24;
    let cfg = tiny_config(Precision::F64);
    let state = ok(ModelState::build(&cfg, &random_embeddings(v, 16, s), s))?;
    let batch = random_batch(3, v, 7, s);
    let loss = ok(state.forward_loss(&batch, &mut None))?;
    let grads = ok(loss.value.backward())?;
    let vars = state.named_vars();
    let mut rng = seed::rng(seed::mix(&[s, 99]));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..n_params {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let shape = var.as_tensor().shape().clone();
        let flat: Vec<f64> = ok(var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f64>()))?;
        let idx = rng.random_range(0..flat.len());
        let g = grads.get(var.as_tensor()).ok_or_else(|| format!("no gradient for {name}"))?;
        let analytic = ok(g.flatten_all().and_then(|t| t.to_vec1::<f64>()))?[idx];
        let probe = |delta: f64| -> Result<f64, String> {
            let mut p = flat.clone();
            p[idx] += delta;
            ok(var.set(&ok(Tensor::from_vec(p, shape.clone(), var.as_tensor().device()))?))?;
            loss_f64(&state, &batch)
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        probe(0.0)?;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Embedding checksum and position table before/after `steps` optimizer
/// steps.
pub fn frozen_embedding_run(steps: usize) -> Result<(String, String, f64), String> {
    let v = 30;
    let mut cfg = tiny_config(Precision::F32);
    cfg.dropout = 0.1;
    let state = ok(ModelState::build(&cfg, &random_embeddings(v, 16, 5), 5))?;
    let before = ok(state.embedding_checksum())?;
    let pos0 = ok(state.position_table())?;
    let mut opt = ok(Optimizer::new(&state, OptimConfig::default()))?;
    for step in 0..steps {
        let batch = random_batch(8, v, 10, step as u64);
        let mut drop = unmt_core::model::Dropout::new(cfg.dropout, step as u64);
        let loss = ok(state.forward_loss(&batch, &mut drop))?;
        ok(opt.backward_step(&loss.value))?;
    }
    let after = ok(state.embedding_checksum())?;
    let pos1 = ok(state.position_table())?;
    let moved = pos0.iter().flatten().zip(pos1.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((before, after, moved))
}

/// Loss with an all-zero embedding table (tied output, zero bias): every
/// logit is 0, so the loss is ln|V|.
pub fn uniform_loss(v: usize) -> Result<f64, String> {
    let cfg = tiny_config(Precision::F64);
    let state = ok(ModelState::build(&cfg, &EmbeddingMatrix::zeros(v, 16), 3))?;
    loss_f64(&state, &random_batch(4, v, 9, 3))
}

pub fn criterion_model() -> Check {
    let fd = gradient_check(20, 17)?;
    ensure!(fd <= 1e-3, "finite-difference relative error {fd:e}");
    let (before, after, moved) = frozen_embedding_run(100)?;
    ensure!(before == after, "token embeddings changed during training");
    ensure!(moved > 0.0, "position embeddings did not train");
    let v = 37;
    let l = uniform_loss(v)?;
    ensure!((l - (v as f64).ln()).abs() <= 1e-6, "uniform loss {l} vs ln V {}", (v as f64).ln());
    Ok(format!("FD rel err {fd:.2e}, checksum stable over 100 steps, uniform loss - ln|V| = {:.1e}", l - (v as f64).ln()))
}

// -------------------------------------------------------- pipeline

pub fn small_experiment(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = "integrity".into();
    cfg.output_dir = dir.to_path_buf();
    cfg.data.train_per_side = 3000;
    cfg.data.valid = 100;
    cfg.data.test = 200;
    cfg.data.fail_rate = 0.05;
    cfg
}

/// Filtering on a deduplicated corpus: both outputs must lose exactly the
/// failed indices, recovered by order-preserving alignment to the inputs.
pub fn filtering_removes_same_indices(n: usize, s: u64) -> Check {
    let g = ok(build_grammar(&GrammarConfig::default(), s))?;
    let raw = ok(sample_monolingual(&g, Side::Src, n, s))?;
    let mut seen = HashSet::new();
    let uniq: Vec<Vec<String>> = raw.sentences.into_iter().filter(|x| seen.insert(x.clone())).collect();
    let src = TextCorpus::new(Side::Src, uniq);
    let (re, failed) = ok(inject_parse_failures(&src, &g, 0.05, s))?;
    let f = ok(filter_noise_removal(&src, &re, &failed, &[]))?;
    let removed = |input: &[Vec<String>], output: &[Vec<String>]| -> BTreeSet<usize> {
        let mut j = 0;
        let mut gone = BTreeSet::new();
        for (i, x) in input.iter().enumerate() {
            if j < output.len() && output[j] == *x {
                j += 1;
            } else {
                gone.insert(i);
            }
        }
        gone
    };
    let a = removed(&src.sentences, &f.original.sentences);
    let b = removed(&re.sentences, &f.reordered.sentences);
    ensure!(f.original.len() == f.reordered.len(), "filtered counts differ");
    ensure!(a == b, "original and reordered lost different indices");
    ensure!(a == failed, "removed indices differ from the failed set");
    Ok(format!("{} of {} removed from both", a.len(), src.len()))
}

pub fn criterion_pipeline(dir: &std::path::Path) -> Check {
    let detail = filtering_removes_same_indices(4000, 5)?;
    let cfg = small_experiment(dir);
    let m = ok(cmd_prepare(&cfg))?;
    let p = ok(load_prepared(&cfg))?;
    for split in ["mono", "valid", "test"] {
        let (a, b) = (format!("{split}.src"), format!("{split}.src-reordered"));
        ensure!(m.lines(&a) == m.lines(&b), "{a} and {b} have different counts");
    }
    ensure!(
        m.lines("mono.src").unwrap_or(0) + m.removed_mono.len() == cfg.data.train_per_side,
        "mono counts do not account for the removed sentences"
    );
    let orig = &p.corpus("mono.src").sentences;
    let re = &p.corpus("mono.src-reordered").sentences;
    let want: BTreeSet<Vec<String>> = orig.iter().map(|s| oracle_reorder(s, &p.grammar).unwrap()).collect();
    let got: BTreeSet<Vec<String>> = re.iter().cloned().collect();
    ensure!(want == got, "reordered training sources differ from oracle_reorder of the originals");
    for split in ["valid", "test"] {
        let o = &p.corpus(&format!("{split}.src")).sentences;
        let r = &p.corpus(&format!("{split}.src-reordered")).sentences;
        for (a, b) in o.iter().zip(r) {
            ensure!(oracle_reorder(a, &p.grammar).ok().as_ref() == Some(b), "{split} reordered source is not the oracle reordering");
        }
    }
    Ok(format!("{detail}; prepared {} sentences per variant, sets equal", orig.len()))
}
