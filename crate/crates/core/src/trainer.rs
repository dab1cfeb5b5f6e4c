//! Two-stage training: MASS or DAE pre-training on both languages, then
//! iterative back-translation, with early stopping and per-epoch bookkeeping.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_iter, detokenize, BatchIter, BatchSize, Corpus, TokenId, TokenSeq, Vocab, EOS};
use crate::error::{Error, Result};
use crate::eval::{self, bleu, bleu_by_length, chrf, Direction, DirectionScores, EvalReport, TAU_SWEEP};
use crate::model::{Dropout, Example, ModelConfig, ModelState, OptimConfig, Optimizer};
use crate::noise::{dae_noise, mass_mask, NoiseSpec};
use crate::seed;
use crate::xembed::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mass,
    Dae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataVariant {
    Original,
    Reordered,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Mass => "mass",
            Objective::Dae => "dae",
        }
    }
}

impl DataVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            DataVariant::Original => "original",
            DataVariant::Reordered => "reordered",
        }
    }
}

/// One point of the {MASS, DAE} × {original, reordered} grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub objective: Objective,
    pub variant: DataVariant,
}

impl Cell {
    pub const ALL: [Cell; 4] = [
        Cell { objective: Objective::Mass, variant: DataVariant::Original },
        Cell { objective: Objective::Mass, variant: DataVariant::Reordered },
        Cell { objective: Objective::Dae, variant: DataVariant::Original },
        Cell { objective: Objective::Dae, variant: DataVariant::Reordered },
    ];

    pub fn new(objective: Objective, variant: DataVariant) -> Self {
        Cell { objective, variant }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.objective.as_str(), self.variant.as_str())
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cell::ALL
            .into_iter()
            .find(|c| c.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown grid cell `{s}` (expected e.g. dae-original)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimizer steps per epoch. In fine-tuning one step covers both
    /// directions.
    pub epoch_size: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub patience: usize,
    pub eval_every_epoch: bool,
    /// Fine-tuning only: also take a self-supervised step per direction.
    pub mixed_objective: bool,
    pub valid_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epoch_size: 2000,
            max_epochs: 30,
            batch_size: 64,
            optim: OptimConfig::default(),
            patience: 5,
            eval_every_epoch: true,
            mixed_objective: false,
            valid_batch: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("epoch_size and max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.valid_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.optim.learning_rate > 0.0) || !(self.optim.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Optimizer steps taken so far in this stage.
    pub steps: usize,
    pub train_loss: Option<f64>,
    pub valid_loss: Option<f64>,
    pub bleu_src_tgt: Option<f64>,
    pub bleu_tgt_src: Option<f64>,
    pub skipped_steps: usize,
    pub checkpoint: Option<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: Cell,
    pub master_seed: u64,
    pub config_hash: String,
    pub pretrain: Vec<EpochRecord>,
    pub finetune: Vec<EpochRecord>,
    pub best_pretrain_epoch: Option<usize>,
    pub best_finetune_epoch: Option<usize>,
    pub best_checkpoint: Option<String>,
    pub embedding_checksum: String,
    pub test: Option<EvalReport>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn new(cell: Cell, master_seed: u64, config_hash: &str, embedding_checksum: String) -> Self {
        RunRecord {
            cell,
            master_seed,
            config_hash: config_hash.to_string(),
            pretrain: Vec::new(),
            finetune: Vec::new(),
            best_pretrain_epoch: None,
            best_finetune_epoch: None,
            best_checkpoint: None,
            embedding_checksum,
            test: None,
            wall_seconds: 0.0,
        }
    }

    /// One JSON object per epoch record, then a final summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in self.pretrain.iter().chain(&self.finetune) {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "cell": self.cell, "record": e }))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "cell": self.cell, "summary": self }))?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let last = text.lines().rev().find(|l| !l.trim().is_empty()).ok_or_else(|| Error::Train("empty run log".into()))?;
        let v: serde_json::Value = serde_json::from_str(last)?;
        Ok(serde_json::from_value(v["summary"].clone())?)
    }
}

/// A parallel evaluation split. Model inputs are BPE-encoded; references are
/// detokenized word strings.
#[derive(Debug, Clone)]
pub struct EvalSet {
    /// src→tgt inputs: original or reordered sources depending on the variant.
    pub src: Vec<TokenSeq>,
    pub tgt: Vec<TokenSeq>,
    /// Original-order source sentences, the tgt→src reference.
    pub src_ref: Vec<String>,
    pub tgt_ref: Vec<String>,
    /// Source length in words, for length-stratified BLEU.
    pub src_words: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Everything one grid cell trains and evaluates on.
#[derive(Debug, Clone)]
pub struct CellData {
    pub vocab: Vocab,
    pub src_mono: Corpus,
    pub tgt_mono: Corpus,
    pub valid: EvalSet,
    pub test: EvalSet,
    pub embeddings: EmbeddingMatrix,
}

impl CellData {
    /// Positions that receive gradient: the longest training sentence plus
    /// the EOS slot, capped at the table size.
    pub fn trained_positions(&self, table: usize) -> usize {
        (self.src_mono.max_len().max(self.tgt_mono.max_len()) + 1).min(table)
    }

    pub fn language_mask(&self, corpus: &Corpus) -> Vec<bool> {
        let mut m = vec![false; self.vocab.len()];
        for &t in corpus.sentences.iter().flatten() {
            m[t as usize] = true;
        }
        m[EOS as usize] = true;
        m
    }

    /// Back-translation must only ever see monolingual data: no evaluation
    /// sentence may occur in either training corpus.
    pub fn check_disjoint(&self) -> Result<()> {
        let eval_src: HashSet<&TokenSeq> = self.valid.src.iter().chain(&self.test.src).collect();
        let eval_tgt: HashSet<&TokenSeq> = self.valid.tgt.iter().chain(&self.test.tgt).collect();
        if let Some(i) = self.src_mono.sentences.iter().position(|s| eval_src.contains(s)) {
            return Err(Error::Train(format!("source training sentence {i} also occurs in an evaluation split")));
        }
        if let Some(i) = self.tgt_mono.sentences.iter().position(|s| eval_tgt.contains(s)) {
            return Err(Error::Train(format!("target training sentence {i} also occurs in an evaluation split")));
        }
        Ok(())
    }
}

/// Where a stage writes checkpoints and what it stamps into them.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
    pub vocab_fingerprint: String,
    pub config_hash: String,
    pub master_seed: u64,
}

impl CheckpointSink {
    fn save(&self, state: &ModelState, cell: Cell, stage: &str, epoch: usize) -> Result<Option<String>> {
        let Some(dir) = &self.dir else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let name = format!("{stage}-epoch{epoch:03}.ckpt");
        let progress = serde_json::json!({
            "cell": cell, "stage": stage, "epoch": epoch,
            "config_hash": self.config_hash, "master_seed": self.master_seed,
        });
        state.save(&dir.join(&name), &self.vocab_fingerprint, &progress)?;
        Ok(Some(name))
    }

    pub fn path_of(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Endless stream of batches over a corpus, reshuffled every pass.
struct Stream<'a> {
    corpus: &'a Corpus,
    size: BatchSize,
    seed: u64,
    pass: u64,
    iter: BatchIter<'a>,
}

impl<'a> Stream<'a> {
    fn new(corpus: &'a Corpus, batch: usize, seed: u64) -> Result<Self> {
        let size = BatchSize::Sentences(batch);
        Ok(Stream { corpus, size, seed, pass: 0, iter: batch_iter(corpus, size, seed, 0)? })
    }

    fn next_batch(&mut self) -> Result<crate::corpus::Batch> {
        loop {
            if let Some(b) = self.iter.next() {
                return Ok(b);
            }
            self.pass += 1;
            self.iter = batch_iter(self.corpus, self.size, self.seed, self.pass)?;
        }
    }
}

/// The self-supervised example for one sentence.
pub fn self_supervised_example(
    objective: Objective,
    tokens: &[TokenId],
    noise: &NoiseSpec,
    vocab: &Vocab,
    seed: u64,
) -> Result<Example> {
    match objective {
        Objective::Dae => {
            let (corrupted, target) = dae_noise(tokens, noise, seed)?;
            Ok(Example::full(corrupted, &target))
        }
        Objective::Mass => {
            let ex = mass_mask(tokens, noise, vocab, seed)?;
            let mut dec_input = ex.decoder_input;
            let mut dec_positions = ex.decoder_positions;
            let mut target = ex.target_fragment;
            // A fragment that reaches the end of the sentence also predicts eos.
            if ex.fragment_start + target.len() == tokens.len() {
                dec_input.push(*tokens.last().expect("non-empty"));
                dec_positions.push(tokens.len());
                target.push(EOS);
            }
            Ok(Example { src: ex.corrupted_input, dec_input, dec_positions, target })
        }
    }
}

fn check_finite(loss: f64, stage: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage: stage.to_string(), step, loss })
    }
}

fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Mean self-supervised loss over the validation sides with fixed noise.
pub fn validation_loss(
    state: &ModelState,
    objective: Objective,
    sides: &[&[TokenSeq]],
    noise: &NoiseSpec,
    vocab: &Vocab,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (si, side) in sides.iter().enumerate() {
        let examples: Vec<Example> = side
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| self_supervised_example(objective, s, noise, vocab, seed::mix(&[seed, si as u64, i as u64])))
            .collect::<Result<_>>()?;
        for chunk in examples.chunks(batch) {
            let loss = state.forward_loss(chunk, &mut None)?;
            total += scalar(&loss.value)? * loss.tokens as f64;
            tokens += loss.tokens;
        }
    }
    if tokens == 0 {
        return Err(Error::Train("validation data is empty".into()));
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub data: u64,
    pub dropout: u64,
}

impl StageSeeds {
    pub fn derive(master: u64, stage: &str) -> Self {
        StageSeeds { data: seed::derive(master, &[stage, "data"]), dropout: seed::derive(master, &[stage, "dropout"]) }
    }
}

/// Self-supervised pre-training on alternating source / target batches.
/// Returns the best state by validation loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    mut state: ModelState,
    data: &CellData,
    objective: Objective,
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    seeds: StageSeeds,
    sink: &CheckpointSink,
    record: &mut RunRecord,
) -> Result<ModelState> {
    cfg.validate()?;
    noise.validate()?;
    let cell = record.cell;
    let mut opt = Optimizer::new(&state, cfg.optim)?;
    let mut streams = [
        Stream::new(&data.src_mono, cfg.batch_size, seed::mix(&[seeds.data, 0]))?,
        Stream::new(&data.tgt_mono, cfg.batch_size, seed::mix(&[seeds.data, 1]))?,
    ];
    let valid_sides: [&[TokenSeq]; 2] = [&data.valid.src, &data.valid.tgt];
    let valid_seed = seed::mix(&[seeds.data, 0x7a11d]);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let started = Instant::now();
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..cfg.epoch_size {
            let lang = step % 2;
            let batch = streams[lang].next_batch()?;
            let examples: Vec<Example> = (0..batch.rows())
                .map(|r| self_supervised_example(objective, batch.row(r), noise, &data.vocab, batch.seeds[r]))
                .collect::<Result<_>>()?;
            let mut drop = Dropout::new(state.config().dropout, seed::mix(&[seeds.dropout, step as u64]));
            let loss = state.forward_loss(&examples, &mut drop)?;
            let value = scalar(&loss.value)?;
            check_finite(value, "pretrain", step)?;
            opt.backward_step(&loss.value)?;
            loss_sum += value;
            step += 1;
        }
        let valid = validation_loss(&state, objective, &valid_sides, noise, &data.vocab, cfg.valid_batch, valid_seed)?;
        check_finite(valid, "pretrain-valid", step)?;
        let checkpoint = sink.save(&state, cell, "pretrain", epoch)?;
        log::info!("{cell} pretrain epoch {epoch}: train {:.4} valid {valid:.4}", loss_sum / cfg.epoch_size as f64);
        record.pretrain.push(EpochRecord {
            stage: "pretrain".into(),
            epoch,
            steps: step,
            train_loss: Some(loss_sum / cfg.epoch_size as f64),
            valid_loss: Some(valid),
            bleu_src_tgt: None,
            bleu_tgt_src: None,
            skipped_steps: 0,
            checkpoint,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| valid < *b);
        if improved {
            best = Some((valid, epoch, state.try_clone()?));
            record.best_pretrain_epoch = Some(epoch);
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            log::info!("{cell} pretrain: early stop after epoch {epoch}");
            break;
        }
    }
    let (_, _, best_state) = best.expect("at least one epoch");
    state = best_state;
    Ok(state)
}

/// Joined, detokenized words of a decoded sentence.
pub fn render(vocab: &Vocab, tokens: &[TokenId]) -> String {
    detokenize(&vocab.decode(tokens)).join(" ")
}

/// Decodes `inputs` in length-sorted batches, restoring the input order.
pub fn translate(state: &ModelState, inputs: &[TokenSeq], allowed: &[bool], batch: usize) -> Result<Vec<TokenSeq>> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by_key(|&i| (inputs[i].len(), i));
    let mut out = vec![Vec::new(); inputs.len()];
    for chunk in order.chunks(batch.max(1)) {
        let srcs: Vec<TokenSeq> = chunk.iter().map(|&i| inputs[i].clone()).collect();
        if srcs.iter().any(Vec::is_empty) {
            return Err(Error::Train("cannot translate an empty sentence".into()));
        }
        let longest = srcs.iter().map(Vec::len).max().unwrap_or(0);
        let hyps = state.greedy_decode(&srcs, decode_limit(longest), Some(allowed))?;
        for (&i, h) in chunk.iter().zip(hyps) {
            out[i] = h;
        }
    }
    Ok(out)
}

/// Output-length cap for a source of `len` tokens.
pub fn decode_limit(len: usize) -> usize {
    2 * len + 5
}

/// Validation BLEU in both directions; tgt→src is skipped for reordered runs.
pub fn validation_bleu(state: &ModelState, data: &CellData, variant: DataVariant, batch: usize) -> Result<(f64, Option<f64>)> {
    let tgt_mask = data.language_mask(&data.tgt_mono);
    let hyps = translate(state, &data.valid.src, &tgt_mask, batch)?;
    let rendered: Vec<String> = hyps.iter().map(|h| render(&data.vocab, h)).collect();
    let st = bleu(&rendered, &data.valid.tgt_ref)?;
    if variant == DataVariant::Reordered {
        return Ok((st, None));
    }
    let src_mask = data.language_mask(&data.src_mono);
    let hyps = translate(state, &data.valid.tgt, &src_mask, batch)?;
    let rendered: Vec<String> = hyps.iter().map(|h| render(&data.vocab, h)).collect();
    Ok((st, Some(bleu(&rendered, &data.valid.src_ref)?)))
}

/// Iterative back-translation. Each step synthesizes sources for a batch of
/// real sentences in each direction with the current model and trains on
/// (synthetic → real). Early stopping on validation BLEU src→tgt.
#[allow(clippy::too_many_arguments)]
pub fn finetune_backtranslation(
    state: ModelState,
    data: &CellData,
    cell: Cell,
    noise: &NoiseSpec,
    cfg: &TrainConfig,
    seeds: StageSeeds,
    sink: &CheckpointSink,
    record: &mut RunRecord,
) -> Result<ModelState> {
    cfg.validate()?;
    data.check_disjoint()?;
    let src_mask = data.language_mask(&data.src_mono);
    let tgt_mask = data.language_mask(&data.tgt_mono);
    let mut opt = Optimizer::new(&state, cfg.optim)?;
    let mut streams = [
        Stream::new(&data.tgt_mono, cfg.batch_size, seed::mix(&[seeds.data, 0]))?,
        Stream::new(&data.src_mono, cfg.batch_size, seed::mix(&[seeds.data, 1]))?,
    ];
    let started = Instant::now();
    let (b0, r0) = validation_bleu(&state, data, cell.variant, cfg.valid_batch)?;
    let checkpoint = sink.save(&state, cell, "finetune", 0)?;
    log::info!("{cell} finetune epoch 0: bleu {b0:.2}");
    record.finetune.push(EpochRecord {
        stage: "finetune".into(),
        epoch: 0,
        steps: 0,
        train_loss: None,
        valid_loss: None,
        bleu_src_tgt: Some(b0),
        bleu_tgt_src: r0,
        skipped_steps: 0,
        checkpoint,
        wall_seconds: started.elapsed().as_secs_f64(),
    });
    record.best_finetune_epoch = Some(0);
    let mut best = (b0, 0usize, state.try_clone()?);
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        let mut skipped = 0usize;
        for _ in 0..cfg.epoch_size {
            // Direction 0 trains src→tgt on (synthetic src, real tgt):
            // decode real targets with the source mask, and vice versa.
            for dir in 0..2 {
                let batch = streams[dir].next_batch()?;
                let real: Vec<TokenSeq> = (0..batch.rows()).map(|r| batch.row(r).to_vec()).collect();
                let mask = if dir == 0 { &src_mask } else { &tgt_mask };
                let longest = real.iter().map(Vec::len).max().unwrap_or(0);
                let synthetic = state.greedy_decode(&real, decode_limit(longest), Some(mask))?;
                let mut examples: Vec<Example> = synthetic
                    .into_iter()
                    .zip(&real)
                    .filter(|(s, _)| !s.is_empty())
                    .map(|(s, r)| Example::full(s, r))
                    .collect();
                if cfg.mixed_objective {
                    for (r, s) in real.iter().enumerate() {
                        examples.push(self_supervised_example(Objective::Dae, s, noise, &data.vocab, batch.seeds[r])?);
                    }
                }
                if examples.is_empty() {
                    log::warn!("{cell} finetune step {step}: every synthetic sentence was empty; skipping");
                    skipped += 1;
                    continue;
                }
                let mut drop = Dropout::new(state.config().dropout, seed::mix(&[seeds.dropout, step as u64, dir as u64]));
                let loss = state.forward_loss(&examples, &mut drop)?;
                let value = scalar(&loss.value)?;
                check_finite(value, "finetune", step)?;
                opt.backward_step(&loss.value)?;
                loss_sum += value;
                counted += 1;
            }
            step += 1;
        }
        let (b, r) = if cfg.eval_every_epoch || epoch == cfg.max_epochs {
            let (b, r) = validation_bleu(&state, data, cell.variant, cfg.valid_batch)?;
            (Some(b), r)
        } else {
            (None, None)
        };
        let checkpoint = sink.save(&state, cell, "finetune", epoch)?;
        let shown = b.map_or_else(|| "-".to_string(), |b| format!("{b:.2}"));
        log::info!("{cell} finetune epoch {epoch}: loss {:.4} bleu {shown}", loss_sum / counted.max(1) as f64);
        record.finetune.push(EpochRecord {
            stage: "finetune".into(),
            epoch,
            steps: step,
            train_loss: (counted > 0).then(|| loss_sum / counted as f64),
            valid_loss: None,
            bleu_src_tgt: b,
            bleu_tgt_src: r,
            skipped_steps: skipped,
            checkpoint,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(b) = b {
            if b > best.0 {
                best = (b, epoch, state.try_clone()?);
                record.best_finetune_epoch = Some(epoch);
            } else if epoch - best.1 >= cfg.patience {
                log::info!("{cell} finetune: early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(best.2)
}

/// Test-set report: BLEU/chrF per direction (src→tgt only for reordered
/// runs), length bins, and position-embedding widths over the τ sweep.
pub fn evaluate(
    state: &ModelState,
    data: &CellData,
    cell: Cell,
    bin_edges: &[usize],
    batch: usize,
    checkpoint: &str,
    sink: &CheckpointSink,
) -> Result<EvalReport> {
    let tgt_mask = data.language_mask(&data.tgt_mono);
    let hyps: Vec<String> =
        translate(state, &data.test.src, &tgt_mask, batch)?.iter().map(|h| render(&data.vocab, h)).collect();
    let mut entries = vec![DirectionScores {
        direction: Direction::SrcToTgt,
        bleu: bleu(&hyps, &data.test.tgt_ref)?,
        chrf: chrf(&hyps, &data.test.tgt_ref)?,
        sentences: hyps.len(),
    }];
    let lengths: Vec<String> = data.test.src_words.iter().map(|&n| vec!["w"; n].join(" ")).collect();
    let length_bins = bleu_by_length(&hyps, &data.test.tgt_ref, &lengths, bin_edges)?;
    if cell.variant == DataVariant::Original {
        let src_mask = data.language_mask(&data.src_mono);
        let back: Vec<String> =
            translate(state, &data.test.tgt, &src_mask, batch)?.iter().map(|h| render(&data.vocab, h)).collect();
        entries.push(DirectionScores {
            direction: Direction::TgtToSrc,
            bleu: bleu(&back, &data.test.src_ref)?,
            chrf: chrf(&back, &data.test.src_ref)?,
            sentences: back.len(),
        });
    }
    let positions = data.trained_positions(state.config().max_positions);
    let position_width = TAU_SWEEP
        .iter()
        .map(|&tau| Ok((tau, eval::position_similarity(state, positions, tau)?.neighborhood_width)))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        cell,
        checkpoint: checkpoint.to_string(),
        entries,
        length_bins,
        position_width,
        config_hash: sink.config_hash.clone(),
        master_seed: sink.master_seed,
    })
}

/// Hyperparameters shared by every cell of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub length_bins: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            model: ModelConfig::default(),
            noise: NoiseSpec::default(),
            pretrain: TrainConfig { max_epochs: 15, ..TrainConfig::default() },
            finetune: TrainConfig { max_epochs: 15, ..TrainConfig::default() },
            length_bins: vec![5, 10, 15, 20, 30],
        }
    }
}

pub fn model_seed(master: u64) -> u64 {
    seed::derive(master, &["model"])
}

/// Pretrain → fine-tune → evaluate for one cell. Model-init and data seeds
/// depend on the master seed and stage only, so cells are matched runs.
pub fn run_cell(
    data: &CellData,
    cell: Cell,
    cfg: &GridConfig,
    master_seed: u64,
    sink: &CheckpointSink,
    pretrained: Option<ModelState>,
) -> Result<(ModelState, RunRecord)> {
    let started = Instant::now();
    let longest = data.src_mono.max_len().max(data.tgt_mono.max_len());
    cfg.model.check_sentence_length(longest).map_err(|e| e.in_stage("pretrain"))?;
    let mut record = RunRecord::new(cell, master_seed, &sink.config_hash, String::new());
    let state = match pretrained {
        Some(s) => s,
        None => {
            let init = ModelState::build(&cfg.model, &data.embeddings, model_seed(master_seed))?;
            record.embedding_checksum = init.embedding_checksum()?;
            pretrain(init, data, cell.objective, &cfg.noise, &cfg.pretrain, StageSeeds::derive(master_seed, "pretrain"), sink, &mut record)
                .map_err(|e| e.in_stage("pretrain"))?
        }
    };
    if record.embedding_checksum.is_empty() {
        record.embedding_checksum = state.embedding_checksum()?;
    }
    let state = finetune_backtranslation(
        state,
        data,
        cell,
        &cfg.noise,
        &cfg.finetune,
        StageSeeds::derive(master_seed, "finetune"),
        sink,
        &mut record,
    )
    .map_err(|e| e.in_stage("finetune"))?;
    if state.embedding_checksum()? != record.embedding_checksum {
        return Err(Error::Train("token embeddings changed during training".into()).in_stage("finetune"));
    }
    let best = record
        .best_finetune_epoch
        .and_then(|e| record.finetune.iter().find(|r| r.epoch == e))
        .and_then(|r| r.checkpoint.clone());
    record.best_checkpoint = best.clone();
    let report = evaluate(&state, data, cell, &cfg.length_bins, cfg.finetune.valid_batch, best.as_deref().unwrap_or("memory"), sink)
        .map_err(|e| e.in_stage("evaluate"))?;
    record.test = Some(report);
    record.wall_seconds = started.elapsed().as_secs_f64();
    Ok((state, record))
}

/// Prepared data per variant for [`run_grid`].
pub struct GridData {
    pub original: CellData,
    pub reordered: CellData,
}

impl GridData {
    pub fn for_variant(&self, v: DataVariant) -> &CellData {
        match v {
            DataVariant::Original => &self.original,
            DataVariant::Reordered => &self.reordered,
        }
    }
}

/// Trains and evaluates every requested cell with the same seeds and
/// hyperparameters.
pub fn run_grid(
    data: &GridData,
    cells: &[Cell],
    cfg: &GridConfig,
    master_seed: u64,
    sink_for: &dyn Fn(Cell) -> CheckpointSink,
) -> Result<Vec<RunRecord>> {
    if data.original.src_mono.len() != data.reordered.src_mono.len() {
        return Err(Error::Train("original and reordered source corpora differ in size".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for &cell in cells {
        let (_, rec) = run_cell(data.for_variant(cell.variant), cell, cfg, master_seed, &sink_for(cell), None)?;
        out.push(rec);
    }
    Ok(out)
}
