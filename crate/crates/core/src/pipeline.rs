//! File-backed orchestration: prepare → embed → pretrain → fine-tune →
//! evaluate → report, one directory per stage and cell under
//! `<output_dir>/<name>/`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    apply_bpe, build_vocab, filter_noise_removal, learn_bpe, BpeModel, Corpus, EvalSplit, Provenance, Side, TextCorpus,
    TokenSeq, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{self, compare_runs, Direction, EvalReport};
use crate::model::ModelState;
use crate::noise::{dae_noise, mass_mask, NoiseSpec};
use crate::plot;
use crate::seed;
use crate::synthlang::{build_grammar, inject_parse_failures, make_eval_sets_excluding, sample_monolingual, GrammarConfig, GrammarPair};
use crate::trainer::{
    self, finetune_backtranslation, model_seed, pretrain, CellData, Cell, CheckpointSink, DataVariant, EvalSet, GridConfig,
    RunRecord, StageSeeds,
};
use crate::xembed::{build_cross_lingual, lexicon_induction_accuracy, oracle_pairs, token_set, EmbeddingMatrix, XembedConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_per_side: usize,
    pub valid: usize,
    pub test: usize,
    pub fail_rate: f64,
    pub bpe_merges: usize,
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train_per_side: 20_000, valid: 200, test: 500, fail_rate: 0.05, bpe_merges: 4000, vocab_min_count: 1 }
    }
}

/// The whole experiment in one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub cells: Vec<String>,
    pub grammar: GrammarConfig,
    pub data: DataConfig,
    pub embed: XembedConfig,
    /// Allow the oracle word bijection as seed-dictionary fallback when the
    /// languages share too few identical subwords.
    pub oracle_seed_fallback: bool,
    #[serde(flatten)]
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            master_seed: 1,
            output_dir: PathBuf::from("out"),
            cells: Cell::ALL.iter().map(Cell::label).collect(),
            grammar: GrammarConfig::default(),
            data: DataConfig::default(),
            embed: XembedConfig::default(),
            oracle_seed_fallback: true,
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Artifact { path: path.into(), msg: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name `{}` is not a valid directory name", self.name)));
        }
        let d = &self.data;
        if d.train_per_side == 0 || d.valid == 0 || d.test == 0 {
            return Err(Error::Config("train, valid and test sizes must all be at least 1".into()));
        }
        if !(0.0..1.0).contains(&d.fail_rate) {
            return Err(Error::Config(format!("fail_rate must be in [0, 1), got {}", d.fail_rate)));
        }
        self.cell_list()?;
        self.grid.noise.validate()?;
        self.grid.model.validate()?;
        self.grid.pretrain.validate()?;
        self.grid.finetune.validate()?;
        if self.embed.skipgram.dim != self.grid.model.d_model {
            return Err(Error::Config(format!(
                "embedding dim {} must equal d_model {}",
                self.embed.skipgram.dim, self.grid.model.d_model
            )));
        }
        if self.grid.length_bins.is_empty() {
            return Err(Error::Config("length_bins must not be empty".into()));
        }
        Ok(())
    }

    pub fn cell_list(&self) -> Result<Vec<Cell>> {
        self.cells.iter().map(|c| c.parse()).collect()
    }

    /// sha256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn root(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root().join(stage)
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Artifact { path: path.into(), msg: e.to_string() })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Artifact { path: path.into(), msg: e.to_string() })?;
    Ok(serde_json::from_str(&text)?)
}

/// Marker written when a stage finishes; resumed runs check its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    pub config_hash: String,
    pub master_seed: u64,
}

fn stamp_path(dir: &Path) -> PathBuf {
    dir.join("stage.json")
}

/// `Ok(true)` if the stage already completed under this config.
fn stage_done(dir: &Path, cfg: &ExperimentConfig) -> Result<bool> {
    let p = stamp_path(dir);
    if !p.exists() {
        return Ok(false);
    }
    let s: StageStamp = read_json(&p)?;
    if s.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "{} was produced by a different configuration ({}); use a fresh output directory",
            dir.display(),
            s.config_hash
        )));
    }
    Ok(true)
}

fn mark_done(dir: &Path, stage: &str, cfg: &ExperimentConfig) -> Result<()> {
    write_json(&stamp_path(dir), &StageStamp { stage: stage.into(), config_hash: cfg.hash(), master_seed: cfg.master_seed })
}

// ----------------------------------------------------------- prepare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub lines: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub files: BTreeMap<String, FileEntry>,
    pub removed_mono: Vec<usize>,
    pub removed_valid: Vec<usize>,
    pub removed_test: Vec<usize>,
    pub vocab_fingerprint: String,
    pub bpe_fingerprint: String,
}

impl Manifest {
    pub fn lines(&self, file: &str) -> Option<usize> {
        self.files.get(file).map(|f| f.lines)
    }
}

pub const MONO_FILES: [&str; 3] = ["mono.src", "mono.src-reordered", "mono.tgt"];

fn split_files(split: &str) -> [String; 3] {
    [format!("{split}.src"), format!("{split}.src-reordered"), format!("{split}.tgt")]
}

/// Grammar, corpora with injected reordering failures, noise-removal
/// filtering, joint BPE, vocabulary, manifest. Idempotent: reruns with the
/// same config verify and return the existing manifest.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate().map_err(|e| e.in_stage("prepare"))?;
    prepare_inner(cfg).map_err(|e| e.in_stage("prepare"))
}

fn prepare_inner(cfg: &ExperimentConfig) -> Result<Manifest> {
    let dir = cfg.stage_dir("prepare");
    if stage_done(&dir, cfg)? {
        return read_json(&dir.join("manifest.json"));
    }
    std::fs::create_dir_all(&dir)?;
    let m = cfg.master_seed;
    let grammar = build_grammar(&cfg.grammar, seed::derive(m, &["grammar"]))?;
    let d = &cfg.data;
    let src = sample_monolingual(&grammar, Side::Src, d.train_per_side, seed::derive(m, &["mono"]))?;
    let tgt = sample_monolingual(&grammar, Side::Tgt, d.train_per_side, seed::derive(m, &["mono"]))?;
    let (reordered, failed) = inject_parse_failures(&src, &grammar, d.fail_rate, seed::derive(m, &["reorder", "mono"]))?;
    let exclude: HashSet<Vec<String>> = src.sentences.iter().chain(&tgt.sentences).cloned().collect();
    let (valid, test) = make_eval_sets_excluding(&grammar, d.valid, d.test, seed::derive(m, &["eval"]), &exclude)?;
    let eval_split = |pairs: Vec<crate::synthlang::SentencePair>, label: &str| -> Result<EvalSplit> {
        let srcs = TextCorpus::new(Side::Src, pairs.iter().map(|p| p.src.clone()).collect());
        let (re, failed) = inject_parse_failures(&srcs, &grammar, d.fail_rate, seed::derive(m, &["reorder", label]))?;
        Ok(EvalSplit { pairs, reordered_src: re.sentences, failed })
    };
    let splits = [eval_split(valid, "valid")?, eval_split(test, "test")?];
    let removed_valid: Vec<usize> = splits[0].failed.iter().copied().collect();
    let removed_test: Vec<usize> = splits[1].failed.iter().copied().collect();
    let filtered = filter_noise_removal(&src, &reordered, &failed, &splits)?;
    if filtered.eval.iter().any(|s| s.pairs.is_empty()) {
        return Err(Error::Corpus("an evaluation split is empty after noise removal".into()));
    }

    let bpe = learn_bpe([filtered.original.sentences.as_slice(), tgt.sentences.as_slice()], d.bpe_merges)?;
    let seg = |c: &[Vec<String>]| -> Vec<Vec<String>> { c.iter().map(|s| apply_bpe(&bpe, s)).collect() };
    let vocab = build_vocab([seg(&filtered.original.sentences).as_slice(), seg(&tgt.sentences).as_slice()], d.vocab_min_count)?;

    std::fs::write(dir.join("grammar.json"), grammar.to_json()?)?;
    bpe.write_to(&dir.join("bpe.codes"))?;
    vocab.write_to(&dir.join("vocab.tsv"))?;
    filtered.original.write_to(&dir.join("mono.src"))?;
    filtered.reordered.write_to(&dir.join("mono.src-reordered"))?;
    tgt.write_to(&dir.join("mono.tgt"))?;
    for (name, split) in ["valid", "test"].iter().zip(&filtered.eval) {
        let [s, r, t] = split_files(name);
        TextCorpus::new(Side::Src, split.pairs.iter().map(|p| p.src.clone()).collect()).write_to(&dir.join(s))?;
        TextCorpus::new(Side::SrcReordered, split.reordered_src.clone()).write_to(&dir.join(r))?;
        TextCorpus::new(Side::Tgt, split.pairs.iter().map(|p| p.tgt.clone()).collect()).write_to(&dir.join(t))?;
    }
    let mut files = BTreeMap::new();
    let mut names: Vec<String> = MONO_FILES.iter().map(|s| s.to_string()).collect();
    names.extend(split_files("valid"));
    names.extend(split_files("test"));
    names.extend(["grammar.json", "bpe.codes", "vocab.tsv"].map(String::from));
    for name in names {
        let p = dir.join(&name);
        let lines = std::fs::read_to_string(&p)?.lines().count();
        files.insert(name, FileEntry { sha256: sha256_file(&p)?, lines });
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        master_seed: m,
        files,
        removed_mono: filtered.removed_mono.iter().copied().collect(),
        removed_valid,
        removed_test,
        vocab_fingerprint: vocab.fingerprint(),
        bpe_fingerprint: bpe.fingerprint.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    mark_done(&dir, "prepare", cfg)?;
    Ok(manifest)
}

/// Prepared artifacts loaded back from disk.
pub struct Prepared {
    pub manifest: Manifest,
    pub grammar: GrammarPair,
    pub bpe: BpeModel,
    pub vocab: Vocab,
    pub corpora: BTreeMap<String, TextCorpus>,
}

pub fn load_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dir = cfg.stage_dir("prepare");
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::Artifact { path: mpath, msg: "no manifest; run `prepare` first".into() });
    }
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.config_hash != cfg.hash() {
        return Err(Error::Config("prepared data was produced by a different configuration".into()));
    }
    for (name, entry) in &manifest.files {
        if sha256_file(&dir.join(name))? != entry.sha256 {
            return Err(Error::Artifact { path: dir.join(name), msg: "content hash does not match the manifest".into() });
        }
    }
    let grammar = GrammarPair::from_json(&std::fs::read_to_string(dir.join("grammar.json"))?)?;
    let bpe = BpeModel::read_from(&dir.join("bpe.codes"))?;
    let vocab = Vocab::read_from(&dir.join("vocab.tsv"))?;
    let mut corpora = BTreeMap::new();
    let mut names: Vec<String> = MONO_FILES.iter().map(|s| s.to_string()).collect();
    names.extend(split_files("valid"));
    names.extend(split_files("test"));
    for name in names {
        let side = if name.ends_with("src-reordered") {
            Side::SrcReordered
        } else if name.ends_with("src") {
            Side::Src
        } else {
            Side::Tgt
        };
        corpora.insert(name.clone(), TextCorpus::read_from(&dir.join(&name), side)?);
    }
    Ok(Prepared { manifest, grammar, bpe, vocab, corpora })
}

impl Prepared {
    pub fn corpus(&self, name: &str) -> &TextCorpus {
        &self.corpora[name]
    }

    fn encode(&self, c: &TextCorpus, origin: &str) -> Corpus {
        Corpus {
            side: c.side,
            sentences: c.sentences.iter().map(|s| self.vocab.encode(&apply_bpe(&self.bpe, s))).collect(),
            provenance: Provenance { origin: origin.into(), fingerprint: self.vocab.fingerprint() },
        }
    }

    fn eval_set(&self, split: &str, variant: DataVariant) -> EvalSet {
        let [s, r, t] = split_files(split);
        let input = if variant == DataVariant::Reordered { &r } else { &s };
        let enc = |name: &str| self.encode(self.corpus(name), name).sentences;
        let joined = |name: &str| self.corpus(name).sentences.iter().map(|x| x.join(" ")).collect::<Vec<_>>();
        EvalSet {
            src: enc(input),
            tgt: enc(&t),
            src_ref: joined(&s),
            tgt_ref: joined(&t),
            src_words: self.corpus(&s).sentences.iter().map(Vec::len).collect(),
        }
    }

    /// Encoded corpora for one data variant (embeddings left empty).
    pub fn cell_data(&self, variant: DataVariant) -> CellData {
        let src_name = if variant == DataVariant::Reordered { "mono.src-reordered" } else { "mono.src" };
        CellData {
            vocab: self.vocab.clone(),
            src_mono: self.encode(self.corpus(src_name), src_name),
            tgt_mono: self.encode(self.corpus("mono.tgt"), "mono.tgt"),
            valid: self.eval_set("valid", variant),
            test: self.eval_set("test", variant),
            embeddings: EmbeddingMatrix::zeros(0, 0),
        }
    }
}

// ------------------------------------------------------------- embed

/// Cross-lingual embeddings for one variant, computed once and cached.
pub fn embed_stage(cfg: &ExperimentConfig, prep: &Prepared, data: &CellData, variant: DataVariant) -> Result<EmbeddingMatrix> {
    let dir = cfg.stage_dir("embed").join(variant.as_str());
    let vec_path = dir.join("embeddings.vec");
    if stage_done(&dir, cfg)? {
        return EmbeddingMatrix::read_word2vec(&prep.vocab, &vec_path);
    }
    std::fs::create_dir_all(&dir)?;
    let bijection = prep.grammar.bijection();
    let fallback = cfg.oracle_seed_fallback.then_some(bijection.as_slice());
    let xl = build_cross_lingual(
        &data.src_mono.sentences,
        &data.tgt_mono.sentences,
        &prep.vocab,
        fallback,
        &cfg.embed,
        seed::derive(cfg.master_seed, &["embed", variant.as_str()]),
    )?;
    let provenance = format!("config_hash {}\nmaster_seed {}\nvariant {}", cfg.hash(), cfg.master_seed, variant.as_str());
    xl.alignment.write_to(&dir.join("alignment.txt"), &provenance)?;
    xl.embeddings.write_word2vec(&prep.vocab, &vec_path)?;
    let oracle = oracle_pairs(&prep.vocab, &bijection, &token_set(&data.src_mono.sentences), &token_set(&data.tgt_mono.sentences));
    let info = serde_json::json!({
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "seed_pairs": xl.seed_pairs.len(),
        "oracle_pairs": oracle.len(),
        "lexicon_induction_accuracy": lexicon_induction_accuracy(&xl.embeddings, &xl.rows, &oracle),
        "refinement": xl.alignment.history,
        "orthogonality_error": xl.alignment.orthogonality_error(),
    });
    write_json(&dir.join("info.json"), &info)?;
    mark_done(&dir, "embed", cfg)?;
    // Reload so a fresh run and a resumed run use identical (text-rounded) values.
    EmbeddingMatrix::read_word2vec(&prep.vocab, &vec_path)
}

// --------------------------------------------------------------- run

fn sink(cfg: &ExperimentConfig, prep: &Prepared, dir: PathBuf) -> CheckpointSink {
    CheckpointSink {
        dir: Some(dir),
        vocab_fingerprint: prep.vocab.fingerprint(),
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
    }
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::write(dir.join("run.jsonl"), record.to_jsonl()?)?;
    Ok(())
}

/// Embed → pretrain → fine-tune → evaluate for each cell, resuming from
/// completed stages.
pub fn cmd_run(cfg: &ExperimentConfig, cells: Option<&[Cell]>) -> Result<Vec<RunRecord>> {
    cfg.validate().map_err(|e| e.in_stage("run"))?;
    let prep = load_prepared(cfg).map_err(|e| e.in_stage("run"))?;
    let cells = match cells {
        Some(c) => c.to_vec(),
        None => cfg.cell_list()?,
    };
    let mut out = Vec::new();
    for cell in cells {
        out.push(run_one(cfg, &prep, cell)?);
    }
    Ok(out)
}

fn run_one(cfg: &ExperimentConfig, prep: &Prepared, cell: Cell) -> Result<RunRecord> {
    let mut data = prep.cell_data(cell.variant);
    data.embeddings = embed_stage(cfg, prep, &data, cell.variant).map_err(|e| e.in_stage("embed"))?;
    let longest = data.src_mono.max_len().max(data.tgt_mono.max_len());
    cfg.grid.model.check_sentence_length(longest).map_err(|e| e.in_stage("pretrain"))?;
    let label = cell.label();

    // Pre-training.
    let pdir = cfg.stage_dir("pretrain").join(&label);
    let best_pre = pdir.join("best.ckpt");
    let mut record = if stage_done(&pdir, cfg).map_err(|e| e.in_stage("pretrain"))? {
        RunRecord::from_jsonl(&std::fs::read_to_string(pdir.join("run.jsonl"))?)?
    } else {
        std::fs::create_dir_all(&pdir)?;
        let init = ModelState::build(&cfg.grid.model, &data.embeddings, model_seed(cfg.master_seed))?;
        let mut record = RunRecord::new(cell, cfg.master_seed, &cfg.hash(), init.embedding_checksum()?);
        let state = pretrain(
            init,
            &data,
            cell.objective,
            &cfg.grid.noise,
            &cfg.grid.pretrain,
            StageSeeds::derive(cfg.master_seed, "pretrain"),
            &sink(cfg, prep, pdir.clone()),
            &mut record,
        )
        .map_err(|e| e.in_stage("pretrain"))?;
        state.save(&best_pre, &prep.vocab.fingerprint(), &serde_json::json!({ "cell": cell, "stage": "pretrain-best" }))?;
        write_record(&pdir, &record)?;
        mark_done(&pdir, "pretrain", cfg)?;
        record
    };

    // Fine-tuning, always from the persisted best pre-training checkpoint.
    let fdir = cfg.stage_dir("finetune").join(&label);
    let best_ft = fdir.join("best.ckpt");
    if stage_done(&fdir, cfg).map_err(|e| e.in_stage("finetune"))? {
        record = RunRecord::from_jsonl(&std::fs::read_to_string(fdir.join("run.jsonl"))?)?;
    } else {
        std::fs::create_dir_all(&fdir)?;
        let (state, fp, _) = ModelState::load(&best_pre).map_err(|e| e.in_stage("finetune"))?;
        if fp != prep.vocab.fingerprint() {
            return Err(Error::Config("pretraining checkpoint uses a different vocabulary".into()).in_stage("finetune"));
        }
        let state = finetune_backtranslation(
            state,
            &data,
            cell,
            &cfg.grid.noise,
            &cfg.grid.finetune,
            StageSeeds::derive(cfg.master_seed, "finetune"),
            &sink(cfg, prep, fdir.clone()),
            &mut record,
        )
        .map_err(|e| e.in_stage("finetune"))?;
        if state.embedding_checksum()? != record.embedding_checksum {
            return Err(Error::Train("token embeddings changed during training".into()).in_stage("finetune"));
        }
        state.save(&best_ft, &prep.vocab.fingerprint(), &serde_json::json!({ "cell": cell, "stage": "finetune-best" }))?;
        record.best_checkpoint = Some(best_ft.display().to_string());
        write_record(&fdir, &record)?;
        mark_done(&fdir, "finetune", cfg)?;
    }

    let report = evaluate_one(cfg, prep, &data, cell).map_err(|e| e.in_stage("evaluate"))?;
    record.test = Some(report);
    let edir = cfg.stage_dir("evaluate").join(&label);
    write_record(&edir, &record)?;
    Ok(record)
}

fn evaluate_one(cfg: &ExperimentConfig, prep: &Prepared, data: &CellData, cell: Cell) -> Result<EvalReport> {
    let edir = cfg.stage_dir("evaluate").join(cell.label());
    let rpath = edir.join("report.json");
    if stage_done(&edir, cfg)? {
        return read_json(&rpath);
    }
    let ckpt = cfg.stage_dir("finetune").join(cell.label()).join("best.ckpt");
    let (state, _, _) = ModelState::load(&ckpt)?;
    std::fs::create_dir_all(&edir)?;
    let report = trainer::evaluate(
        &state,
        data,
        cell,
        &cfg.grid.length_bins,
        cfg.grid.finetune.valid_batch,
        &ckpt.display().to_string(),
        &sink(cfg, prep, edir.clone()),
    )?;
    write_json(&rpath, &report)?;
    mark_done(&edir, "evaluate", cfg)?;
    Ok(report)
}

/// Test-set evaluation of already fine-tuned cells.
pub fn cmd_evaluate(cfg: &ExperimentConfig, cells: Option<&[Cell]>) -> Result<Vec<EvalReport>> {
    let prep = load_prepared(cfg).map_err(|e| e.in_stage("evaluate"))?;
    let cells = match cells {
        Some(c) => c.to_vec(),
        None => cfg.cell_list()?,
    };
    let mut out = Vec::new();
    for cell in cells {
        let data = prep.cell_data(cell.variant);
        out.push(evaluate_one(cfg, &prep, &data, cell).map_err(|e| e.in_stage("evaluate"))?);
    }
    Ok(out)
}

/// Completed run records found under the output directory.
pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for cell in Cell::ALL {
        let p = cfg.stage_dir("evaluate").join(cell.label()).join("run.jsonl");
        if p.exists() {
            out.push(RunRecord::from_jsonl(&std::fs::read_to_string(&p)?)?);
        }
    }
    Ok(out)
}

// ------------------------------------------------------------ report

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub files: Vec<String>,
}

/// Comparison table, BLEU-vs-epoch curves, length bins and position
/// heatmaps. Missing cells are rendered as missing.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    report_inner(cfg).map_err(|e| e.in_stage("report"))
}

fn report_inner(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    let records = load_records(cfg)?;
    let dir = cfg.stage_dir("report");
    std::fs::create_dir_all(&dir)?;
    let mut files: Vec<String> = Vec::new();
    let emit = |files: &mut Vec<String>, name: &str, content: &str| -> Result<()> {
        std::fs::write(dir.join(name), content)?;
        files.push(name.to_string());
        Ok(())
    };
    let header = format!("# config_hash {} master_seed {}\n", cfg.hash(), cfg.master_seed);
    let table = compare_runs(&cfg.name, &records);
    emit(&mut files, "comparison.txt", &(header.clone() + &table.render_text()))?;
    emit(&mut files, "comparison.csv", &table.render_csv())?;

    let mut curves = String::from("cell,epoch,bleu_src_tgt,bleu_tgt_src\n");
    let mut series = Vec::new();
    for r in &records {
        let mut pts = Vec::new();
        for e in &r.finetune {
            let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(curves, "{},{},{},{}", r.cell.label(), e.epoch, f(e.bleu_src_tgt), f(e.bleu_tgt_src));
            if let Some(b) = e.bleu_src_tgt {
                pts.push((e.epoch as f64, b));
            }
        }
        series.push((r.cell.label(), pts));
    }
    emit(&mut files, "bleu_curves.csv", &curves)?;
    plot::curves_png(&series, 100.0, &dir.join("bleu_curves.png"))?;
    files.push("bleu_curves.png".into());

    let mut bins = String::from("cell,lo,hi,count,bleu,low_confidence\n");
    let mut widths = String::from("cell,checkpoint,tau,neighborhood_width\n");
    let prepared = if records.is_empty() { None } else { Some(load_prepared(cfg)?) };
    let mut trained: BTreeMap<DataVariant, usize> = BTreeMap::new();
    for r in &records {
        if let Some(t) = &r.test {
            for b in &t.length_bins {
                let _ = writeln!(bins, "{},{},{},{},{:.4},{}", r.cell.label(), b.lo, b.hi, b.count, b.bleu, b.low_confidence);
            }
        }
        for (stage, ckpt) in [
            ("pretrain", cfg.stage_dir("pretrain").join(r.cell.label()).join("best.ckpt")),
            ("finetune", cfg.stage_dir("finetune").join(r.cell.label()).join("best.ckpt")),
        ] {
            if !ckpt.exists() {
                continue;
            }
            let (state, _, _) = ModelState::load(&ckpt)?;
            let table = state.config().max_positions;
            let positions = match &prepared {
                Some(p) => *trained.entry(r.cell.variant).or_insert_with(|| p.cell_data(r.cell.variant).trained_positions(table)),
                None => table,
            };
            let sim = eval::position_similarity(&state, positions, eval::DEFAULT_TAU)?;
            for &tau in &eval::TAU_SWEEP {
                let _ = writeln!(widths, "{},{stage},{tau},{:.4}", r.cell.label(), sim.width_at(tau));
            }
            let base = format!("posemb_{}_{stage}", r.cell.label());
            emit(&mut files, &format!("{base}.csv"), &sim.to_csv())?;
            plot::heatmap_png(&sim.sim, -1.0, 1.0, 6, &dir.join(format!("{base}.png")))?;
            files.push(format!("{base}.png"));
        }
    }
    emit(&mut files, "length_bins.csv", &bins)?;
    emit(&mut files, "position_width.csv", &widths)?;
    files.sort();
    write_json(&dir.join("bundle.json"), &ReportBundle { files: files.clone() })?;
    Ok(ReportBundle { files })
}

/// Corruptions of the first `n` prepared source sentences under both
/// objectives, as readable text.
pub fn noise_debug(cfg: &ExperimentConfig, n: usize) -> Result<String> {
    let prep = load_prepared(cfg).map_err(|e| e.in_stage("noise-debug"))?;
    let spec: &NoiseSpec = &cfg.grid.noise;
    let data = prep.cell_data(DataVariant::Original);
    let show = |t: &TokenSeq| prep.vocab.decode(t).join(" ");
    let mut out = String::new();
    for (i, s) in data.src_mono.sentences.iter().take(n).enumerate() {
        let seed = seed::sentence_seed(cfg.master_seed, 0, i as u64);
        let m = mass_mask(s, spec, &prep.vocab, seed)?;
        let (dae, _) = dae_noise(s, spec, seed)?;
        let _ = writeln!(out, "[{i}] original : {}", show(s));
        let _ = writeln!(out, "[{i}] mass in  : {}", show(&m.corrupted_input));
        let _ = writeln!(out, "[{i}] mass out : {} (start {})", show(&m.target_fragment), m.fragment_start);
        let _ = writeln!(out, "[{i}] dae in   : {}", show(&dae));
    }
    Ok(out)
}

/// Source sentences of the reordered corpus that are not the oracle
/// reordering of some original sentence (expected empty).
pub fn reordering_mismatches(prep: &Prepared) -> Result<BTreeSet<Vec<String>>> {
    let expected: BTreeSet<Vec<String>> = prep
        .corpus("mono.src")
        .sentences
        .iter()
        .map(|s| crate::synthlang::oracle_reorder(s, &prep.grammar))
        .collect::<Result<_>>()?;
    Ok(prep.corpus("mono.src-reordered").sentences.iter().filter(|s| !expected.contains(*s)).cloned().collect())
}

/// The src→tgt test BLEU of a record, if evaluated.
pub fn test_bleu(r: &RunRecord) -> Option<f64> {
    r.test.as_ref()?.score(Direction::SrcToTgt).map(|s| s.bleu)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn zero_test_size_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.test = 0;
        assert!(cfg.validate().is_err());
        let err = cmd_prepare(&cfg).unwrap_err();
        assert!(err.to_string().contains("prepare"), "{err}");
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "elsewhere".into(), ..a.clone() };
        let c = ExperimentConfig { master_seed: 2, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
