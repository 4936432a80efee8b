// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `transcirc` command line: one subcommand per pipeline stage, each
//! writing its artifacts plus a JSON manifest into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    attention_distribution_stats, characterization_csv, head_overlap, ks_permutation_test, ks_two_sample,
    mean_mlp_traces, overlap_baseline, pivot_summary, traces_csv, write_text, LatentMode, ROLE_THRESHOLD,
};
use crate::corpus::{self, Corpus, CorpusConfig, Lexicon, PromptPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ComponentId, Model, ModelConfig};
use crate::patching::{
    counterfactual_means, detect_crucial, knockout_curve, run_patching, ImportanceMap, Metric, PatchMode,
    PatchingConfig,
};
use crate::subspace::{
    contrastive_matrices, identify_with, IdentifyOptions, MeanScale, Orthogonalization, SubspaceStore,
};
use crate::training::{
    build_mask, counterfactual_accuracy, evaluate_translation_accuracy, examples_from_pairs, targeted_finetune, train,
    MaskMode, StepRecord, TrainConfig, TrainableMask,
};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SHIFT_PAIRS_FILE: &str = "shift_pairs.jsonl";
pub const MODEL_FILE: &str = "model.ttw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const ANALYSIS_PAIRS_FILE: &str = "analysis_pairs.jsonl";
pub const SUBSPACES_FILE: &str = "subspaces.tsf";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const KNOCKOUT_CSV: &str = "knockout.csv";
pub const PROFILES_CSV: &str = "profiles.csv";
pub const ROLE_STATS_CSV: &str = "role_stats.csv";
pub const TRACES_CSV: &str = "mlp_traces.csv";
pub const PIVOT_JSON: &str = "pivot.json";
pub const STATS_JSON: &str = "stats.json";

/// Heads in a targeted or random fine-tuning mask when `--k` is not given.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Parser)]
#[command(name = "transcirc", version, about = "Toy-scale translation circuit analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file; missing sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed(s) of the stage being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Directory receiving artifacts and manifests.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    /// Directory holding upstream artifacts (defaults to --out).
    #[arg(long = "in", global = true)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    Targeted,
    Random,
    Full,
}

impl From<FinetuneMode> for MaskMode {
    fn from(m: FinetuneMode) -> Self {
        match m {
            FinetuneMode::Targeted => MaskMode::Targeted,
            FinetuneMode::Random => MaskMode::Random,
            FinetuneMode::Full => MaskMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Render the prompt-pair corpus.
    GenData,
    /// Train the toy model.
    Train,
    /// Identify a steering subspace per component.
    Identify,
    /// Subspace (or standard) path patching of every head and MLP.
    Patch,
    /// Mean-ablation knockout curve, crucial vs random heads.
    Knockout,
    /// Value-weighted attention profiles and head roles.
    Characterize,
    /// MLP / unembedding similarity traces.
    ProbeMlp,
    /// KS tests and head overlap between translation directions.
    Stats,
    /// Fine-tune on the distribution-shift lexicon.
    Finetune {
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        /// Number of heads (default 4; not used in full mode).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Every stage in order.
    Pipeline,
    /// Re-run the manifests found in a directory and compare output hashes.
    Replay { manifests: PathBuf },
}

impl Command {
    fn stage(&self) -> (usize, String) {
        match self {
            Command::GenData => (0, "gen-data".into()),
            Command::Train => (1, "train".into()),
            Command::Identify => (2, "identify".into()),
            Command::Patch => (3, "patch".into()),
            Command::Knockout => (4, "knockout".into()),
            Command::Characterize => (5, "characterize".into()),
            Command::ProbeMlp => (6, "probe-mlp".into()),
            Command::Stats => (7, "stats".into()),
            Command::Finetune { mode, .. } => (
                8 + *mode as usize,
                format!(
                    "finetune-{}",
                    serde_json::to_value(mode).unwrap().as_str().unwrap_or("?")
                ),
            ),
            Command::Pipeline => (100, "pipeline".into()),
            Command::Replay { .. } => (101, "replay".into()),
        }
    }

    /// Name used for the manifest file.
    pub fn label(&self) -> String {
        self.stage().1
    }
}

/// Model shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(0, 3);
        Self {
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_model: t.d_model,
            d_head: t.d_head,
            d_ff: t.d_ff,
            max_seq: t.max_seq,
            seed: t.seed,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_ff: self.d_ff,
            vocab_size,
            max_seq: self.max_seq,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifySection {
    pub r: usize,
    pub mean_scale: MeanScale,
    pub orthogonalization: Orthogonalization,
    /// Analysis sample: every `stride`-th correctly translated pair...
    pub stride: usize,
    /// ...up to this many.
    pub max_pairs: usize,
}

impl Default for IdentifySection {
    fn default() -> Self {
        let o = IdentifyOptions::default();
        Self {
            r: o.r,
            mean_scale: o.mean_scale,
            orthogonalization: o.orthogonalization,
            stride: 6,
            max_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    #[default]
    Subspace,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub mode: PatchKind,
    /// Keep only the first `k` basis columns of each subspace.
    pub basis_rank: Option<usize>,
    pub epsilon: f64,
    pub head_threshold: f64,
    pub mlp_threshold: f64,
    pub metric: Metric,
    pub include_flagged: bool,
}

impl Default for PatchSection {
    fn default() -> Self {
        let p = PatchingConfig::default();
        Self {
            mode: PatchKind::Subspace,
            basis_rank: None,
            epsilon: p.epsilon,
            head_threshold: p.head_threshold,
            mlp_threshold: p.mlp_threshold,
            metric: p.metric,
            include_flagged: p.include_flagged,
        }
    }
}

impl PatchSection {
    pub fn patching(&self) -> PatchingConfig {
        PatchingConfig {
            epsilon: self.epsilon,
            head_threshold: self.head_threshold,
            mlp_threshold: self.mlp_threshold,
            metric: self.metric,
            include_flagged: self.include_flagged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnockoutSection {
    pub k_max: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for KnockoutSection {
    fn default() -> Self {
        Self {
            k_max: 5,
            trials: 10,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizeSection {
    pub threshold: f64,
}

impl Default for CharacterizeSection {
    fn default() -> Self {
        Self {
            threshold: ROLE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub mode: LatentMode,
    /// Language treated as the pivot for the latent-language summary.
    pub pivot: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub top_k: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            top_k: 5,
            resamples: 1000,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            epochs: 8,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl FinetuneSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            momentum: self.momentum,
            max_steps: 0,
            grad_clip: None,
        }
    }
}

/// Effective configuration of a run, one section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub identify: IdentifySection,
    pub patch: PatchSection,
    pub knockout: KnockoutSection,
    pub characterize: CharacterizeSection,
    pub probe: ProbeSection,
    pub stats: StatsSection,
    pub finetune: FinetuneSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `--seed` to the stage's own seeds.
    pub fn with_seed(mut self, command: &Command, seed: u64) -> Self {
        match command {
            Command::GenData => self.corpus.seed = seed,
            Command::Train => {
                self.model.seed = seed;
                self.train.seed = seed;
            }
            Command::Knockout => self.knockout.seed = seed,
            Command::Stats => self.stats.seed = seed,
            Command::Finetune { .. } => self.finetune.seed = seed,
            Command::Pipeline => {
                self.corpus.seed = seed;
                self.model.seed = seed;
                self.train.seed = seed;
                self.knockout.seed = seed;
                self.stats.seed = seed;
                self.finetune.seed = seed;
            }
            _ => {}
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Record of one command execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub config: PipelineConfig,
    pub threads: usize,
    pub code_version: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub flagged_pairs: usize,
    pub metrics: BTreeMap<String, Value>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn file_name(command: &Command) -> String {
        format!("manifest-{}.json", command.label())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Where a command reads and writes.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub input: PathBuf,
    pub out: PathBuf,
}

struct Record {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    flagged: usize,
    metrics: BTreeMap<String, Value>,
}

impl Record {
    fn new() -> Self {
        Self {
            inputs: Vec::new(),
            outputs: Vec::new(),
            flagged: 0,
            metrics: BTreeMap::new(),
        }
    }

    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

impl Workspace {
    fn upstream(&self, name: &str, rec: &mut Record) -> Result<PathBuf> {
        let p = self.input.join(name);
        if !p.is_file() {
            return Err(Error::Missing(format!(
                "{} (run the stage that produces it first)",
                p.display()
            )));
        }
        rec.inputs.push(p.clone());
        Ok(p)
    }

    fn output(&self, name: &str, rec: &mut Record) -> PathBuf {
        let p = self.out.join(name);
        rec.outputs.push(p.clone());
        p
    }
}

fn vocab_of(cfg: &PipelineConfig) -> Result<Vocabulary> {
    Vocabulary::new(cfg.corpus.n_languages, cfg.corpus.vocab_size)
}

fn load_model(ws: &Workspace, rec: &mut Record) -> Result<Model> {
    Model::load(ws.upstream(MODEL_FILE, rec)?)
}

fn load_pairs(ws: &Workspace, name: &str, rec: &mut Record) -> Result<Vec<PromptPair>> {
    corpus::read_jsonl(ws.upstream(name, rec)?)
}

fn load_importance(ws: &Workspace, rec: &mut Record) -> Result<ImportanceMap> {
    let text = std::fs::read_to_string(ws.upstream(IMPORTANCE_JSON, rec)?)?;
    Ok(serde_json::from_str(&text)?)
}

fn names(cs: &[ComponentId]) -> Vec<String> {
    cs.iter().map(|c| c.to_string()).collect()
}

fn held_out(pairs: &[PromptPair]) -> Vec<&PromptPair> {
    pairs.iter().filter(|p| p.held_out).collect()
}

fn cmd_gen_data(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let corpus = Corpus::generate(&cfg.corpus)?;
    corpus::write_jsonl(ws.output(PAIRS_FILE, rec), &corpus.pairs)?;
    corpus::write_jsonl(ws.output(SHIFT_PAIRS_FILE, rec), &corpus.shift_pairs)?;
    rec.metric("pairs", corpus.pairs.len());
    rec.metric("held_out_pairs", corpus.held_out_pairs().len());
    rec.metric("shift_pairs", corpus.shift_pairs.len());
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let vocab = vocab_of(cfg)?;
    let pairs = load_pairs(ws, PAIRS_FILE, rec)?;
    let mut model = Model::new(cfg.model.to_config(vocab.size()))?;
    let train_pairs: Vec<&PromptPair> = pairs.iter().filter(|p| !p.held_out).collect();
    let examples = examples_from_pairs(&train_pairs, Some(vocab.no_answer()));
    let report = match train(&mut model, &examples, &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::Diverged { .. }) => {
            let dump = ws.out.join("diverged.ttw");
            if model.save(&dump).is_ok() {
                eprintln!("state at divergence written to {}", dump.display());
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let mut log = String::new();
    for r in &report.log {
        log.push_str(&serde_json::to_string::<StepRecord>(r)?);
        log.push('\n');
    }
    write_text(ws.output(TRAIN_LOG_FILE, rec), &log)?;
    model.save(ws.output(MODEL_FILE, rec))?;
    let held = held_out(&pairs);
    rec.metric("steps", report.steps);
    rec.metric("final_loss", report.final_loss);
    if !held.is_empty() {
        rec.metric("held_out_accuracy", evaluate_translation_accuracy(&model, &held)?);
        rec.metric("counterfactual_accuracy", counterfactual_accuracy(&model, &held)?);
    }
    Ok(())
}

fn cmd_identify(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let pairs = load_pairs(ws, PAIRS_FILE, rec)?;
    let (kept, rate) = corpus::filter_positive(&model, &pairs)?;
    let sample: Vec<PromptPair> = kept
        .into_iter()
        .step_by(cfg.identify.stride.max(1))
        .take(cfg.identify.max_pairs)
        .collect();
    if sample.is_empty() {
        return Err(Error::Degenerate("no correctly translated pairs to analyse".into()));
    }
    let opts = IdentifyOptions {
        r: cfg.identify.r,
        mean_scale: cfg.identify.mean_scale,
        orthogonalization: cfg.identify.orthogonalization,
    };
    let comps = ComponentId::heads_and_mlps(model.config());
    let mut store = SubspaceStore::new();
    for cm in contrastive_matrices(&model, &sample, &comps)? {
        store.insert(identify_with(&cm, &opts)?);
    }
    corpus::write_jsonl(ws.output(ANALYSIS_PAIRS_FILE, rec), &sample)?;
    store.save(ws.output(SUBSPACES_FILE, rec))?;
    rec.metric("retention", rate);
    rec.metric("analysis_pairs", sample.len());
    Ok(())
}

fn patch_store(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<Option<SubspaceStore>> {
    if cfg.patch.mode == PatchKind::Standard {
        return Ok(None);
    }
    let store = SubspaceStore::load(ws.upstream(SUBSPACES_FILE, rec)?)?;
    Ok(Some(match cfg.patch.basis_rank {
        None => store,
        Some(k) => {
            let mut out = SubspaceStore::new();
            for s in store.entries() {
                out.insert(s.with_basis_rank(k)?);
            }
            out
        }
    }))
}

fn patch_mode(store: &Option<SubspaceStore>) -> PatchMode<'_> {
    match store {
        Some(s) => PatchMode::Subspace(s),
        None => PatchMode::Standard,
    }
}

fn cmd_patch(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let sample = load_pairs(ws, ANALYSIS_PAIRS_FILE, rec)?;
    let store = patch_store(cfg, ws, rec)?;
    let pc = cfg.patch.patching();
    let comps = ComponentId::heads_and_mlps(model.config());
    let imp = run_patching(&model, &sample, &comps, patch_mode(&store), &pc)?;
    imp.write_csv(ws.output(IMPORTANCE_CSV, rec))?;
    write_text(ws.output(IMPORTANCE_JSON, rec), &serde_json::to_string(&imp)?)?;
    let crucial = detect_crucial(&imp, &pc);
    let crucial_heads = crucial.iter().filter(|c| c.is_head()).count();
    rec.flagged = imp.flagged_pairs.len();
    rec.metric("crucial", names(&crucial));
    rec.metric(
        "crucial_head_fraction",
        crucial_heads as f64 / model.config().total_heads() as f64,
    );
    rec.metric("ranked_heads", names(&imp.ranked_heads()));
    Ok(())
}

fn cmd_knockout(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let pairs = load_pairs(ws, PAIRS_FILE, rec)?;
    let imp = load_importance(ws, rec)?;
    let heads = ComponentId::all_heads(model.config());
    let means = counterfactual_means(&model, &pairs, &heads)?;
    let eval: Vec<PromptPair> = held_out(&pairs).into_iter().cloned().collect();
    let k = &cfg.knockout;
    let curve = knockout_curve(&model, &eval, &imp.ranked_heads(), k.k_max, k.trials, k.seed, &means)?;
    write_text(ws.output(KNOCKOUT_CSV, rec), &curve.to_csv())?;
    if let (Some(first), Some(last)) = (curve.points.first(), curve.points.last()) {
        rec.metric("baseline_accuracy", first.crucial_accuracy);
        rec.metric("crucial_accuracy", last.crucial_accuracy);
        rec.metric("random_accuracy", last.random_mean);
    }
    Ok(())
}

fn cmd_characterize(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let sample = load_pairs(ws, ANALYSIS_PAIRS_FILE, rec)?;
    let heads = ComponentId::all_heads(model.config());
    let rows = crate::analysis::characterize_heads(&model, &sample, &heads, cfg.characterize.threshold)?;
    write_text(ws.output(PROFILES_CSV, rec), &characterization_csv(&rows))?;
    let classified: Vec<_> = rows.iter().map(|r| (r.role, r.profiles.as_slice())).collect();
    write_text(
        ws.output(ROLE_STATS_CSV, rec),
        &attention_distribution_stats(&classified).to_csv(),
    )?;
    let roles: BTreeMap<String, String> = rows
        .iter()
        .map(|r| (r.head.to_string(), r.role.role.to_string()))
        .collect();
    rec.metric("roles", roles);
    Ok(())
}

fn equivalents(lexicon: &Lexicon, n_languages: usize, p: &PromptPair) -> Result<BTreeMap<usize, u32>> {
    (0..n_languages).map(|l| Ok((l, lexicon.word(p.entry, l)?))).collect()
}

fn cmd_probe_mlp(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let sample = load_pairs(ws, ANALYSIS_PAIRS_FILE, rec)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let nl = cfg.corpus.n_languages;
    let lex = &corpus.lexicon;
    // Probe slots: source word, target word, then the remaining languages.
    let probes = |p: &PromptPair| -> Vec<u32> {
        let mut langs = vec![p.direction.source, p.direction.target];
        langs.extend((0..nl).filter(|l| *l != p.direction.source && *l != p.direction.target));
        langs.iter().map(|&l| lex.word(p.entry, l).unwrap_or(0)).collect()
    };
    let traces = mean_mlp_traces(&model, &sample, probes)?;
    write_text(
        ws.output(TRACES_CSV, rec),
        &traces_csv(&traces, &["src", "tgt", "other"]),
    )?;
    if let Some(pivot) = cfg.probe.pivot {
        if pivot >= nl {
            return Err(Error::Config(format!("pivot language {pivot} outside {nl} languages")));
        }
        let direct: Vec<PromptPair> = corpus
            .pairs
            .iter()
            .filter(|p| p.held_out && p.direction.source != pivot && p.direction.target != pivot)
            .cloned()
            .collect();
        let s = pivot_summary(&model, &direct, pivot, cfg.probe.mode, |p| equivalents(lex, nl, p))?;
        write_text(ws.output(PIVOT_JSON, rec), &serde_json::to_string_pretty(&s)?)?;
        rec.metric("pivot_wins", s.pivot_wins);
    }
    Ok(())
}

fn cmd_stats(cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    let model = load_model(ws, rec)?;
    let sample = load_pairs(ws, ANALYSIS_PAIRS_FILE, rec)?;
    let store = patch_store(cfg, ws, rec)?;
    let pc = cfg.patch.patching();
    let comps = ComponentId::heads_and_mlps(model.config());
    let mut by_dir: BTreeMap<_, Vec<PromptPair>> = BTreeMap::new();
    for p in &sample {
        by_dir.entry(p.direction).or_default().push(p.clone());
    }
    let mut maps = Vec::new();
    for (d, pairs) in &by_dir {
        maps.push((*d, run_patching(&model, pairs, &comps, patch_mode(&store), &pc)?));
    }
    let total = model.config().total_heads();
    let k = cfg.stats.top_k;
    let mut comparisons = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let (da, ma) = &maps[i];
            let (db, mb) = &maps[j];
            let flat = |m: &ImportanceMap| {
                m.scores
                    .iter()
                    .flat_map(|s| s.per_pair.iter().copied())
                    .collect::<Vec<_>>()
            };
            let (a, b) = (flat(ma), flat(mb));
            let ks = ks_two_sample(&a, &b)?;
            let perm = ks_permutation_test(&a, &b, cfg.stats.resamples, cfg.stats.seed)?;
            let ov = head_overlap(&ma.ranked_heads(), &mb.ranked_heads(), k);
            rec.flagged += ma.flagged_pairs.len() + mb.flagged_pairs.len();
            comparisons.push(json!({
                "a": format!("{}->{}", da.source, da.target),
                "b": format!("{}->{}", db.source, db.target),
                "ks_statistic": ks.statistic,
                "ks_p_value": ks.p_value,
                "permutation_p_value": perm,
                "overlap": ov,
                "overlap_baseline": overlap_baseline(k, total),
            }));
        }
    }
    let doc = json!({ "top_k": k, "comparisons": comparisons });
    write_text(ws.output(STATS_JSON, rec), &serde_json::to_string_pretty(&doc)?)?;
    rec.metric("comparisons", comparisons.len());
    Ok(())
}

fn cmd_finetune(
    cfg: &PipelineConfig,
    ws: &Workspace,
    rec: &mut Record,
    mode: FinetuneMode,
    k: Option<usize>,
) -> Result<()> {
    let vocab = vocab_of(cfg)?;
    let mut model = load_model(ws, rec)?;
    let shift = load_pairs(ws, SHIFT_PAIRS_FILE, rec)?;
    let pairs = load_pairs(ws, PAIRS_FILE, rec)?;
    let c = *model.config();
    let ft = &cfg.finetune;
    let mask = match mode {
        FinetuneMode::Full => {
            if let Some(k) = k {
                eprintln!("warning: full fine-tuning ignores k = {k}");
            }
            TrainableMask::full(&c)
        }
        _ => {
            let imp = load_importance(ws, rec)?;
            build_mask(&imp, k.unwrap_or(DEFAULT_K), mode.into(), ft.seed, &c)?
        }
    };
    let train_pairs: Vec<&PromptPair> = shift.iter().filter(|p| !p.held_out).collect();
    let examples = examples_from_pairs(&train_pairs, Some(vocab.no_answer()));
    let report = targeted_finetune(&mut model, &examples, &mask, &ft.train_config())?;
    let label = Command::Finetune { mode, k }.label();
    model.save(ws.output(&format!("{label}.ttw"), rec))?;
    rec.metric("mask_heads", names(&mask.heads_in_mask()));
    rec.metric("mask_groups", mask.groups.len());
    rec.metric("per_layer_scale", &mask.per_layer_scale);
    rec.metric("steps", report.steps);
    rec.metric(
        "shift_accuracy",
        evaluate_translation_accuracy(&model, &held_out(&shift))?,
    );
    rec.metric(
        "original_accuracy",
        evaluate_translation_accuracy(&model, &held_out(&pairs))?,
    );
    Ok(())
}

fn execute(command: &Command, cfg: &PipelineConfig, ws: &Workspace, rec: &mut Record) -> Result<()> {
    match command {
        Command::GenData => cmd_gen_data(cfg, ws, rec),
        Command::Train => cmd_train(cfg, ws, rec),
        Command::Identify => cmd_identify(cfg, ws, rec),
        Command::Patch => cmd_patch(cfg, ws, rec),
        Command::Knockout => cmd_knockout(cfg, ws, rec),
        Command::Characterize => cmd_characterize(cfg, ws, rec),
        Command::ProbeMlp => cmd_probe_mlp(cfg, ws, rec),
        Command::Stats => cmd_stats(cfg, ws, rec),
        Command::Finetune { mode, k } => cmd_finetune(cfg, ws, rec, *mode, *k),
        Command::Pipeline | Command::Replay { .. } => Err(Error::invalid("not a single stage")),
    }
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Runs one stage and writes its manifest.
pub fn run_stage(command: &Command, cfg: &PipelineConfig, ws: &Workspace, threads: usize) -> Result<RunManifest> {
    std::fs::create_dir_all(&ws.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let mut rec = Record::new();
    pool.install(|| execute(command, cfg, ws, &mut rec))?;
    let hash_all = |paths: &[PathBuf], base: &Path| -> Result<Vec<FileRecord>> {
        paths
            .iter()
            .map(|p| {
                Ok(FileRecord {
                    path: relative(p, base),
                    sha256: sha256_file(p)?,
                })
            })
            .collect()
    };
    let manifest = RunManifest {
        command: command.clone(),
        config: cfg.clone(),
        threads,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: hash_all(&rec.inputs, &ws.input)?,
        outputs: hash_all(&rec.outputs, &ws.out)?,
        flagged_pairs: rec.flagged,
        metrics: rec.metrics,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_text(
        ws.out.join(RunManifest::file_name(command)),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Stages run by `pipeline`, in order.
pub fn pipeline_stages(k: usize) -> Vec<Command> {
    vec![
        Command::GenData,
        Command::Train,
        Command::Identify,
        Command::Patch,
        Command::Knockout,
        Command::Characterize,
        Command::ProbeMlp,
        Command::Stats,
        Command::Finetune {
            mode: FinetuneMode::Targeted,
            k: Some(k),
        },
        Command::Finetune {
            mode: FinetuneMode::Random,
            k: Some(k),
        },
        Command::Finetune {
            mode: FinetuneMode::Full,
            k: None,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMismatch {
    pub command: String,
    pub path: String,
    pub expected: String,
    pub found: String,
}

/// Re-runs every manifest in `dir` (stage order) into `ws` with the recorded
/// configuration and thread count; returns the outputs whose hash differs.
pub fn replay(dir: &Path, ws: &Workspace) -> Result<Vec<ReplayMismatch>> {
    let mut manifests = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("manifest-") && name.ends_with(".json") {
            let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            manifests.push(m);
        }
    }
    if manifests.is_empty() {
        return Err(Error::Missing(format!("no manifests in {}", dir.display())));
    }
    manifests.sort_by_key(|m| m.command.stage().0);
    let mut mismatches = Vec::new();
    for m in &manifests {
        let again = run_stage(&m.command, &m.config, ws, m.threads)?;
        for want in &m.outputs {
            let found = again
                .outputs
                .iter()
                .find(|o| o.path == want.path)
                .map(|o| o.sha256.clone())
                .unwrap_or_default();
            if found != want.sha256 {
                mismatches.push(ReplayMismatch {
                    command: m.command.label(),
                    path: want.path.clone(),
                    expected: want.sha256.clone(),
                    found,
                });
            }
        }
    }
    Ok(mismatches)
}

/// 2 for problems with the user's input or configuration, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Missing(_) | Error::Format { .. } | Error::Json(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(&cli.command, seed);
    }
    let ws = Workspace {
        input: cli.input.clone().unwrap_or_else(|| cli.out.clone()),
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Pipeline => {
            let ws = Workspace {
                input: cli.out.clone(),
                out: cli.out.clone(),
            };
            for stage in pipeline_stages(DEFAULT_K) {
                let m = run_stage(&stage, &cfg, &ws, cli.threads)?;
                println!("{:<20} {:>8.2}s", stage.label(), m.wall_clock_secs);
            }
            Ok(())
        }
        Command::Replay { manifests } => {
            let ws = Workspace {
                input: cli.out.clone(),
                out: cli.out.clone(),
            };
            let bad = replay(manifests, &ws)?;
            if bad.is_empty() {
                println!("all output hashes reproduced");
                Ok(())
            } else {
                for m in &bad {
                    eprintln!("{}: {} expected {} found {}", m.command, m.path, m.expected, m.found);
                }
                Err(Error::Degenerate(format!("{} outputs differ", bad.len())))
            }
        }
        stage => {
            let m = run_stage(stage, &cfg, &ws, cli.threads)?;
            println!("{}", serde_json::to_string_pretty(&m.metrics)?);
            Ok(())
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
