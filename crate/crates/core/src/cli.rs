//! Command-line pipeline: corpus generation, filtering, training, synthesis,
//! evaluation and reports, all driven by one strict TOML run config.
//!
//! Every subcommand writes into `<out>/<subcommand>/` and leaves a
//! `run.json` (config hash, seed, version) and the effective `config.toml`
//! beside its artifacts.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentPolicy, NoiseClip};
use crate::datafilter::{filter_corpus, FilterConfig, ProxyScorer};
use crate::error::Error;
use crate::eval::{emit_report, report_csv, run_eval, EvalOptions, MetricsReport};
use crate::flowmatch::{finetune, pretrain, FlowConfig, LossCurve, TrainConfig, TrainMode, TrainSample};
use crate::infill::MaskPolicy;
use crate::model::checkpoint;
use crate::model::{
    DurConfig, DurationNet, DurationSample, FeatureSequence, PhonemeFrames, VectorFieldNet, VfBatch, VfConfig,
};
use crate::numcore::gradcheck::check;
use crate::numcore::{Matrix, ParamStore, Rng, Segments};
use crate::sampler::{synthesize_full, SamplerConfig, SynthRequest, Trajectory};
use crate::synthworld::{
    build_eval_set, gen_corpus, CorpusSpec, EvalSample, EvalSetSpec, Provenance, SynthUtterance, World, WorldConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

const STREAM_BANK: u64 = 0xba4c;
const STREAM_EVAL: u64 = 0xe7a1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBankSpec {
    pub clips: usize,
    pub frames: usize,
}

/// One training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub suffix_mask_prob: f64,
    /// Fine-tuning only.
    pub cond_dropout: f64,
    /// Pre-training only: train on the filter's kept list.
    pub use_filtered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub chunk: usize,
    /// Gate used for `--se` models.
    pub gate_db: f64,
    pub set: EvalSetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus: CorpusSpec,
    pub ft_corpus: CorpusSpec,
    pub noise_bank: NoiseBankSpec,
    pub filter: FilterConfig,
    pub model: VfConfig,
    pub augment: AugmentPolicy,
    pub mask: MaskPolicy,
    pub flow: FlowConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            corpus: CorpusSpec {
                utterances: 3000,
                multi_speaker_fraction: 0.1,
                noisy_fraction: 0.3,
                ..CorpusSpec::default()
            },
            ft_corpus: CorpusSpec {
                utterances: 1000,
                noisy_fraction: 0.1,
                ..CorpusSpec::default()
            },
            noise_bank: NoiseBankSpec { clips: 64, frames: 64 },
            filter: FilterConfig::default(),
            model: VfConfig::default(),
            augment: AugmentPolicy {
                p_noise_pre: 0.5,
                p_noise_ft: 0.5,
                ..AugmentPolicy::default()
            },
            mask: MaskPolicy::default(),
            flow: FlowConfig::default(),
            pretrain: StageConfig {
                steps: 20_000,
                batch_size: 8,
                peak_lr: 2e-3,
                suffix_mask_prob: 0.0,
                cond_dropout: 0.0,
                use_filtered: true,
            },
            finetune: StageConfig {
                steps: 10_000,
                batch_size: 8,
                peak_lr: 1e-3,
                suffix_mask_prob: 0.5,
                cond_dropout: crate::flowmatch::DEFAULT_COND_DROPOUT,
                use_filtered: false,
            },
            sampler: SamplerConfig::default(),
            eval: EvalConfig {
                seeds: crate::eval::DEFAULT_SEEDS.to_vec(),
                chunk: 25,
                gate_db: 0.0,
                set: EvalSetSpec::default(),
            },
        }
    }
}

impl RunConfig {
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let stage = match mode {
            TrainMode::Pretrain => &self.pretrain,
            TrainMode::Finetune => &self.finetune,
        };
        let mut cfg = TrainConfig::new(mode, stage.steps, stage.batch_size, stage.peak_lr);
        cfg.augment = self.augment;
        cfg.mask = self.mask;
        cfg.flow = self.flow;
        cfg.suffix_mask_prob = stage.suffix_mask_prob;
        cfg.cond_dropout = stage.cond_dropout;
        cfg
    }

    pub fn eval_options(&self, gate_db: Option<f64>) -> EvalOptions {
        EvalOptions {
            sampler: self.sampler,
            seeds: self.eval.seeds.clone(),
            enhance_gate_db: gate_db,
            chunk: self.eval.chunk,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        self.train_config(TrainMode::Pretrain).validate()?;
        self.train_config(TrainMode::Finetune).validate()?;
        if self.model.feat_dim != self.world.feat_dim || self.model.vocab_size != self.world.vocab_size {
            return Err(Error::Config(
                "model.feat_dim / model.vocab_size must match the world".into(),
            ));
        }
        if self.noise_bank.clips == 0 || self.noise_bank.frames == 0 {
            return Err(Error::Config("noise_bank needs clips and frames".into()));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// SHA-256 of the effective config text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            EXIT_CONFIG => "config",
            EXIT_NUMERIC => "numeric",
            _ => "data",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "code": self.code, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Invalid(_) => EXIT_CONFIG,
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Reject keys absent from `schema`, naming the closest valid key.
fn check_keys(user: &toml::Table, schema: &toml::Table, prefix: &str) -> CliResult<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match schema.get(k) {
            Some(toml::Value::Table(s)) => match v {
                toml::Value::Table(u) => check_keys(u, s, &path)?,
                _ => return Err(CliError::config(format!("`{path}` must be a table"))),
            },
            Some(_) => {}
            None => {
                let best = schema
                    .keys()
                    .max_by(|a, b| strsim::jaro_winkler(k, a).total_cmp(&strsim::jaro_winkler(k, b)));
                let hint = match best {
                    Some(b) if prefix.is_empty() => format!("; did you mean `{b}`?"),
                    Some(b) => format!("; did you mean `{prefix}.{b}`?"),
                    None => String::new(),
                };
                return Err(CliError::config(format!("unknown key `{path}`{hint}")));
            }
        }
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(item: &str) -> CliResult<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{item}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::config(format!("--set has an empty key in `{item}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> CliResult<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::config(format!("`{p}` is not a table"))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Build the effective config: defaults, then the file, then `--set`
/// overrides, then `--seed`.
pub fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let schema = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut user = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| {
                CliError::config(format!("{}: {}", p.display(), e.message().replace('\n', " ")))
            })?
        }
        None => toml::Table::new(),
    };
    for item in sets {
        let (key, value) = parse_override(item)?;
        set_path(&mut user, &key, value)?;
    }
    check_keys(&user, &schema, "")?;
    let mut full = schema;
    merge(&mut full, user);
    let mut cfg: RunConfig = toml::Value::Table(full)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.message().replace('\n', " ")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "rflow", version, about = "Noise-robust flow-matching TTS on a synthetic feature world")]
pub struct Cli {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override one config key, e.g. `--set pretrain.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pre-training and fine-tuning corpora.
    GenCorpus,
    /// Filter the pre-training corpus.
    Filter {
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Masked-denoising pre-training.
    Pretrain,
    /// Fine-tune a pre-trained checkpoint.
    Finetune {
        /// Starting checkpoint; defaults to the pretrain stage output.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Synthesise eval-set continuations.
    Synth {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Also dump the solver trajectory of the first sample.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate one or more checkpoints on the eval set.
    Eval {
        /// `name=path`; repeatable. Defaults to the fine-tune output.
        #[arg(long = "model", value_name = "NAME=PATH")]
        models: Vec<String>,
        /// `name=path` evaluated with spectral-gate enhanced prompts.
        #[arg(long = "se", value_name = "NAME=PATH")]
        enhanced: Vec<String>,
    },
    /// Check reverse-mode gradients against finite differences.
    Gradcheck,
    /// Render the eval results as CSV and SVG charts.
    Report,
}

impl Command {
    fn dir_name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "corpus",
            Command::Filter { .. } => "filter",
            Command::Pretrain => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Synth { .. } => "synth",
            Command::Eval { .. } => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Report => "report",
        }
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    version: &'a str,
}

fn stage_dir(out: &Path, cmd: &Command, cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = out.join(cmd.dir_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let meta = RunMeta {
        command: cmd.dir_name(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&meta).map_err(Error::from)? + "\n",
    )?;
    Ok(dir)
}

/// Manifest line for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub speaker_id: u64,
    pub n_speakers: usize,
    pub noise_mixed: bool,
    pub snr_db: Option<f64>,
    pub frames: usize,
    pub phone_seq: Vec<usize>,
    pub phone_durations: Vec<usize>,
}

fn write_corpus(dir: &Path, name: &str, corpus: &[SynthUtterance]) -> CliResult<()> {
    let mut manifest = String::new();
    let mut store = ParamStore::new();
    for u in corpus {
        let prov = u.provenance.clone().unwrap_or(Provenance {
            noise_mixed: false,
            snr_db: None,
            n_speakers: 1,
        });
        let rec = ManifestRecord {
            id: u.id.clone(),
            seed: u.seed,
            speaker_id: u.speaker_id,
            n_speakers: prov.n_speakers,
            noise_mixed: prov.noise_mixed,
            snr_db: prov.snr_db,
            frames: u.frames(),
            phone_seq: u.phone_seq.clone(),
            phone_durations: u.phone_durations.clone(),
        };
        manifest.push_str(&serde_json::to_string(&rec).map_err(Error::from)?);
        manifest.push('\n');
        let x = u.features.data();
        store.register(&format!("{}/x", u.id), &[x.rows(), x.cols()], x.as_slice().to_vec())?;
        let a: Vec<f64> = u.phonemes.ids().iter().map(|&p| p as f64).collect();
        store.register(&format!("{}/a", u.id), &[a.len()], a)?;
    }
    fs::write(dir.join(format!("{name}.jsonl")), manifest)?;
    checkpoint::save(&store, &dir.join(format!("{name}.bin")))?;
    Ok(())
}

/// Read a corpus written by `gen-corpus`.
pub fn read_corpus(dir: &Path, name: &str, world: &World) -> CliResult<Vec<SynthUtterance>> {
    let manifest_path = dir.join(format!("{name}.jsonl"));
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::data(format!("{}: {e} (run gen-corpus first)", manifest_path.display())))?;
    let store = checkpoint::load(&dir.join(format!("{name}.bin")))?;
    let vocab = world.config.vocab_size;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let rec: ManifestRecord = serde_json::from_str(line).map_err(Error::from)?;
            let x = store.matrix(store.id(&format!("{}/x", rec.id))?);
            let a: Vec<usize> = store
                .slice(store.id(&format!("{}/a", rec.id))?)
                .iter()
                .map(|&v| v as usize)
                .collect();
            let phonemes = PhonemeFrames::new(a, vocab)?;
            Ok(SynthUtterance {
                id: rec.id,
                seed: rec.seed,
                speaker_id: rec.speaker_id,
                speaker: world.speaker(rec.speaker_id),
                features: FeatureSequence::new(x)?,
                phonemes,
                phone_seq: rec.phone_seq,
                phone_durations: rec.phone_durations,
                provenance: Some(Provenance {
                    noise_mixed: rec.noise_mixed,
                    snr_db: rec.snr_db,
                    n_speakers: rec.n_speakers,
                }),
            })
        })
        .collect()
}

fn world_of(cfg: &RunConfig) -> CliResult<World> {
    Ok(World::new(cfg.world, cfg.seed)?)
}

fn noise_bank(cfg: &RunConfig, world: &World) -> CliResult<Vec<NoiseClip>> {
    Ok(world.noise_bank(
        cfg.noise_bank.clips,
        cfg.noise_bank.frames,
        &mut Rng::new(cfg.seed, STREAM_BANK),
    )?)
}

pub fn eval_set(cfg: &RunConfig, world: &World) -> CliResult<Vec<EvalSample>> {
    Ok(build_eval_set(world, &cfg.eval.set, &Rng::new(cfg.seed, STREAM_EVAL))?)
}

fn load_net(path: &Path) -> CliResult<VectorFieldNet> {
    let store = checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(VectorFieldNet::from_params(store)?)
}

fn save_stage(dir: &Path, net: &VectorFieldNet, curve: &LossCurve) -> CliResult<()> {
    checkpoint::save(&net.params, &dir.join("model.ckpt"))?;
    fs::write(dir.join("loss.csv"), curve.to_csv())?;
    Ok(())
}

/// Max relative gradient error of the vector-field net and the duration
/// net on D=2, T=6 instances with randomised parameters.
pub fn gradcheck_errors(seed: u64) -> crate::Result<(f64, f64)> {
    let eps = 1e-5;
    let cfg = VfConfig {
        feat_dim: 2,
        hidden: 6,
        depth: 2,
        conv_width: 3,
        vocab_size: 5,
    };
    let mut net = VectorFieldNet::new(cfg, &mut Rng::new(seed, 1))?;
    let mut r = Rng::new(seed, 2);
    // the zero-initialised output layer would hide everything upstream
    for v in net.params.values_mut() {
        *v = 0.5 * r.normal();
    }
    let batch = VfBatch {
        x_t: Matrix::from_fn(2, 6, |_, _| r.normal()),
        x_ctx: Matrix::from_fn(2, 6, |_, _| r.normal()),
        phonemes: vec![1, 1, 2, 0, 4, 3].into(),
        t: vec![0.37],
        segments: Rc::new(Segments::single(6)),
    };
    let weights = Matrix::from_fn(2, 6, |_, _| r.normal());
    let vf = check(&net.params, eps, |t, s| {
        let out = net.forward_tape_with(t, s, &batch)?;
        let w = t.constant(weights.clone());
        let y = t.mul(out, w);
        Ok(t.sum(y))
    })?;

    let dcfg = DurConfig {
        hidden: 5,
        depth: 2,
        conv_width: 3,
        vocab_size: 6,
    };
    let mut dur = DurationNet::new(dcfg, &mut Rng::new(seed, 3))?;
    for v in dur.params.values_mut() {
        *v = 0.5 * r.normal();
    }
    let a = DurationSample::new(
        vec![1, 3, 5, 2, 2, 4],
        vec![4.0, 6.0, 4.0, 5.0, 5.0, 3.0],
        vec![true, false, true, false, false, true],
    )?;
    let dr = check(&dur.params, eps, |t, s| dur.loss_tape_with(t, s, &[&a]))?;
    Ok((vf.max_rel_err, dr.max_rel_err))
}

fn parse_model_arg(item: &str) -> CliResult<(String, PathBuf)> {
    let (name, path) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("expected NAME=PATH, got `{item}`")))?;
    if name.is_empty() || name.contains(',') {
        return Err(CliError::config(format!("bad model name `{name}`")));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

/// Run one parsed invocation; returns the text for stdout.
pub fn execute(cli: &Cli) -> CliResult<String> {
    let cfg = load_config(cli.config.as_deref(), &cli.sets, cli.seed)?;
    if let Command::Filter { threshold: Some(t) } = &cli.command {
        if !t.is_finite() {
            return Err(CliError::config("--threshold must be finite"));
        }
    }
    let mut cfg = cfg;
    if let Command::Filter { threshold: Some(t) } = &cli.command {
        cfg.filter.quality_threshold = *t;
    }
    let out = &cli.out;
    let dir = stage_dir(out, &cli.command, &cfg)?;
    let world = world_of(&cfg)?;
    match &cli.command {
        Command::GenCorpus => {
            let pre = gen_corpus(&world, &cfg.corpus, "pre", 1)?;
            let ft = gen_corpus(&world, &cfg.ft_corpus, "ft", 2)?;
            write_corpus(&dir, "pretrain", &pre)?;
            write_corpus(&dir, "finetune", &ft)?;
            Ok(format!("pretrain {} utterances, finetune {}\n", pre.len(), ft.len()))
        }
        Command::Filter { .. } => {
            let corpus = read_corpus(&out.join("corpus"), "pretrain", &world)?;
            let (kept, stats) = filter_corpus(&corpus, &cfg.filter, &ProxyScorer)?;
            let line = stats.to_json_line();
            fs::write(dir.join("stats.json"), format!("{line}\n"))?;
            let ids: String = kept.iter().map(|u| format!("{}\n", u.id)).collect();
            fs::write(dir.join("kept.txt"), ids)?;
            Ok(format!("{line}\n"))
        }
        Command::Pretrain => {
            let corpus = read_corpus(&out.join("corpus"), "pretrain", &world)?;
            let corpus: Vec<SynthUtterance> = if cfg.pretrain.use_filtered {
                let path = out.join("filter").join("kept.txt");
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::data(format!("{}: {e} (run filter first)", path.display())))?;
                let keep: HashSet<&str> = text.lines().collect();
                corpus.into_iter().filter(|u| keep.contains(u.id.as_str())).collect()
            } else {
                corpus
            };
            let samples: Vec<TrainSample> = corpus.iter().map(TrainSample::from).collect();
            let bank = noise_bank(&cfg, &world)?;
            let mut net = VectorFieldNet::new(cfg.model, &mut Rng::new(cfg.seed, 0x1417))?;
            let curve = pretrain(&mut net, &samples, &bank, &cfg.train_config(TrainMode::Pretrain), cfg.seed)?;
            save_stage(&dir, &net, &curve)?;
            Ok(format!(
                "pretrain: {} samples, final loss {:.6}\n",
                samples.len(),
                curve.records.last().map_or(f64::NAN, |r| r.loss)
            ))
        }
        Command::Finetune { init } => {
            let init = init.clone().unwrap_or_else(|| out.join("pretrain").join("model.ckpt"));
            let mut net = load_net(&init)?;
            if *net.config() != cfg.model {
                return Err(CliError::config(format!(
                    "{} does not match the [model] section",
                    init.display()
                )));
            }
            let corpus = read_corpus(&out.join("corpus"), "finetune", &world)?;
            let samples: Vec<TrainSample> = corpus.iter().map(TrainSample::from).collect();
            let bank = noise_bank(&cfg, &world)?;
            let curve = finetune(&mut net, &samples, &bank, &cfg.train_config(TrainMode::Finetune), cfg.seed)?;
            save_stage(&dir, &net, &curve)?;
            Ok(format!(
                "finetune: {} samples, final loss {:.6}\n",
                samples.len(),
                curve.records.last().map_or(f64::NAN, |r| r.loss)
            ))
        }
        Command::Synth { model, samples, trace } => {
            let path = model.clone().unwrap_or_else(|| out.join("finetune").join("model.ckpt"));
            let net = load_net(&path)?;
            let set = eval_set(&cfg, &world)?;
            let n = (*samples).min(set.len());
            let mut store = ParamStore::new();
            for (i, s) in set.iter().take(n).enumerate() {
                for (tag, prompt) in [("clean", &s.prompt_clean), ("noisy", &s.prompt_noisy)] {
                    let req = SynthRequest {
                        prompt: prompt.clone(),
                        phonemes: s.prompt_phonemes.concat(&s.target.phonemes)?,
                        gen_frames: s.target.frames(),
                        rng: Rng::new(cfg.seed, 0x5eed).derive(i as u64),
                    };
                    let mut tr = Trajectory::default();
                    let keep_trace = *trace && i == 0 && tag == "clean";
                    let full = synthesize_full(&net, &[req], &cfg.sampler, keep_trace.then_some(&mut tr))?;
                    let m = &full[0];
                    store.register(&format!("{}/{tag}", s.id), &[m.rows(), m.cols()], m.as_slice().to_vec())?;
                    for (k, st) in tr.states.iter().enumerate() {
                        store.register(&format!("trace/state{k:03}"), &[st.rows(), st.cols()], st.as_slice().to_vec())?;
                    }
                }
            }
            checkpoint::save(&store, &dir.join("outputs.bin"))?;
            Ok(format!("synthesised {n} samples under both prompt conditions\n"))
        }
        Command::Eval { models, enhanced } => {
            let mut jobs: Vec<(String, PathBuf, Option<f64>)> = Vec::new();
            for m in models {
                let (name, path) = parse_model_arg(m)?;
                jobs.push((name, path, None));
            }
            for m in enhanced {
                let (name, path) = parse_model_arg(m)?;
                jobs.push((name, path, Some(cfg.eval.gate_db)));
            }
            if jobs.is_empty() {
                jobs.push(("model".into(), out.join("finetune").join("model.ckpt"), None));
            }
            let set = eval_set(&cfg, &world)?;
            let mut reports: Vec<MetricsReport> = Vec::new();
            for (name, path, gate) in &jobs {
                let net = load_net(path)?;
                let o = run_eval(&net, name, &cfg.world, &set, &cfg.eval_options(*gate))?;
                reports.push(o.clean.report);
                reports.push(o.noisy.report);
            }
            let refs: Vec<&MetricsReport> = reports.iter().collect();
            let csv = report_csv(&refs);
            fs::write(dir.join("report.csv"), &csv)?;
            fs::write(
                dir.join("reports.json"),
                serde_json::to_string_pretty(&reports).map_err(Error::from)? + "\n",
            )?;
            Ok(csv)
        }
        Command::Gradcheck => {
            let (vf, dur) = gradcheck_errors(cfg.seed)?;
            let worst = vf.max(dur);
            let line = format!(
                "{}\n",
                serde_json::json!({ "vf_max_rel_err": vf, "duration_max_rel_err": dur, "max_rel_err": worst, "pass": worst < GRADCHECK_TOL })
            );
            fs::write(dir.join("gradcheck.json"), &line)?;
            if worst < GRADCHECK_TOL {
                Ok(line)
            } else {
                Err(CliError {
                    code: EXIT_NUMERIC,
                    message: format!("max relative gradient error {worst:.3e} exceeds {GRADCHECK_TOL:e}"),
                })
            }
        }
        Command::Report => {
            let path = out.join("eval").join("reports.json");
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::data(format!("{}: {e} (run eval first)", path.display())))?;
            let reports: Vec<MetricsReport> = serde_json::from_str(&text).map_err(Error::from)?;
            let refs: Vec<&MetricsReport> = reports.iter().collect();
            let files = emit_report(&refs, &dir)?;
            let mut s = report_csv(&refs);
            for f in files {
                s.push_str(&format!("wrote {}\n", f.display()));
            }
            Ok(s)
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::config(e.to_string()).to_json_line());
            return EXIT_CONFIG;
        }
    }
    match execute(&cli) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.code
        }
    }
}
