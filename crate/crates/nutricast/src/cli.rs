//! The `nutricast` command line.
//!
//! Every value resolves as: command-line flag, then `NUTRICAST_<NAME>`
//! environment variable, then the key `<name>` of the JSON object given by
//! `--config`, then the built-in default. Keys use underscores
//! (`lr_head`, `out_dir`, ...).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nutricast_core::chem::{three_source_report, SourceValue};
use nutricast_core::classifier::{ItemInput, NutrientModel, Variant};
use nutricast_core::data::synth::{synth_generate, SynthMode};
use nutricast_core::data::{bin_nutrient, split_dataset, FoodItem, SplitAssignment};
use nutricast_core::encoders::{preprocess, ModelConfig, Preprocessing, Vocabulary};
use nutricast_core::evaluation::{item_errors, EvalReport};
use nutricast_core::interpret::{gradcam, render_overlay, render_saliency_html, text_saliency, SaliencyMethod};
use nutricast_core::pipeline::{self, PreparedItem};
use nutricast_core::training::{
    encoder_hash, train, CachedEmbeddings, Checkpoint, EmbeddingCache, TrainConfig, CHECKPOINT_VERSION,
};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::checkpoint::{file_sha256, load_checkpoint, save_checkpoint, sha256_hex};
use crate::chemio::{load_chem_csv, write_three_source};
use crate::dataset::{image_path, load_dataset, Dataset};
use crate::error::{read_json, write, write_json, Error, Result};
use crate::imageio::{load_image, save_png};
use crate::manifest::{load_manifest, write_manifest};
use crate::report::{bucket_svg, item_csv, loss_csv, ItemRows};
use crate::run::{timestamp, InputHash, RunDir, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "nutricast", version, about = "Nutrient-level estimation from product images and ingredient statements")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, env = "NUTRICAST_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for parallel loading and scoring.
    #[arg(long, global = true, env = "NUTRICAST_THREADS")]
    pub threads: Option<usize>,
    /// JSON object of defaults keyed by option name.
    #[arg(long, global = true, env = "NUTRICAST_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest + PNG images).
    Synth(SynthArgs),
    /// Validate a manifest and its images and summarize it.
    Ingest(IngestArgs),
    /// Fit the binning of one nutrient on the training split.
    Bin(BinArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// GradCAM heatmap overlay for one image.
    Gradcam(GradcamArgs),
    /// Per-token saliency for one ingredient statement.
    Saliency(SaliencyArgs),
    /// Database / model / chemistry comparison.
    Validate(ValidateArgs),
    /// Aggregate the reports of a run directory into one summary.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Standard,
    PlantedGlyph,
    PlantedIngredient,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => SynthMode::Standard,
            ModeArg::PlantedGlyph => SynthMode::PlantedGlyph,
            ModeArg::PlantedIngredient => SynthMode::PlantedIngredient,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, serde::Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    GradientInput,
    Attention,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = "NUTRICAST_N")]
    pub n: Option<usize>,
    #[arg(long, env = "NUTRICAST_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, env = "NUTRICAST_MODE")]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "NUTRICAST_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    /// Resolution images are checked against after resizing.
    #[arg(long, env = "NUTRICAST_RESOLUTION")]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitOpts {
    /// Fraction of items in the training split.
    #[arg(long, env = "NUTRICAST_SPLIT_RATIO")]
    pub split_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BinArgs {
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "NUTRICAST_NUTRIENT")]
    pub nutrient: Option<String>,
    /// Number of non-zero classes instead of the data-driven choice.
    #[arg(long, env = "NUTRICAST_K")]
    pub k: Option<usize>,
    #[command(flatten)]
    pub split: SplitOpts,
    /// Output file; defaults to `<run-dir>/reports/binning-<nutrient>.json`.
    #[arg(long, env = "NUTRICAST_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "NUTRICAST_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = "NUTRICAST_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    /// VF, LF, VLF (alias LVF) or VL.
    #[arg(long, env = "NUTRICAST_VARIANT")]
    pub variant: Option<String>,
    /// Nutrient channel; repeat or comma-separate. Defaults to every
    /// nutrient of the manifest.
    #[arg(long, value_delimiter = ',', env = "NUTRICAST_NUTRIENT")]
    pub nutrient: Vec<String>,
    #[arg(long, value_enum, env = "NUTRICAST_PRESET")]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub split: SplitOpts,
    #[arg(long, env = "NUTRICAST_K")]
    pub k: Option<usize>,
    /// Minimum corpus count for a word to enter the vocabulary.
    #[arg(long, env = "NUTRICAST_MIN_FREQUENCY")]
    pub min_frequency: Option<usize>,
    #[arg(long, env = "NUTRICAST_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "NUTRICAST_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "NUTRICAST_LR_HEAD")]
    pub lr_head: Option<f64>,
    #[arg(long, env = "NUTRICAST_LR_ENCODERS")]
    pub lr_encoders: Option<f64>,
    #[arg(long, env = "NUTRICAST_PATIENCE")]
    pub patience: Option<usize>,
    #[arg(long, env = "NUTRICAST_WEIGHT_DECAY")]
    pub weight_decay: Option<f64>,
    #[arg(long, env = "NUTRICAST_GRAD_CLIP")]
    pub grad_clip: Option<f64>,
    #[arg(long, env = "NUTRICAST_CONTRASTIVE_WEIGHT")]
    pub contrastive_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CheckpointOpts {
    /// Checkpoint file; defaults to the one inside `--run-dir`.
    #[arg(long, env = "NUTRICAST_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "NUTRICAST_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ckpt: CheckpointOpts,
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, env = "NUTRICAST_SPLIT")]
    pub split: Option<SplitArg>,
    /// Categories with fewer scored items are flagged low-confidence.
    #[arg(long, env = "NUTRICAST_MIN_CATEGORY_COUNT")]
    pub min_category_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TargetOpts {
    #[arg(long, env = "NUTRICAST_NUTRIENT")]
    pub nutrient: Option<String>,
    /// Target class; defaults to the predicted class.
    #[arg(long, env = "NUTRICAST_CLASS")]
    pub class: Option<usize>,
    /// Item id in `--manifest`.
    #[arg(long, env = "NUTRICAST_ITEM")]
    pub item: Option<String>,
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Image file instead of a manifest item.
    #[arg(long, env = "NUTRICAST_IMAGE")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub ckpt: CheckpointOpts,
    #[command(flatten)]
    pub target: TargetOpts,
    /// Ingredient statement for variants that also read text.
    #[arg(long, env = "NUTRICAST_TEXT")]
    pub text: Option<String>,
    /// Peak overlay opacity.
    #[arg(long, env = "NUTRICAST_ALPHA")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub ckpt: CheckpointOpts,
    #[command(flatten)]
    pub target: TargetOpts,
    /// Ingredient statement instead of a manifest item.
    #[arg(long, env = "NUTRICAST_TEXT")]
    pub text: Option<String>,
    #[arg(long, value_enum, env = "NUTRICAST_METHOD")]
    pub method: Option<MethodArg>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub ckpt: CheckpointOpts,
    #[arg(long, env = "NUTRICAST_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// CSV with `id,nutrient,chem_mean,chem_sd,method`.
    #[arg(long, env = "NUTRICAST_CHEM")]
    pub chem: Option<PathBuf>,
    /// Keep the fat channel in the comparison.
    #[arg(long, env = "NUTRICAST_INCLUDE_FAT")]
    pub include_fat: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, env = "NUTRICAST_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const CHECKPOINT: i32 = 4;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Core(nutricast_core::Error::Config(_)) => exit::USAGE,
            Error::Io { .. } | Error::Manifest { .. } | Error::Format { .. } => exit::INPUT,
            Error::Core(nutricast_core::Error::Validation(_)) => exit::INPUT,
            Error::Checkpoint { .. } => exit::CHECKPOINT,
            Error::Core(_) => exit::FAILURE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(_) => "core",
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Format { .. } => "format",
            Error::Usage(_) => "usage",
        }
    }
}

/// What a successful command wrote.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: &'static str,
    pub outputs: Vec<PathBuf>,
    pub summary: Value,
}

/// Parse `argv` and run; diagnostics go to stderr as one JSON object per
/// failure. Returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return exit::OK;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({"error": "usage", "message": message.trim_end()}));
            return exit::USAGE;
        }
    };
    match execute(cli, &argv) {
        Ok(out) => {
            println!("{}", json!({"command": out.command, "outputs": out.outputs, "summary": out.summary}));
            exit::OK
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            e.exit_code()
        }
    }
}

/// Parse and run without printing.
pub fn run<I, T>(argv: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Usage(e.render().to_string()))?;
    execute(cli, &argv)
}

/// Resolved options of one command: config-file fallbacks plus the record of
/// every value actually used.
struct Layers {
    file: Map<String, Value>,
    resolved: Map<String, Value>,
}

impl Layers {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            None => Map::new(),
            Some(p) => match read_json::<Value>(p)? {
                Value::Object(m) => m,
                _ => return Err(Error::format(p, "config file must hold a JSON object")),
            },
        };
        Ok(Self {
            file,
            resolved: Map::new(),
        })
    }

    fn get<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(v) => Some(
                    serde_json::from_value(v.clone())
                        .map_err(|e| Error::Usage(format!("config key `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved
                .insert(key.to_string(), serde_json::to_value(v).expect("options serialize"));
        }
        Ok(value)
    }

    fn or<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        match self.get(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved
                    .insert(key.to_string(), serde_json::to_value(&default).expect("options serialize"));
                Ok(default)
            }
        }
    }

    fn need<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::Usage(format!("missing --{}", key.replace('_', "-"))))
    }
}

struct Ctx {
    layers: Layers,
    argv: Vec<String>,
    inputs: Vec<InputHash>,
    seed: u64,
}

impl Ctx {
    fn hash_input(&mut self, path: &Path) -> Result<()> {
        let sha256 = file_sha256(path)?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    /// Manifest file plus one digest over all images it references.
    fn hash_dataset(&mut self, manifest: &Path, items: &[FoodItem]) -> Result<()> {
        self.hash_input(manifest)?;
        let digests: Vec<String> = items
            .par_iter()
            .map(|it| file_sha256(&image_path(manifest, it)))
            .collect::<Result<_>>()?;
        self.inputs.push(InputHash {
            path: format!("{} (images)", manifest.display()),
            sha256: sha256_hex(digests.concat().as_bytes()),
        });
        Ok(())
    }

    /// Append this command's entry to `<dir>/run-manifest.json`.
    fn record(&self, dir: &Path, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut runs: Vec<RunManifest> = if path.exists() { read_json(&path)? } else { Vec::new() };
        runs.push(RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            config: Value::Object(self.layers.resolved.clone()),
            inputs: self.inputs.clone(),
            outputs: outputs
                .iter()
                .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
                .collect(),
            seed: self.seed,
            timestamp: timestamp(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        });
        write_json(&path, &runs)?;
        Ok(path)
    }
}

fn execute(cli: Cli, argv: &[OsString]) -> Result<Outcome> {
    let mut layers = Layers::load(cli.config.as_deref())?;
    let threads = layers.get("threads", cli.threads)?;
    if let Some(n) = threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = layers.or("seed", cli.seed, 0u64)?;
    let mut ctx = Ctx {
        layers,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        inputs: Vec::new(),
        seed,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&mut ctx, a),
        Command::Ingest(a) => cmd_ingest(&mut ctx, a),
        Command::Bin(a) => cmd_bin(&mut ctx, a),
        Command::Train(a) => cmd_train(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::Gradcam(a) => cmd_gradcam(&mut ctx, a),
        Command::Saliency(a) => cmd_saliency(&mut ctx, a),
        Command::Validate(a) => cmd_validate(&mut ctx, a),
        Command::Report(a) => cmd_report(&mut ctx, a),
    }
}

fn cmd_synth(ctx: &mut Ctx, a: SynthArgs) -> Result<Outcome> {
    let n = ctx.layers.or("n", a.n, 500usize)?;
    let out_dir: PathBuf = ctx.layers.need("out_dir", a.out_dir)?;
    let mode = ctx.layers.or("mode", a.mode, ModeArg::Standard)?;
    let items = synth_generate(n, ctx.seed, mode.into())?;
    items
        .par_iter()
        .map(|s| save_png(&out_dir.join(&s.item.image_path), &s.image))
        .collect::<Result<()>>()?;
    let manifest = out_dir.join("manifest.jsonl");
    let food: Vec<FoodItem> = items.iter().map(|s| s.item.clone()).collect();
    write_manifest(&manifest, &food)?;
    // where the deciding glyph / ingredient sits, for localization checks
    let planted: Vec<Value> = items
        .iter()
        .filter(|s| s.marker_cell.is_some() || s.marker_ingredient.is_some())
        .map(|s| json!({"id": s.item.id, "marker_cell": s.marker_cell, "marker_ingredient": s.marker_ingredient}))
        .collect();
    let mut outputs = vec![manifest.clone(), out_dir.join("images")];
    if !planted.is_empty() {
        let truth = out_dir.join("planted.json");
        write_json(&truth, &planted)?;
        outputs.push(truth);
    }
    outputs.push(ctx.record(&out_dir, "synth", &outputs)?);
    Ok(Outcome {
        command: "synth",
        outputs,
        summary: json!({"items": n, "manifest": manifest}),
    })
}

fn cmd_ingest(ctx: &mut Ctx, a: IngestArgs) -> Result<Outcome> {
    let manifest: PathBuf = ctx.layers.need("manifest", a.manifest)?;
    let run = RunDir::new(ctx.layers.need::<PathBuf>("run_dir", a.run_dir)?);
    let resolution = ctx.layers.or("resolution", a.resolution, ModelConfig::tiny(4).image_resolution)?;
    let data = load_dataset(&manifest, resolution)?;
    ctx.hash_dataset(&manifest, &data.items)?;
    let mut nutrients: BTreeMap<&str, (String, usize, f64, f64)> = BTreeMap::new();
    let mut categories: BTreeMap<&str, usize> = BTreeMap::new();
    for it in &data.items {
        *categories.entry(it.category_label()).or_default() += 1;
        for (name, v) in &it.nutrients {
            let e = nutrients
                .entry(name)
                .or_insert((v.unit.clone(), 0, f64::INFINITY, f64::NEG_INFINITY));
            e.1 += 1;
            e.2 = e.2.min(v.value);
            e.3 = e.3.max(v.value);
        }
    }
    let summary = json!({
        "manifest": manifest,
        "items": data.items.len(),
        "image_resolution": resolution,
        "nutrients": nutrients.iter().map(|(n, (unit, count, lo, hi))| {
            (n.to_string(), json!({"unit": unit, "count": count, "min": lo, "max": hi}))
        }).collect::<Map<_, _>>(),
        "categories": categories,
    });
    let path = run.reports().join("ingest.json");
    write_json(&path, &summary)?;
    let mut outputs = vec![path];
    outputs.push(ctx.record(&run.root, "ingest", &outputs)?);
    Ok(Outcome {
        command: "ingest",
        outputs,
        summary,
    })
}

fn split_for(ctx: &mut Ctx, opts: SplitOpts, ids: &[String]) -> Result<SplitAssignment> {
    let ratio = ctx.layers.or("split_ratio", opts.split_ratio, 0.8)?;
    Ok(split_dataset(ids, ratio, ctx.seed)?)
}

fn cmd_bin(ctx: &mut Ctx, a: BinArgs) -> Result<Outcome> {
    let manifest: PathBuf = ctx.layers.need("manifest", a.manifest)?;
    let nutrient: String = ctx.layers.need("nutrient", a.nutrient)?;
    let k = ctx.layers.get("k", a.k)?;
    let items = load_manifest(&manifest)?;
    ctx.hash_input(&manifest)?;
    let ids: Vec<String> = items.iter().map(|i| i.id.clone()).collect();
    let split = split_for(ctx, a.split, &ids)?;
    let values: Vec<f64> = items
        .iter()
        .filter(|i| split.is_train(&i.id))
        .filter_map(|i| i.nutrients.get(&nutrient).map(|v| v.value))
        .collect();
    let (_, spec) = bin_nutrient(&nutrient, &values, k)?;
    let run_dir = ctx.layers.get::<PathBuf>("run_dir", a.run_dir)?;
    let out = match ctx.layers.get::<PathBuf>("out", a.out)? {
        Some(p) => p,
        None => match &run_dir {
            Some(r) => RunDir::new(r).reports().join(format!("binning-{nutrient}.json")),
            None => return Err(Error::Usage("missing --out or --run-dir".into())),
        },
    };
    write_json(&out, &spec)?;
    let mut outputs = vec![out.clone()];
    let record_dir = run_dir.unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).to_path_buf());
    outputs.push(ctx.record(&record_dir, "bin", &outputs)?);
    Ok(Outcome {
        command: "bin",
        outputs,
        summary: serde_json::to_value(&spec).expect("spec serializes"),
    })
}

fn preset_model(preset: Preset, vocab_size: usize) -> ModelConfig {
    match preset {
        Preset::Tiny => ModelConfig::tiny(vocab_size),
        Preset::Paper => ModelConfig::full(vocab_size),
    }
}

/// Frozen-encoder variants get their embeddings computed once, in parallel.
fn cache_for(model: &NutrientModel, items: &[&PreparedItem]) -> Result<Option<EmbeddingCache>> {
    if model.variant.trains_encoders() {
        return Ok(None);
    }
    let embedded: Vec<(String, CachedEmbeddings)> = items
        .par_iter()
        .map(|it| {
            let (image, text) = model.embed(&it.input)?;
            Ok((it.id.clone(), CachedEmbeddings { image, text }))
        })
        .collect::<Result<_>>()?;
    Ok(Some(EmbeddingCache {
        encoder_hash: encoder_hash(&model.config, &model.params),
        entries: embedded.into_iter().collect(),
    }))
}

fn cmd_train(ctx: &mut Ctx, a: TrainArgs) -> Result<Outcome> {
    let l = &mut ctx.layers;
    let manifest: PathBuf = l.need("manifest", a.manifest)?;
    let run = RunDir::new(l.need::<PathBuf>("run_dir", a.run_dir)?);
    let variant_name: String = l.or("variant", a.variant, "VL".to_string())?;
    let variant: Variant = variant_name.parse().map_err(|e: nutricast_core::Error| Error::Usage(e.to_string()))?;
    let preset = l.or("preset", a.preset, Preset::Tiny)?;
    let requested: Vec<String> = l.or("nutrient", (!a.nutrient.is_empty()).then_some(a.nutrient), Vec::new())?;
    let k = l.get("k", a.k)?;
    let min_frequency = l.or("min_frequency", a.min_frequency, 1usize)?;

    let data = load_dataset(&manifest, preset_model(preset, 4).image_resolution)?;
    ctx.hash_dataset(&manifest, &data.items)?;
    let split = split_for(ctx, a.split, &data.ids())?;
    let l = &mut ctx.layers;
    let nutrients: Vec<String> = if requested.is_empty() {
        let mut all: Vec<String> = data.items.iter().flat_map(|i| i.nutrients.keys().cloned()).collect();
        all.sort();
        all.dedup();
        all
    } else {
        requested
    };
    let train_texts = data
        .items
        .iter()
        .filter(|i| split.is_train(&i.id))
        .map(|i| i.ingredients.as_str());
    let vocabulary = Vocabulary::build(train_texts, min_frequency);
    let model_config = preset_model(preset, vocabulary.len());
    let base = match preset {
        Preset::Tiny => TrainConfig::tiny(variant, nutrients.clone(), ctx.seed),
        Preset::Paper => TrainConfig::paper(variant, nutrients.clone(), ctx.seed),
    };
    let train_config = TrainConfig {
        epochs: l.or("epochs", a.epochs, base.epochs)?,
        batch_size: l.or("batch_size", a.batch_size, base.batch_size)?,
        lr_head: l.or("lr_head", a.lr_head, base.lr_head)?,
        lr_encoders: l.or("lr_encoders", a.lr_encoders, base.lr_encoders)?,
        patience: l.get("patience", a.patience)?.or(base.patience),
        weight_decay: l.or("weight_decay", a.weight_decay, base.weight_decay)?,
        grad_clip: l.get("grad_clip", a.grad_clip)?.or(base.grad_clip),
        contrastive_weight: l.or("contrastive_weight", a.contrastive_weight, base.contrastive_weight)?,
        ..base
    };
    train_config.validate()?;

    let preprocessing = Preprocessing::standard(model_config.image_resolution);
    let prepared = data.prepare(&vocabulary, model_config.context_length, &preprocessing)?;
    let (train_items, _) = pipeline::split_sides(&prepared, &split)?;
    let binning = pipeline::fit_binning(&train_items, &nutrients, k)?;
    let examples = pipeline::label_examples(&train_items, &binning)?;
    let model = pipeline::model_for(model_config, variant, &binning, ctx.seed)?;
    let outcome = train(model, &examples, &train_config)?;
    let final_loss = outcome.history.last().map(|r| r.loss);
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: outcome.model,
        vocabulary,
        binning: binning.clone(),
        preprocessing,
        train_config: Some(train_config),
        seed: ctx.seed,
        history: outcome.history,
        split: Some(split),
    };
    let ckpt_path = run.checkpoint();
    let hash = save_checkpoint(&ckpt, &ckpt_path)?;
    let loss_path = run.reports().join("loss.csv");
    write(&loss_path, loss_csv(&ckpt.history)?)?;
    let binning_path = run.reports().join("binning.json");
    write_json(&binning_path, &binning)?;
    let summary = json!({
        "variant": variant.to_string(),
        "nutrients": nutrients,
        "epochs_run": outcome.epochs_run,
        "steps": ckpt.history.len(),
        "final_loss": final_loss,
        "checkpoint_sha256": hash,
    });
    let train_path = run.reports().join("train.json");
    write_json(&train_path, &summary)?;
    let mut outputs = vec![ckpt_path, loss_path, binning_path, train_path];
    outputs.push(ctx.record(&run.root, "train", &outputs)?);
    Ok(Outcome {
        command: "train",
        outputs,
        summary,
    })
}

/// The checkpoint and the run directory outputs go to.
fn resolve_checkpoint(ctx: &mut Ctx, opts: CheckpointOpts) -> Result<(Checkpoint, String, RunDir)> {
    let run_dir = ctx.layers.get::<PathBuf>("run_dir", opts.run_dir)?;
    let path = match (ctx.layers.get::<PathBuf>("checkpoint", opts.checkpoint)?, &run_dir) {
        (Some(p), _) => p,
        (None, Some(r)) => RunDir::new(r).checkpoint(),
        (None, None) => return Err(Error::Usage("missing --checkpoint or --run-dir".into())),
    };
    let run = match run_dir {
        Some(r) => RunDir::new(r),
        // a bare checkpoint file sits in `<run>/checkpoint/`
        None => RunDir::new(
            path.parent()
                .and_then(Path::parent)
                .unwrap_or(Path::new("."))
                .to_path_buf(),
        ),
    };
    let (ckpt, hash) = load_checkpoint(&path)?;
    ctx.inputs.push(InputHash {
        path: path.display().to_string(),
        sha256: hash.clone(),
    });
    Ok((ckpt, hash, run))
}

/// Report, per-item rows and bucket chart of `ckpt` on `items`.
pub fn evaluate_items(
    ckpt: &Checkpoint,
    items: &[&PreparedItem],
    split: &str,
    hash: &str,
    min_category_count: usize,
) -> Result<(EvalReport, ItemRows)> {
    let cache = cache_for(&ckpt.model, items)?;
    let mut nutrients = Vec::new();
    let mut rows = Vec::new();
    for spec in &ckpt.binning {
        let scored = pipeline::score(&ckpt.model, spec, items, cache.as_ref())?;
        rows.push((spec.nutrient.clone(), item_errors(spec, &scored)?));
        nutrients.push(nutricast_core::evaluation::evaluate_nutrient(spec, &scored, min_category_count)?);
    }
    Ok((
        EvalReport {
            split: split.to_string(),
            checkpoint_hash: hash.to_string(),
            nutrients,
        },
        rows,
    ))
}

fn load_prepared(ckpt: &Checkpoint, manifest: &Path) -> Result<(Dataset, Vec<PreparedItem>)> {
    let data = load_dataset(manifest, ckpt.preprocessing.resolution)?;
    let prepared = data.prepare(&ckpt.vocabulary, ckpt.model.config.context_length, &ckpt.preprocessing)?;
    Ok((data, prepared))
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> Result<Outcome> {
    let (ckpt, hash, run) = resolve_checkpoint(ctx, a.ckpt)?;
    let manifest: PathBuf = ctx.layers.need("manifest", a.manifest)?;
    let split = ctx.layers.or("split", a.split, SplitArg::Test)?;
    let min_count = ctx.layers.or("min_category_count", a.min_category_count, 10usize)?;
    let (data, prepared) = load_prepared(&ckpt, &manifest)?;
    ctx.hash_dataset(&manifest, &data.items)?;
    let items: Vec<&PreparedItem> = match (split, &ckpt.split) {
        (SplitArg::All, _) => prepared.iter().collect(),
        (_, None) => {
            return Err(Error::Usage(format!(
                "checkpoint records no split; only --split all is available, not `{}`",
                split.name()
            )))
        }
        (SplitArg::Train, Some(s)) => pipeline::select(&prepared, &s.train)?,
        (SplitArg::Test, Some(s)) => pipeline::select(&prepared, &s.test)?,
    };
    let (report, rows) = evaluate_items(&ckpt, &items, split.name(), &hash, min_count)?;
    let dir = run.reports();
    let json_path = dir.join(format!("eval-{}.json", split.name()));
    let csv_path = dir.join(format!("items-{}.csv", split.name()));
    let svg_path = dir.join(format!("buckets-{}.svg", split.name()));
    write_json(&json_path, &report)?;
    write(&csv_path, item_csv(&rows)?)?;
    write(&svg_path, bucket_svg(&report))?;
    let summary = json!({
        "split": split.name(),
        "items": items.len(),
        "macro_auc": report.nutrients.iter().map(|n| (n.nutrient.clone(), json!(n.metrics.macro_auc))).collect::<Map<_, _>>(),
    });
    let mut outputs = vec![json_path, csv_path, svg_path];
    outputs.push(ctx.record(&run.root, "eval", &outputs)?);
    Ok(Outcome {
        command: "eval",
        outputs,
        summary,
    })
}

/// Image and/or ingredient text of the interpretability target.
struct Subject {
    label: String,
    image: Option<nutricast_core::encoders::RgbImage>,
    text: Option<String>,
}

fn subject(ctx: &mut Ctx, ckpt: &Checkpoint, t: &mut TargetOpts, text: Option<String>) -> Result<Subject> {
    let item = ctx.layers.get::<String>("item", t.item.take())?;
    let image = ctx.layers.get::<PathBuf>("image", t.image.take())?;
    let text = ctx.layers.get::<String>("text", text)?;
    let res = ckpt.preprocessing.resolution;
    if let Some(id) = item {
        let manifest: PathBuf = ctx.layers.need("manifest", t.manifest.take())?;
        let items = load_manifest(&manifest)?;
        ctx.hash_input(&manifest)?;
        let it = items
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Usage(format!("item `{id}` is not in {}", manifest.display())))?;
        let img_path = image_path(&manifest, it);
        ctx.hash_input(&img_path)?;
        return Ok(Subject {
            label: id,
            image: Some(load_image(&img_path, res)?),
            text: Some(text.unwrap_or_else(|| it.ingredients.clone())),
        });
    }
    let label = image
        .as_deref()
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "text".to_string());
    let image = match image {
        Some(p) => {
            ctx.hash_input(&p)?;
            Some(load_image(&p, res)?)
        }
        None => None,
    };
    if image.is_none() && text.is_none() {
        return Err(Error::Usage("give --item, --image or --text".into()));
    }
    Ok(Subject { label, image, text })
}

fn subject_input(ckpt: &Checkpoint, s: &Subject) -> Result<ItemInput> {
    let image = s
        .image
        .as_ref()
        .map(|img| preprocess(img, &ckpt.preprocessing))
        .transpose()?;
    let tokens = s
        .text
        .as_deref()
        .map(|t| nutricast_core::encoders::tokenize(t, &ckpt.vocabulary, ckpt.model.config.context_length))
        .transpose()?;
    Ok(ItemInput { image, tokens })
}

fn target(ctx: &mut Ctx, ckpt: &Checkpoint, t: &TargetOpts, input: &ItemInput) -> Result<(String, usize)> {
    let default = ckpt.model.heads.first().map(|h| h.nutrient.clone());
    let nutrient: String = match ctx.layers.get("nutrient", t.nutrient.clone())? {
        Some(n) => n,
        None => default.ok_or_else(|| Error::Usage("checkpoint has no heads".into()))?,
    };
    let class = match ctx.layers.get("class", t.class)? {
        Some(c) => c,
        None => ckpt.model.predict(&nutrient, input)?.class,
    };
    Ok((nutrient, class))
}

fn cmd_gradcam(ctx: &mut Ctx, mut a: GradcamArgs) -> Result<Outcome> {
    let (ckpt, _, run) = resolve_checkpoint(ctx, a.ckpt)?;
    let alpha = ctx.layers.or("alpha", a.alpha, 0.6)?;
    let s = subject(ctx, &ckpt, &mut a.target, a.text.take())?;
    let img = s
        .image
        .as_ref()
        .ok_or_else(|| Error::Usage("gradcam needs --item or --image".into()))?;
    let input = subject_input(&ckpt, &s)?;
    let (nutrient, class) = target(ctx, &ckpt, &a.target, &input)?;
    let heatmap = gradcam(&ckpt.model, &input, &nutrient, class)?;
    let stem = format!("gradcam-{}-{}-c{}", s.label, nutrient, class);
    let png = run.overlays().join(format!("{stem}.png"));
    let js = run.overlays().join(format!("{stem}.json"));
    save_png(&png, &render_overlay(img, &heatmap, alpha)?)?;
    write_json(&js, &heatmap)?;
    let summary = json!({"nutrient": nutrient, "class": class, "argmax_patch": heatmap.argmax()});
    let mut outputs = vec![png, js];
    outputs.push(ctx.record(&run.root, "gradcam", &outputs)?);
    Ok(Outcome {
        command: "gradcam",
        outputs,
        summary,
    })
}

fn cmd_saliency(ctx: &mut Ctx, mut a: SaliencyArgs) -> Result<Outcome> {
    let (ckpt, _, run) = resolve_checkpoint(ctx, a.ckpt)?;
    let method = match ctx.layers.or("method", a.method, MethodArg::GradientInput)? {
        MethodArg::GradientInput => SaliencyMethod::GradientInput,
        MethodArg::Attention => SaliencyMethod::Attention,
    };
    let s = subject(ctx, &ckpt, &mut a.target, a.text.take())?;
    let text = s
        .text
        .clone()
        .ok_or_else(|| Error::Usage("saliency needs --item or --text".into()))?;
    let input = subject_input(&ckpt, &s)?;
    let (nutrient, class) = target(ctx, &ckpt, &a.target, &input)?;
    let sal = text_saliency(
        &ckpt.model,
        &ckpt.vocabulary,
        &text,
        input.image.as_ref(),
        &nutrient,
        class,
        method,
    )?;
    let stem = format!("saliency-{}-{}-c{}", s.label, nutrient, class);
    let html = run.overlays().join(format!("{stem}.html"));
    let js = run.overlays().join(format!("{stem}.json"));
    write(&html, render_saliency_html(&sal))?;
    write_json(&js, &sal)?;
    let top = sal.argmax().map(|i| sal.tokens[i].token.clone());
    let summary = json!({"nutrient": nutrient, "class": class, "top_token": top, "warning": sal.warning});
    let mut outputs = vec![html, js];
    outputs.push(ctx.record(&run.root, "saliency", &outputs)?);
    Ok(Outcome {
        command: "saliency",
        outputs,
        summary,
    })
}

fn cmd_validate(ctx: &mut Ctx, a: ValidateArgs) -> Result<Outcome> {
    let (ckpt, _, run) = resolve_checkpoint(ctx, a.ckpt)?;
    let manifest: PathBuf = ctx.layers.need("manifest", a.manifest)?;
    let chem_path: PathBuf = ctx.layers.need("chem", a.chem)?;
    let include_fat = ctx.layers.or("include_fat", a.include_fat.then_some(true), false)?;
    let chem = load_chem_csv(&chem_path)?;
    ctx.hash_input(&chem_path)?;
    let (data, prepared) = load_prepared(&ckpt, &manifest)?;
    ctx.hash_dataset(&manifest, &data.items)?;
    let wanted: std::collections::BTreeSet<&str> = chem.iter().map(|c| c.id.as_str()).collect();
    let items: Vec<&PreparedItem> = prepared.iter().filter(|p| wanted.contains(p.id.as_str())).collect();
    let mut database = Vec::new();
    let mut model = Vec::new();
    for spec in &ckpt.binning {
        for it in &items {
            if let Some(&v) = it.values.get(&spec.nutrient) {
                database.push(SourceValue {
                    id: it.id.clone(),
                    nutrient: spec.nutrient.clone(),
                    value: v,
                });
            }
        }
        let preds: Vec<(String, usize)> = items
            .par_iter()
            .map(|it| Ok((it.id.clone(), ckpt.model.predict(&spec.nutrient, &it.input)?.class)))
            .collect::<Result<_>>()?;
        for (id, class) in preds {
            model.push(SourceValue {
                id,
                nutrient: spec.nutrient.clone(),
                value: spec.value_of(class)?,
            });
        }
    }
    let report = three_source_report(&database, &model, &chem, include_fat)?;
    let mut outputs = write_three_source(&run.reports(), "three-source", &report)?;
    let summary = json!({
        "rows": report.rows.len(),
        "fraction_under_10": report.fraction_under_10,
        "unmatched": report.unmatched,
        "excluded_nutrients": report.excluded_nutrients,
    });
    outputs.push(ctx.record(&run.root, "validate", &outputs)?);
    Ok(Outcome {
        command: "validate",
        outputs,
        summary,
    })
}

fn cmd_report(ctx: &mut Ctx, a: ReportArgs) -> Result<Outcome> {
    let run = RunDir::new(ctx.layers.need::<PathBuf>("run_dir", a.run_dir)?);
    let dir = run.reports();
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut summary = Map::new();
    let mut md = String::from("# Run summary\n");
    if let Some(name) = names.iter().find(|n| *n == "train.json") {
        let train: Value = read_json(&dir.join(name))?;
        md.push_str(&format!(
            "\nTraining: variant {}, {} epochs, final loss {}\n",
            train["variant"].as_str().unwrap_or("?"),
            train["epochs_run"],
            train["final_loss"]
        ));
        summary.insert("train".into(), train);
    }
    let mut evals = Map::new();
    for name in names.iter().filter(|n| n.starts_with("eval-") && n.ends_with(".json")) {
        let report: EvalReport = read_json(&dir.join(name))?;
        md.push_str(&format!(
            "\n## Evaluation ({} split)\n\n| nutrient | items | macro AUC | weighted AUC | <10% | <30% | >=30% | undefined | tolerance pass |\n|---|---|---|---|---|---|---|---|---|\n",
            report.split
        ));
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        for n in &report.nutrients {
            let b = &n.metrics.error_buckets;
            md.push_str(&format!(
                "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |\n",
                n.nutrient,
                n.metrics.n_items,
                fmt(n.metrics.macro_auc),
                fmt(n.metrics.weighted_auc),
                b.under_10,
                b.under_30,
                b.over_30,
                b.undefined,
                fmt(n.metrics.tolerance_pass_rate)
            ));
        }
        evals.insert(
            report.split.clone(),
            report
                .nutrients
                .iter()
                .map(|n| {
                    (
                        n.nutrient.clone(),
                        json!({
                            "macro_auc": n.metrics.macro_auc,
                            "weighted_auc": n.metrics.weighted_auc,
                            "error_buckets": n.metrics.error_buckets,
                            "tolerance_pass_rate": n.metrics.tolerance_pass_rate,
                        }),
                    )
                })
                .collect::<Map<_, _>>()
                .into(),
        );
    }
    summary.insert("eval".into(), evals.into());
    if names.iter().any(|n| n == "three-source.json") {
        let tsr: nutricast_core::chem::ThreeSourceReport = read_json(&dir.join("three-source.json"))?;
        md.push_str(&format!(
            "\nChemistry agreement: {:.1}% of {} rows under 10% relative error\n",
            100.0 * tsr.fraction_under_10,
            tsr.rows.len()
        ));
        summary.insert(
            "three_source".into(),
            json!({"rows": tsr.rows.len(), "fraction_under_10": tsr.fraction_under_10}),
        );
    }
    if summary.len() == 1 && evals_empty(&summary) {
        return Err(Error::Usage(format!("no reports found in {}", dir.display())));
    }
    let json_path = dir.join("summary.json");
    let md_path = dir.join("summary.md");
    write_json(&json_path, &summary)?;
    write(&md_path, md)?;
    let mut outputs = vec![json_path, md_path];
    outputs.push(ctx.record(&run.root, "report", &outputs)?);
    Ok(Outcome {
        command: "report",
        outputs,
        summary: summary.into(),
    })
}

fn evals_empty(summary: &Map<String, Value>) -> bool {
    summary["eval"].as_object().is_some_and(|m| m.is_empty())
}
