//! `inkrestore`: one entry point for segmentation, dataset building, synthetic
//! ink, training, restoration, evaluation and the blind test.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inkrestore::blindtest::wire::CreateSession;
use inkrestore::blindtest::Judgment;
use inkrestore::config::PipelineConfig;
use inkrestore::dataset::{self, DatasetManifest};
use inkrestore::evaluation::classifier::{self, Classifier, ScoredPatch};
use inkrestore::evaluation::gradient::gradient_correlation_with;
use inkrestore::evaluation::nuclei::nuclei_delta;
use inkrestore::evaluation::report::{self, CorrEntry, Identifiers, NucleiEntry, ReportInputs};
use inkrestore::ink::{self, InkThresholds, OverrideMode};
use inkrestore::mask::MarkerMask;
use inkrestore::model::ModelBundle;
use inkrestore::raster::{load_raster, save_raster, RasterImage};
use inkrestore::restore::{self, IdentityGenerator, NetworkGenerator, TileGenerator};
use inkrestore::synth::{self, CategoryMix};
use inkrestore::training::{self, Pools};
use inkrestore::types::InkCategory;
use inkrestore_client::Client;

#[derive(Parser)]
#[command(name = "inkrestore", version, about = "Marker-ink removal for H&E slides")]
struct Cli {
    /// Pipeline configuration (TOML); flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Prints the effective configuration as TOML and exits.
    #[arg(long)]
    config_dump: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Detects marker ink on a slide and writes a downsampled mask.
    SegmentInk(SegmentInk),
    /// Samples a balanced patch manifest from masked slides.
    BuildDataset(BuildDataset),
    /// Writes the patches of a manifest as PNG files.
    Materialize(Materialize),
    /// Generates paired clean/inked/mask patches with synthetic strokes.
    SynthCorpus(SynthCorpus),
    /// Trains the ink-removal model on unpaired marker and clean patches.
    Train(Train),
    /// Removes ink from a slide with a trained model.
    Restore(Restore),
    /// Trains the marker-vs-clean patch classifier used for the fooling rate.
    TrainClassifier(TrainClassifier),
    /// Computes fooling rate, gradient correlation and nuclei deltas.
    Evaluate(Evaluate),
    /// Human blind test: service and client commands.
    #[command(subcommand)]
    Blindtest(Blindtest),
}

#[derive(Args)]
struct SegmentInk {
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    downsample: Option<u32>,
    /// TOML file with ink thresholds; replaces the `[ink.thresholds]` section.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Hand-corrected mask merged into the automatic one.
    #[arg(long)]
    r#override: Option<PathBuf>,
    #[arg(long, default_value = "union", requires = "override")]
    mode: OverrideMode,
    /// Slide id recorded in the mask (default: file stem).
    #[arg(long)]
    slide_id: Option<String>,
}

#[derive(Args)]
struct BuildDataset {
    /// Directory with `slides.csv` and `<slide_id>.png`.
    #[arg(long)]
    slides: PathBuf,
    /// Directory with `<slide_id>.mask.png`.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct Materialize {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory with `<slide_id>.png`.
    #[arg(long)]
    slides: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthCorpus {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "black=1,green=1,blue=1,opaque=1")]
    mix: CategoryMix,
    /// Clean patches to ink (default: procedural tissue).
    #[arg(long)]
    clean_src: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    patch: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    marker: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continues from a training-state checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Adds the marker-domain discriminator and the reverse cycle.
    #[arg(long)]
    full_cyclegan: bool,
    /// Single-threaded, bit-reproducible kernels.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct Restore {
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, required_unless_present = "identity_test")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Replaces the network with the identity to check the stitching.
    #[arg(long)]
    identity_test: bool,
}

#[derive(Args)]
struct TrainClassifier {
    #[arg(long)]
    marker: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Evaluate {
    /// Restored patches scored by the classifier.
    #[arg(long, requires = "checkpoint")]
    corrected: Option<PathBuf>,
    /// Clean patches; the classifier's accuracy on them is logged as a sanity check.
    #[arg(long, requires = "checkpoint")]
    clean: Option<PathBuf>,
    /// Classifier checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// CSV `id,input,output[,category]`; paths relative to the CSV.
    #[arg(long)]
    grad_corr: Option<PathBuf>,
    /// Before and after rasters of one slide.
    #[arg(long, num_args = 2, value_names = ["BEFORE", "AFTER"])]
    nuclei: Option<Vec<PathBuf>>,
    /// CSV `file,category` assigning categories to corrected patches.
    #[arg(long)]
    categories: Option<PathBuf>,
    /// Model checkpoint recorded in the report identifiers.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Blindtest {
    /// Serves the blind-test HTTP API (and the UI, if built).
    Serve(Serve),
    /// Creates a session on a running service.
    Create(Create),
    /// Records one judgment.
    Answer(AnswerCmd),
    /// Fetches a session's confusion report.
    Report(ReportCmd),
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    corrected: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Static UI build served at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct ServerArg {
    /// Base URL of the service.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
}

#[derive(Args)]
struct Create {
    #[command(flatten)]
    server: ServerArg,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
}

#[derive(Args)]
struct AnswerCmd {
    #[command(flatten)]
    server: ServerArg,
    #[arg(long)]
    item: String,
    /// `original_clean` or `corrected`.
    #[arg(long, value_parser = parse_judgment)]
    answer: Judgment,
}

#[derive(Args)]
struct ReportCmd {
    #[command(flatten)]
    server: ServerArg,
    #[arg(long)]
    session: String,
    #[arg(long)]
    partial: bool,
    /// Also writes the report into an evaluation report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_judgment(s: &str) -> std::result::Result<Judgment, String> {
    match s {
        "original_clean" | "clean" => Ok(Judgment::OriginalClean),
        "corrected" => Ok(Judgment::Corrected),
        other => Err(format!("`{other}` is neither `original_clean` nor `corrected`")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolve()?)
}

fn file_stem(p: &Path) -> String {
    let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn segment(cfg: &PipelineConfig, a: &SegmentInk) -> Result<()> {
    let thresholds = match &a.thresholds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let t: InkThresholds = toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", p.display()))?;
            t.validate()?;
            t
        }
        None => cfg.ink.thresholds.clone(),
    };
    let slide = load_raster(&a.slide)?;
    let id = a.slide_id.clone().unwrap_or_else(|| file_stem(&a.slide));
    let d = a.downsample.unwrap_or(cfg.ink.downsample);
    let mut mask = ink::segment_ink(&id, &slide, &thresholds, d)?;
    if let Some(o) = &a.r#override {
        mask = ink::apply_mask_override(&mask, &MarkerMask::load(o)?, a.mode)?;
    }
    mask.save(&a.out)?;
    tracing::info!(slide = %id, ink_pixels = mask.ink_count(), "mask written");
    Ok(())
}

fn build_dataset(cfg: &PipelineConfig, a: &BuildDataset) -> Result<()> {
    let mut sampler = cfg.sampler.clone();
    if let Some(t) = a.total {
        sampler.total_patches = t;
    }
    if let Some(p) = a.patch {
        sampler.patch_size = p;
    }
    sampler.validate()?;
    tracing::info!(seed = sampler.seed, "sampling seed");
    let slides = dataset::load_slide_set(&a.slides, &a.masks, cfg.ink.downsample)?;
    let manifest = dataset::build_manifest(&slides, &sampler)?;
    manifest.write(&a.out)?;
    let c = manifest.counts();
    tracing::info!(records = manifest.records.len(), counts = ?c, "manifest written");
    Ok(())
}

fn materialize(a: &Materialize) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let mut slides = BTreeMap::new();
    for r in &manifest.records {
        if !slides.contains_key(&r.slide_id) {
            let img = load_raster(&a.slides.join(format!("{}.png", r.slide_id)))?;
            slides.insert(r.slide_id.clone(), img);
        }
    }
    let written = dataset::materialize(&manifest, &slides, &a.out)?;
    tracing::info!(patches = written.len(), "patches written");
    Ok(())
}

fn synth_corpus(cfg: &PipelineConfig, a: &SynthCorpus) -> Result<()> {
    let sources = a.clean_src.as_deref().map(training::load_patch_dir).transpose()?;
    tracing::info!(seed = cfg.seed, "synthesis seed");
    let records = synth::generate_paired_corpus(sources.as_deref(), a.n, a.patch, &a.mix, cfg.seed, &a.out)?;
    tracing::info!(triplets = records.len(), "corpus written");
    Ok(())
}

fn train(cfg: &PipelineConfig, a: &Train) -> Result<()> {
    let mut spec = cfg.model.clone();
    spec.full_cyclegan |= a.full_cyclegan;
    let mut tc = cfg.training.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    tc.max_steps = a.max_steps.or(tc.max_steps);
    tc.serial |= a.serial;
    spec.validate()?;
    tc.validate()?;
    let pools = Pools {
        marker: training::load_patch_dir(&a.marker)?,
        clean: training::load_patch_dir(&a.clean)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = match &a.resume {
        Some(state) => training::resume(state, &spec, &tc, &pools, Some(&a.out))?,
        None => training::train(&spec, &tc, &pools, Some(&a.out))?,
    };
    tracing::info!(steps = outcome.log.len(), out = %a.out.display(), "training finished");
    Ok(())
}

fn restore_cmd(cfg: &PipelineConfig, a: &Restore) -> Result<()> {
    let mut rc = cfg.restore.clone();
    rc.tile = a.tile.unwrap_or(rc.tile);
    rc.stride = a.stride.unwrap_or(rc.stride);
    rc.batch = a.batch.unwrap_or(rc.batch);
    rc.validate()?;
    let slide = load_raster(&a.slide)?;
    let mask = MarkerMask::load(&a.mask)?;
    let plan = restore::plan_tiles(slide.width(), slide.height(), &mask, rc.tile, rc.stride)?;
    let bundle;
    let generator: &dyn TileGenerator = match (&a.checkpoint, a.identity_test) {
        (_, true) => &IdentityGenerator,
        (Some(c), false) => {
            bundle = ModelBundle::load(c)?;
            &NetworkGenerator(&bundle)
        }
        (None, false) => bail!("--checkpoint is required"),
    };
    let out = restore::restore_batchwise(&slide, &mask, generator, &plan, rc.batch)?;
    save_raster(&out, &a.out)?;
    tracing::info!(ink_tiles = plan.ink_tiles().count(), out = %a.out.display(), "slide restored");
    Ok(())
}

fn train_classifier_cmd(cfg: &PipelineConfig, a: &TrainClassifier) -> Result<()> {
    let mut cc = cfg.evaluation.classifier.clone();
    cc.depth = a.depth.unwrap_or(cc.depth);
    cc.epochs = a.epochs.unwrap_or(cc.epochs);
    tracing::info!(seed = cc.seed, "classifier seed");
    let marker = training::load_patch_dir(&a.marker)?;
    let clean = training::load_patch_dir(&a.clean)?;
    let t = classifier::train_classifier(&marker, &clean, &cc)?;
    t.classifier.save(&a.out)?;
    tracing::info!(holdout_accuracy = ?t.holdout_accuracy, holdout = t.holdout_size, "classifier written");
    Ok(())
}

/// Reads every PNG in `dir` with its file name, sorted by name.
fn named_patches(dir: &Path) -> Result<Vec<(String, RasterImage)>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| Ok((n.clone(), load_raster(&dir.join(&n))?)))
        .collect()
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    rdr.records()
        .map(|r| {
            let r = r.with_context(|| format!("parsing {}", path.display()))?;
            Ok(r.iter().map(|s| s.trim().to_string()).collect())
        })
        .collect()
}

fn parse_category(s: Option<&String>) -> Result<Option<InkCategory>> {
    Ok(match s.map(|s| s.as_str()) {
        None | Some("") => None,
        Some(c) => Some(c.parse()?),
    })
}

fn evaluate(cfg: &PipelineConfig, a: &Evaluate) -> Result<()> {
    let mut inputs = ReportInputs {
        identifiers: Identifiers {
            model_checkpoint: a.model.as_ref().map(|p| p.display().to_string()),
            classifier_checkpoint: a.checkpoint.as_ref().map(|p| p.display().to_string()),
            seed: Some(cfg.seed),
            config: Some(serde_json::to_value(cfg)?),
        },
        ..Default::default()
    };
    if let Some(ckpt) = &a.checkpoint {
        let cls = Classifier::load(ckpt)?;
        let Some(dir) = &a.corrected else {
            bail!("--checkpoint needs --corrected");
        };
        let cats: BTreeMap<String, Option<InkCategory>> = match &a.categories {
            Some(p) => read_csv_rows(p)?
                .iter()
                .map(|r| Ok((r[0].clone(), parse_category(r.get(1))?)))
                .collect::<Result<_>>()?,
            None => BTreeMap::new(),
        };
        let patches: Vec<ScoredPatch> = named_patches(dir)?
            .into_iter()
            .map(|(id, image)| ScoredPatch {
                category: cats.get(&id).copied().flatten(),
                id,
                image,
            })
            .collect();
        let f = classifier::fooling_rate(&cls, &patches)?;
        tracing::info!(rate = f.rate(), patches = patches.len(), "fooling rate");
        if let Some(clean) = &a.clean {
            let imgs: Vec<RasterImage> = named_patches(clean)?.into_iter().map(|(_, i)| i).collect();
            let p = inkrestore::evaluation::classifier::PatchClassifier::marker_probability(&cls, &imgs)?;
            let ok = p.iter().filter(|&&p| p < 0.5).count();
            tracing::info!(correct = ok, total = p.len(), "classifier on clean reference patches");
        }
        inputs.fooling_log = Some(f.log);
    }
    if let Some(csv) = &a.grad_corr {
        let base = csv.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for r in read_csv_rows(csv)? {
            if r.len() < 3 {
                bail!("{}: rows need id,input,output[,category]", csv.display());
            }
            let x = load_raster(&base.join(&r[1]))?;
            let y = load_raster(&base.join(&r[2]))?;
            let corr = match gradient_correlation_with(&x, &y, cfg.evaluation.gradient_mode) {
                Ok(v) => Some(v),
                Err(inkrestore::Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e.into()),
            };
            entries.push(CorrEntry {
                id: r[0].clone(),
                category: parse_category(r.get(3))?,
                r: corr,
            });
        }
        inputs.grad_corr = Some(entries);
    }
    if let Some(pair) = &a.nuclei {
        let d = nuclei_delta(&load_raster(&pair[0])?, &load_raster(&pair[1])?, &cfg.evaluation.nuclei)?;
        inputs.nuclei = Some(vec![NucleiEntry {
            slide_id: file_stem(&pair[0]),
            before: d.before,
            after: d.after,
            revived: d.revived,
        }]);
    }
    let report = report::assemble_report(inputs)?;
    report.write(&a.report)?;
    tracing::info!(report = %a.report.display(), "evaluation report written");
    Ok(())
}

fn client_for(s: &ServerArg, cfg: &PipelineConfig) -> Client {
    Client::new(s.server.trim_end_matches('/')).with_token(std::env::var(&cfg.blindtest.token_env).ok())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// `seed` is set only when the user chose one; otherwise the service derives it.
fn blindtest(cfg: &PipelineConfig, seed: Option<u64>, cmd: &Blindtest) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    match cmd {
        Blindtest::Serve(a) => {
            let serve_cfg = inkrestore_service::ServeConfig {
                clean_dir: a.clean.clone(),
                corrected_dir: a.corrected.clone(),
                data_dir: a.data.clone(),
                ui_dir: a.ui.clone(),
                token: std::env::var(&cfg.blindtest.token_env).ok().filter(|t| !t.is_empty()),
                default_items: cfg.blindtest.items,
                default_patch: cfg.blindtest.patch_size,
            };
            let port = a.port.unwrap_or(cfg.blindtest.port);
            let addr: SocketAddr = format!("{}:{port}", a.host)
                .parse()
                .with_context(|| format!("bad listen address {}:{port}", a.host))?;
            rt.block_on(inkrestore_service::serve(serve_cfg, addr, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
        }
        Blindtest::Create(a) => {
            let req = CreateSession {
                n: Some(a.n.unwrap_or(cfg.blindtest.items)),
                patch_size: Some(a.patch_size.unwrap_or(cfg.blindtest.patch_size)),
                seed,
            };
            print_json(&rt.block_on(client_for(&a.server, cfg).create_session(&req))?)?;
        }
        Blindtest::Answer(a) => {
            print_json(&rt.block_on(client_for(&a.server, cfg).answer(&a.item, a.answer))?)?;
        }
        Blindtest::Report(a) => {
            let r = rt.block_on(client_for(&a.server, cfg).report(&a.session, a.partial))?;
            if let Some(out) = &a.out {
                let report = report::assemble_report(ReportInputs {
                    blindtest: Some(r.clone()),
                    ..Default::default()
                })?;
                report.write(out)?;
            }
            print_json(&r)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if cli.config_dump {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    tracing::info!(seed = cfg.seed, "resolved seed");
    let Some(cmd) = &cli.command else {
        bail!("no subcommand given; see --help");
    };
    match cmd {
        Command::SegmentInk(a) => segment(&cfg, a),
        Command::BuildDataset(a) => build_dataset(&cfg, a),
        Command::Materialize(a) => materialize(a),
        Command::SynthCorpus(a) => synth_corpus(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Restore(a) => restore_cmd(&cfg, a),
        Command::TrainClassifier(a) => train_classifier_cmd(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Blindtest(b) => {
            let seed = cli.seed.or(cli.config.is_some().then_some(cfg.seed));
            blindtest(&cfg, seed, b)
        }
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.command.is_none() && !cli.config_dump {
        eprintln!("inkrestore: a subcommand is required; see --help");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("inkrestore: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
