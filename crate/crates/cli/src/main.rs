use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pixn2n_core::checkpoint::{list_checkpoints, read_checkpoint, ModelBundle};
use pixn2n_core::config::{config_hash, RunConfig};
use pixn2n_core::dataset::manifest::{load_samples, read_manifest, save_gray16};
use pixn2n_core::dataset::store::{read_store, write_store, PatchStore};
use pixn2n_core::dataset::{prepare_dataset, PatchRecord, Plane, PrepareConfig, Split};
use pixn2n_core::evaluation::{
    run_missing_multi_matrix, run_missing_one_matrix, MultiMissingOptions, Provenance, SsimParams,
};
use pixn2n_core::gating::{gate_tensor, GateVector};
use pixn2n_core::phantom::{write_phantom, PhantomSpec};
use pixn2n_core::training::{init_bundle, select_best_checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "pixn2n", version, about = "Missing-channel synthesis for multiplexed image stacks")]
struct Cli {
    /// Worker threads for internal parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Single worker; reruns with the same seed reproduce every artifact.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Base directory for relative input paths.
    #[arg(long, global = true, env = "PIXN2N_DATA_ROOT")]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    Phantom(PhantomArgs),
    /// Normalize, tile, filter and split raw images into a patch store.
    Prepare(PrepareArgs),
    /// Train a model on a patch store.
    Train(TrainArgs),
    /// Synthesize the missing channels of every patch for one gate.
    Synth(SynthArgs),
    /// Score a checkpoint with SSIM over missing-channel scenarios.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON or TOML phantom spec; the flags below are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 0.03)]
    texture: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Line-delimited manifest of `{sample_id, marker, path}` records.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key overrides, e.g. `patch_size=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop once this epoch is completed; the run can be continued with `--resume`.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn select(self, store: &PatchStore) -> Vec<PatchRecord> {
        match self {
            SplitArg::Train => store.split(Split::Train),
            SplitArg::Val => store.split(Split::Val),
            SplitArg::Test => store.split(Split::Test),
            SplitArg::All => store.patches.clone(),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Checkpoint file, or a run directory (best validation checkpoint is used).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// '1' = available, '0' = missing, leftmost = first marker.
    #[arg(long)]
    gate: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also evaluate gates with exactly these missing counts, e.g. `2,3`.
    #[arg(long, value_delimiter = ',')]
    missing: Vec<usize>,
    /// Seed for sampling multi-missing gates when there are too many to enumerate.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate one gate only instead of the scenario matrices.
    #[arg(long)]
    gate: Option<String>,
}

fn resolve(root: &Option<PathBuf>, path: &Path) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

/// File config (if any) with `--set` overrides applied; values parse as JSON, else as strings.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::empty(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| pixn2n_core::Error::Invalid(format!("override {o:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        cfg.set(key.trim(), value);
    }
    Ok(cfg)
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = match &a.config {
        Some(p) => RunConfig::from_file(p)?.parse::<PhantomSpec>()?,
        None => PhantomSpec::standard(a.channels, a.size, a.samples, a.seed).with_texture(a.texture),
    };
    fs::create_dir_all(&a.out)?;
    let manifest = write_phantom(&spec, &a.out)?;
    fs::write(a.out.join("phantom.json"), serde_json::to_vec_pretty(&spec)?)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_prepare(a: &PrepareArgs, root: &Option<PathBuf>) -> Result<()> {
    let manifest = resolve(root, &a.manifest);
    let entries = read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    if entries.is_empty() {
        bail!(pixn2n_core::Error::Empty("manifest has no entries"));
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let samples = load_samples(&entries, base)?;
    let mut run = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        run.set("seed", seed);
    }
    let prepare: PrepareConfig = run.parse()?;
    let hash = config_hash(&prepare)?;
    let data = prepare_dataset(&samples, &prepare, None)?;
    let rows = write_store(&a.out, &data, &prepare, &hash)?;
    println!(
        "{} patches ({} train, {} val, {} test), {} filtered out, config {hash}",
        rows.len(),
        rows.iter().filter(|r| r.split == Split::Train).count(),
        rows.iter().filter(|r| r.split == Split::Val).count(),
        rows.iter().filter(|r| r.split == Split::Test).count(),
        data.filtered_out
    );
    Ok(())
}

/// Fill arity and stage resolutions from the store where the config leaves them open.
fn train_config(a: &TrainArgs, store: &PatchStore) -> Result<TrainConfig> {
    let mut run = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        run.set("seed", seed);
    }
    if let Some(epochs) = a.epochs {
        run.set("epochs", epochs as u64);
    }
    let n = store.registry.len() as u64;
    let p = store.meta.patch_size as u64;
    let defaults = [
        ("generator.n_channels", n),
        ("discriminator.n_channels", n),
        ("fine.resolution", p),
        ("fine.batch_size", 1),
        ("coarse.resolution", p / 2),
        ("coarse.batch_size", 4),
    ];
    for (key, v) in defaults {
        if run.get(key).is_none() {
            run.set(key, v);
        }
    }
    let cfg: TrainConfig = run.parse()?;
    if cfg.n_channels() != store.registry.len() {
        bail!(pixn2n_core::Error::Invalid(format!(
            "config is for {} channels, store has {}",
            cfg.n_channels(),
            store.registry.len()
        )));
    }
    if cfg.fine.resolution != store.meta.patch_size {
        bail!(pixn2n_core::Error::Invalid(format!(
            "fine resolution {} does not match the store's {} px patches",
            cfg.fine.resolution, store.meta.patch_size
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, root: &Option<PathBuf>) -> Result<()> {
    let store = read_store(&resolve(root, &a.store), None)?;
    let cfg = train_config(a, &store)?;
    let hash = cfg.hash()?;
    let train = store.split(Split::Train);

    let existing = if a.out.join("ckpt").is_dir() {
        list_checkpoints(&a.out)?
    } else {
        Vec::new()
    };
    let bundle = if a.resume {
        let (_, latest) = existing
            .last()
            .ok_or_else(|| pixn2n_core::Error::Invalid(format!("no checkpoint under {}", a.out.display())))?;
        read_checkpoint(latest, Some(&hash))?
    } else {
        if !existing.is_empty() || a.out.join("train_log.jsonl").exists() {
            bail!(pixn2n_core::Error::Invalid(format!(
                "{} already holds a run; pass --resume or choose another --out",
                a.out.display()
            )));
        }
        init_bundle(&cfg, store.meta.markers.clone(), Some(store.meta.stats.clone()))?
    };
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("config.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "config_hash": hash,
            "store_config_hash": store.meta.config_hash,
            "train": cfg,
        }))?,
    )?;

    let start_epoch = bundle.epoch;
    let mut trainer = Trainer::new(bundle, &train)?.with_output(&a.out);
    let outcome = trainer.run(a.stop_after)?;
    println!(
        "trained epochs {}..{} ({} iterations), {} checkpoints, config {hash}",
        start_epoch + 1,
        trainer.bundle().epoch,
        outcome.log.len(),
        outcome.checkpoints.len()
    );

    let val = store.split(Split::Val);
    if !val.is_empty() {
        let all = list_checkpoints(&a.out)?;
        let bundles = all
            .iter()
            .map(|(_, p)| read_checkpoint(p, Some(&hash)))
            .collect::<pixn2n_core::Result<Vec<_>>>()?;
        let (best, scores) = select_best_checkpoint(&bundles, &val)?;
        let summary = serde_json::json!({
            "config_hash": hash,
            "best_epoch": bundles[best].epoch,
            "best_path": all[best].1,
            "scores": all.iter().zip(&scores).map(|((e, _), s)| serde_json::json!({"epoch": e, "val_ssim": s})).collect::<Vec<_>>(),
        });
        fs::write(a.out.join("best.json"), serde_json::to_vec_pretty(&summary)?)?;
        println!("best epoch {} (val SSIM {:.4})", bundles[best].epoch, scores[best]);
    }
    Ok(())
}

/// A checkpoint file, or the best checkpoint of a run directory by validation SSIM.
fn load_model(path: &Path, store: &PatchStore) -> Result<ModelBundle> {
    let bundle = if path.is_dir() {
        let all = list_checkpoints(path)?;
        if all.is_empty() {
            bail!(pixn2n_core::Error::Invalid(format!("no checkpoints under {}", path.display())));
        }
        let bundles = all
            .iter()
            .map(|(_, p)| read_checkpoint(p, None))
            .collect::<pixn2n_core::Result<Vec<_>>>()?;
        let val = store.split(Split::Val);
        let best = if val.is_empty() {
            bundles.len() - 1
        } else {
            select_best_checkpoint(&bundles, &val)?.0
        };
        bundles.into_iter().nth(best).expect("index from the same list")
    } else {
        read_checkpoint(path, None)?
    };
    if bundle.markers != store.meta.markers {
        bail!(pixn2n_core::Error::Invalid(format!(
            "model markers {:?} differ from store markers {:?}",
            bundle.markers, store.meta.markers
        )));
    }
    Ok(bundle)
}

fn parse_gate(s: &str, n: usize) -> Result<GateVector> {
    let gate: GateVector = s.parse()?;
    gate.validate(n)?;
    Ok(gate)
}

fn cmd_synth(a: &SynthArgs, root: &Option<PathBuf>) -> Result<()> {
    let store = read_store(&resolve(root, &a.store), None)?;
    let model = load_model(&resolve(root, &a.checkpoint), &store)?;
    let gate = parse_gate(&a.gate, model.markers.len())?;
    let missing = gate.closed_channels();
    let patches = a.split.select(&store);
    if patches.is_empty() {
        bail!(pixn2n_core::Error::Empty("patches in the selected split"));
    }
    for p in &patches {
        let x = gate_tensor(&p.to_tensor(), std::slice::from_ref(&gate))?;
        let out = model.generator.forward_tensor(&x)?;
        let dir = a.out.join(&p.id);
        fs::create_dir_all(&dir)?;
        for &c in &missing {
            let plane = Plane::new(out.height(), out.width(), out.plane(0, c).to_vec())?;
            save_gray16(&dir.join(format!("{}.png", model.markers[c])), &plane)?;
        }
    }
    let meta = serde_json::json!({
        "config_hash": model.config_hash,
        "epoch": model.epoch,
        "seed": model.train_config.seed,
        "gate": gate,
        "markers": missing.iter().map(|&c| &model.markers[c]).collect::<Vec<_>>(),
        "patches": patches.iter().map(|p| &p.id).collect::<Vec<_>>(),
    });
    fs::write(a.out.join("synth.json"), serde_json::to_vec_pretty(&meta)?)?;
    println!("{} patches x {} channels written to {}", patches.len(), missing.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, root: &Option<PathBuf>) -> Result<()> {
    let store = read_store(&resolve(root, &a.store), None)?;
    let model = load_model(&resolve(root, &a.checkpoint), &store)?;
    let patches = a.split.select(&store);
    if patches.is_empty() {
        bail!(pixn2n_core::Error::Empty("patches in the selected split"));
    }
    let params = SsimParams::default();
    let provenance = Provenance {
        model: a.checkpoint.display().to_string(),
        config_hash: Some(model.config_hash.clone()),
        epoch: Some(model.epoch),
        seed: Some(model.train_config.seed),
        scenarios: None,
    };
    fs::create_dir_all(&a.out)?;
    let g = &model.generator;

    let mut reports = Vec::new();
    if let Some(s) = &a.gate {
        let gate = parse_gate(s, model.markers.len())?;
        let rows = pixn2n_core::evaluation::evaluate_scenario(g, &patches, &model.markers, &gate, &params)?;
        reports.push((
            "scenario",
            pixn2n_core::evaluation::SsimReport {
                provenance: Provenance {
                    scenarios: Some(format!("gate {gate}")),
                    ..provenance.clone()
                },
                markers: model.markers.clone(),
                gates: vec![gate],
                rows,
            },
        ));
    } else {
        let mut one = run_missing_one_matrix(g, &patches, &model.markers, &params)?;
        one.provenance = Provenance {
            scenarios: one.provenance.scenarios.take(),
            ..provenance.clone()
        };
        reports.push(("missing_one", one));
        if !a.missing.is_empty() {
            let opts = MultiMissingOptions {
                seed: a.seed,
                ..MultiMissingOptions::default()
            };
            let mut multi = run_missing_multi_matrix(g, &patches, &model.markers, &a.missing, &opts, &params)?;
            multi.provenance = Provenance {
                scenarios: multi.provenance.scenarios.take(),
                ..provenance.clone()
            };
            reports.push(("missing_multi", multi));
        }
    }
    for (name, report) in &reports {
        report.write_csv(&a.out.join(format!("{name}.csv")))?;
        report.write_summary(&a.out.join(format!("{name}_summary.json")))?;
        println!("{name}: {} rows, mean SSIM {:.4}", report.rows.len(), report.overall_mean());
        for m in report.marker_means() {
            println!("  {:<16} {:.4} (n={})", m.marker, m.mean, m.n);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = if cli.deterministic { 1 } else { cli.workers };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring worker threads")?;
    let root = &cli.data_root;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Prepare(a) => cmd_prepare(a, root),
        Command::Train(a) => cmd_train(a, root),
        Command::Synth(a) => cmd_synth(a, root),
        Command::Eval(a) => cmd_eval(a, root),
    }
}

/// 3 for a non-finite training loss, 2 for every other library error.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<pixn2n_core::Error>() {
        Some(pixn2n_core::Error::NonFiniteLoss { .. }) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
