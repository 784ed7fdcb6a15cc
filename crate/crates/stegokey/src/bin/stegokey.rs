//! Command-line entry point.
//!
//! One subcommand per workflow: `train` runs the multi-key objective and
//! writes checkpoints plus JSONL logs; `embed`/`recover`/`purify` are
//! one-shot operations on PNG files; `crossmatrix`, `probe`, and `pca`
//! run the leakage protocols; `sweep` trains a (K, alpha) grid.
//!
//! Keys are passed as decimal or `0x`-hex 64-bit strings on the command
//! line or through `STEGOKEY_KEYS` / `STEGOKEY_KEY`. They are never
//! written to any output file or log.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use stegokey::backbone::{BackboneConfig, ImagePlane, Nonlinearity};
use stegokey::data_io::{
    load_checkpoint, load_dataset, load_image, save_checkpoint, save_image, save_png_grid,
    Checkpoint, DatasetSpec, Split,
};
use stegokey::error::{Error, Result};
use stegokey::evaluation::{
    cross_key_matrix, pca_entanglement, psnr, random_key_probe, residual_image, CrossKeyMatrix,
};
use stegokey::keyed_weights::KeyRegistry;
use stegokey::training::{train, LossWeights, TrainConfig, Trainer, TrainSinks};

/// Schema version of the TOML run-config file.
const CONFIG_VERSION: u32 = 1;

/// Gain applied to residual panes in probe grids.
const RESIDUAL_GAIN: f64 = 5.0;

#[derive(Parser)]
#[command(name = "stegokey", version, about = "Keyed steganography on a shared purification backbone")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints, metrics, and eval reports.
    Train(TrainArgs),
    /// Embed a secret image into a cover image with an embed key.
    Embed(EmbedArgs),
    /// Recover a secret from a stego image with a recover key.
    Recover(RecoverArgs),
    /// Denoise an image with the untriggered network (no key).
    Purify(PurifyArgs),
    /// Full K x K recoverability matrix over a dataset.
    Crossmatrix(CrossArgs),
    /// Train and evaluate a grid over key counts and sparse ratios.
    Sweep(SweepArgs),
    /// Decode stegos with unregistered random keys and report leakage.
    Probe(ProbeArgs),
    /// Project recovery features onto two principal components.
    Pca(PcaArgs),
}

/// On-disk run configuration (TOML). Serialized snapshots never contain
/// key values: the train section's key list is skipped by construction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct RunConfig {
    config_version: u32,
    out_dir: PathBuf,
    backbone: BackboneConfig,
    train: TrainConfig,
    loss_weights: LossWeights,
    data: DataSection,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct DataSection {
    root: PathBuf,
    pairing_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            out_dir: PathBuf::from("runs/default"),
            backbone: BackboneConfig {
                base_width: 16,
                depth: 2,
                side: 64,
                nonlinearity: Nonlinearity::LeakyRelu,
                input_slots: 2,
            },
            train: TrainConfig::default(),
            loss_weights: LossWeights::default(),
            data: DataSection { root: PathBuf::from("data"), pairing_seed: 11 },
        }
    }
}

#[derive(Args)]
struct KeyListArgs {
    /// Registered key pairs as `ke:kr,ke:kr,...` (decimal or 0x-hex).
    #[arg(long, env = "STEGOKEY_KEYS", hide_env_values = true)]
    keys: Option<String>,
    /// Derive the key pairs deterministically from this seed instead of
    /// listing them. The seed is treated like a key: never persisted.
    #[arg(long, conflicts_with = "keys")]
    derive_keys: Option<String>,
}

impl KeyListArgs {
    fn registry(&self, k: usize) -> Result<KeyRegistry> {
        if let Some(spec) = &self.keys {
            let pairs = parse_key_pairs(spec)?;
            if pairs.len() < k {
                return Err(Error::Parameter(format!(
                    "{} key pair(s) supplied, {k} required",
                    pairs.len()
                )));
            }
            KeyRegistry::new(pairs[..k].to_vec())
        } else if let Some(seed) = &self.derive_keys {
            KeyRegistry::derive(parse_u64(seed)?, k)
        } else {
            Err(Error::Parameter(
                "no keys: pass --keys, --derive-keys, or set STEGOKEY_KEYS".into(),
            ))
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    keys: KeyListArgs,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root containing train/ (and optionally val/) folders.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mask_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embed key (decimal or 0x-hex).
    #[arg(long, env = "STEGOKEY_KEY", hide_env_values = true)]
    key: String,
    #[arg(long)]
    secret: PathBuf,
    #[arg(long)]
    cover: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Recover key (decimal or 0x-hex).
    #[arg(long, env = "STEGOKEY_KEY", hide_env_values = true)]
    key: String,
    #[arg(long)]
    stego: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional ground-truth secret; when given, prints PSNR against it.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct PurifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional clean reference; when given, prints PSNR against it.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct CrossArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    keys: KeyListArgs,
    /// Dataset root containing the split folder.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 11)]
    pair_seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Base TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    keys: KeyListArgs,
    /// Comma-separated key counts, e.g. `2,4`.
    #[arg(long)]
    k_list: String,
    /// Comma-separated sparse ratios, e.g. `0.5,0.9`.
    #[arg(long)]
    alpha_list: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cell step budget (overrides the config's).
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    keys: KeyListArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 10)]
    n_random: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    keys: KeyListArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 23)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn parse_u64(s: &str) -> Result<u64> {
    let t = s.trim();
    let parsed = if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16)
    } else {
        t.parse::<u64>()
    };
    parsed.map_err(|_| {
        Error::Parameter(format!(
            "invalid 64-bit key or seed {t:?} (use decimal or 0x-hex)"
        ))
    })
}

fn parse_key_pairs(spec: &str) -> Result<Vec<(u64, u64)>> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let (e, r) = pair
                .split_once(':')
                .ok_or_else(|| Error::Parameter(format!("key pair {pair:?} is not `ke:kr`")))?;
            Ok((parse_u64(e)?, parse_u64(r)?))
        })
        .collect()
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if cfg.config_version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "config_version {} unsupported (this build reads {CONFIG_VERSION})",
            cfg.config_version
        )));
    }
    Ok(cfg)
}

/// Writes the run manifest. `RunConfig` serialization drops key values by
/// construction.
fn write_run_manifest(dir: &Path, command: &str, cfg: &RunConfig, key_count: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "command": command,
        "config": cfg,
        "key_count": key_count,
        "unix_time": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest encodes"),
    )?;
    Ok(())
}

fn model_from_checkpoint(path: &Path) -> Result<(Checkpoint, stegokey::backbone::ModelState)> {
    let ck = load_checkpoint(path)?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn dataset_for(root: &Path, split: Split, side: usize, pairing_seed: u64) -> Result<Vec<ImagePlane>> {
    load_dataset(&DatasetSpec { root: root.to_path_buf(), split, side, pairing_seed })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if let Some(v) = args.data {
        cfg.data.root = v;
    }
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.k {
        cfg.train.k = v;
    }
    if let Some(v) = args.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.side {
        cfg.backbone.side = v;
    }
    if let Some(v) = args.width {
        cfg.backbone.base_width = v;
    }
    if let Some(v) = args.depth {
        cfg.backbone.depth = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.mask_seed {
        cfg.train.mask_seed = v;
    }
    if let Some(v) = args.eval_every {
        cfg.train.eval_every = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }

    let registry = args.keys.registry(cfg.train.k)?;
    cfg.train.keys = registry.iter().map(|p| (p.embed_key, p.recover_key)).collect();

    let train_data = dataset_for(
        &cfg.data.root,
        Split::Train,
        cfg.backbone.side,
        cfg.data.pairing_seed,
    )?;
    let val_data = if cfg.data.root.join(Split::Val.dir_name()).is_dir() {
        Some(dataset_for(
            &cfg.data.root,
            Split::Val,
            cfg.backbone.side,
            cfg.data.pairing_seed,
        )?)
    } else {
        None
    };

    write_run_manifest(&cfg.out_dir, "train", &cfg, cfg.train.k)?;
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut metrics =
        std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("metrics.jsonl"))?);
    let mut evals = std::io::BufWriter::new(std::fs::File::create(cfg.out_dir.join("eval.jsonl"))?);

    let mut trainer = Trainer::new(cfg.backbone.clone(), cfg.train.clone(), cfg.loss_weights)?;
    println!(
        "training: k={} alpha={} side={} width={} depth={} steps={} on {} image(s)",
        cfg.train.k,
        cfg.train.alpha,
        cfg.backbone.side,
        cfg.backbone.base_width,
        cfg.backbone.depth,
        cfg.train.steps,
        train_data.len()
    );
    let mut sinks = TrainSinks {
        metrics: Some(&mut metrics),
        checkpoint_dir: Some(&ckpt_dir),
        eval_data: val_data.as_deref(),
        eval_reports: Some(&mut evals),
    };
    let last = train(&mut trainer, &train_data, &mut sinks)?;
    if let Some(r) = last {
        println!(
            "done at step {}: emb {:.5} rec {:.5} pur {:.5} mki {:.5} total {:.5}",
            r.step + 1,
            r.loss_emb,
            r.loss_rec,
            r.loss_pur,
            r.loss_mki,
            r.total
        );
    }
    println!("checkpoint: {}", ckpt_dir.join("latest.skc").display());
    Ok(())
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let (_, model) = model_from_checkpoint(&args.checkpoint)?;
    let side = model.backbone().config().side;
    let key = parse_u64(&args.key)?;
    let secret = load_image(&args.secret, Some(side))?;
    let cover = load_image(&args.cover, Some(side))?;
    let stego = stegokey::backbone::run_with_key(&model, key, Some((&secret, &cover)), None)?;
    save_image(&args.out, &stego)?;
    println!(
        "stego written to {} (psnr vs cover: {:.2} dB)",
        args.out.display(),
        psnr(&cover, &stego)?
    );
    Ok(())
}

fn cmd_recover(args: RecoverArgs) -> Result<()> {
    let (_, model) = model_from_checkpoint(&args.checkpoint)?;
    let side = model.backbone().config().side;
    let key = parse_u64(&args.key)?;
    let stego = load_image(&args.stego, Some(side))?;
    let recovered = stegokey::backbone::run_with_key(&model, key, None, Some(&stego))?;
    save_image(&args.out, &recovered)?;
    match &args.reference {
        Some(r) => {
            let reference = load_image(r, Some(side))?;
            println!(
                "recovered written to {} (psnr vs reference: {:.2} dB)",
                args.out.display(),
                psnr(&reference, &recovered)?
            );
        }
        None => println!("recovered written to {}", args.out.display()),
    }
    Ok(())
}

fn cmd_purify(args: PurifyArgs) -> Result<()> {
    let (_, model) = model_from_checkpoint(&args.checkpoint)?;
    let side = model.backbone().config().side;
    let noisy = load_image(&args.noisy, Some(side))?;
    let purified = stegokey::backbone::purify_batch(&model, &[&noisy])?.remove(0);
    save_image(&args.out, &purified)?;
    match &args.reference {
        Some(r) => {
            let reference = load_image(r, Some(side))?;
            println!(
                "purified written to {} (psnr vs reference: {:.2} dB)",
                args.out.display(),
                psnr(&reference, &purified)?
            );
        }
        None => println!("purified written to {}", args.out.display()),
    }
    Ok(())
}

/// Report wrapper carrying the checkpoint's config snapshot.
fn report_with_provenance<T: serde::Serialize>(ck: &Checkpoint, report: &T) -> serde_json::Value {
    serde_json::json!({
        "backbone": ck.backbone,
        "train": ck.train,
        "loss_weights": ck.loss_weights,
        "step": ck.step,
        "report": report,
    })
}

fn cmd_crossmatrix(args: CrossArgs) -> Result<()> {
    let (ck, model) = model_from_checkpoint(&args.checkpoint)?;
    let registry = args.keys.registry(ck.train.k)?;
    let data = dataset_for(&args.data, args.split.into(), ck.backbone.side, args.pair_seed)?;
    let matrix = cross_key_matrix(&model, &registry, &data, args.pair_seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("crossmatrix.json"),
        serde_json::to_string_pretty(&report_with_provenance(&ck, &matrix)).expect("encodes"),
    )?;
    std::fs::write(args.out.join("crossmatrix_psnr.csv"), matrix.psnr_csv())?;
    print_matrix(&matrix);
    Ok(())
}

fn print_matrix(m: &CrossKeyMatrix) {
    print!("{}", m.psnr_csv());
    println!(
        "diagonal margin: {:.2} dB, diagonal dominant: {}",
        m.diagonal_margin_db(),
        m.diagonal_dominant()
    );
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let (ck, model) = model_from_checkpoint(&args.checkpoint)?;
    let registry = args.keys.registry(ck.train.k)?;
    let data = dataset_for(&args.data, args.split.into(), ck.backbone.side, args.seed)?;
    let report = random_key_probe(&model, &registry, &data, args.n_random, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("probe.json"),
        serde_json::to_string_pretty(&report_with_provenance(&ck, &report)).expect("encodes"),
    )?;
    // grid rows: stego | recovered | residual(recovered, secret) x5
    let mut rows = Vec::new();
    for s in &report.samples {
        rows.push(vec![
            s.stego.clone(),
            s.recovered.clone(),
            residual_image(&s.recovered, &s.secret, RESIDUAL_GAIN)?,
        ]);
    }
    if !rows.is_empty() {
        save_png_grid(&args.out.join("probe_samples.png"), &rows)?;
    }
    println!(
        "random-key probe ({} keys): vs secret {:.2} dB psnr / {:.4} ssim, vs cover {:.2} dB, max ssim vs secret {:.4}",
        report.n_random,
        report.vs_secret.psnr,
        report.vs_secret.ssim,
        report.vs_cover.psnr,
        report.max_ssim_vs_secret
    );
    Ok(())
}

fn cmd_pca(args: PcaArgs) -> Result<()> {
    let (ck, model) = model_from_checkpoint(&args.checkpoint)?;
    let registry = args.keys.registry(ck.train.k)?;
    let data = dataset_for(&args.data, args.split.into(), ck.backbone.side, args.seed)?;
    let report = pca_entanglement(&model, &registry, &data, args.samples, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("pca.json"),
        serde_json::to_string_pretty(&report_with_provenance(&ck, &report)).expect("encodes"),
    )?;
    let mut csv = String::from("encode_key,decode_key,x,y\n");
    for cond in &report.conditions {
        for p in &cond.points {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                cond.encode_key, cond.decode_key, p[0], p[1]
            ));
        }
    }
    std::fs::write(args.out.join("pca_points.csv"), csv)?;
    println!("pca separation score: {:.3}", report.separation);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = load_run_config(args.config.as_deref())?;
    let out_dir = args.out.unwrap_or_else(|| base.out_dir.join("sweep"));
    let data_root = args.data.unwrap_or_else(|| base.data.root.clone());
    let k_list: Vec<usize> = args
        .k_list
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Parameter(format!("bad k {s:?}"))))
        .collect::<Result<_>>()?;
    let alpha_list: Vec<f64> = args
        .alpha_list
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Parameter(format!("bad alpha {s:?}"))))
        .collect::<Result<_>>()?;

    let train_data =
        dataset_for(&data_root, Split::Train, base.backbone.side, base.data.pairing_seed)?;
    let test_split = if data_root.join("test").is_dir() { Split::Test } else { Split::Train };
    let test_data = dataset_for(&data_root, test_split, base.backbone.side, base.data.pairing_seed)?;

    std::fs::create_dir_all(&out_dir)?;
    let mut summary = Vec::new();
    for &k in &k_list {
        for &alpha in &alpha_list {
            let mut cfg = base.clone();
            cfg.train.k = k;
            cfg.train.alpha = alpha;
            if let Some(s) = args.steps {
                cfg.train.steps = s;
            }
            let registry = args.keys.registry(k)?;
            cfg.train.keys = registry.iter().map(|p| (p.embed_key, p.recover_key)).collect();
            cfg.out_dir = out_dir.join(format!("k{k}_alpha{alpha}"));
            write_run_manifest(&cfg.out_dir, "sweep-cell", &cfg, k)?;

            println!("== cell k={k} alpha={alpha}: {} steps", cfg.train.steps);
            let mut trainer =
                Trainer::new(cfg.backbone.clone(), cfg.train.clone(), cfg.loss_weights)?;
            let mut metrics = std::io::BufWriter::new(std::fs::File::create(
                cfg.out_dir.join("metrics.jsonl"),
            )?);
            let mut sinks = TrainSinks {
                metrics: Some(&mut metrics),
                checkpoint_dir: None,
                eval_data: None,
                eval_reports: None,
            };
            train(&mut trainer, &train_data, &mut sinks)?;
            let ck = Checkpoint::from_trainer(&trainer);
            save_checkpoint(&cfg.out_dir.join("latest.skc"), &ck)?;

            let matrix =
                cross_key_matrix(trainer.model(), &registry, &test_data, base.data.pairing_seed)?;
            std::fs::write(
                cfg.out_dir.join("crossmatrix.json"),
                serde_json::to_string_pretty(&report_with_provenance(&ck, &matrix))
                    .expect("encodes"),
            )?;
            std::fs::write(cfg.out_dir.join("crossmatrix_psnr.csv"), matrix.psnr_csv())?;
            print_matrix(&matrix);
            summary.push(serde_json::json!({
                "k": k,
                "alpha": alpha,
                "diagonal_margin_db": matrix.diagonal_margin_db(),
                "diagonal_dominant": matrix.diagonal_dominant(),
                "matrix": matrix,
            }));
        }
    }
    std::fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&summary).expect("encodes"),
    )?;
    println!("sweep summary: {}", out_dir.join("sweep.json").display());
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Embed(a) => cmd_embed(a),
        Cmd::Recover(a) => cmd_recover(a),
        Cmd::Purify(a) => cmd_purify(a),
        Cmd::Crossmatrix(a) => cmd_crossmatrix(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Pca(a) => cmd_pca(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
