//! Command-line front end for the full pipeline. Thin by design: every
//! subcommand parses flags, resolves the config (file values overridden by
//! flags, flags winning), echoes the resolved configuration, and delegates to
//! the library.
//!
//! Exit codes: 0 success, 1 check failure (e.g. a failing gradient check),
//! 2 usage or environment error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use focusseg::config::{load_config, PipelineConfig};
use focusseg::data::{gen_synthetic, load_dataset, read_ppm, write_dataset, write_pgm};
use focusseg::metrics::argmax_labels;
use focusseg::checkpoint::load_checkpoint;
use focusseg::model::count_flops;
use focusseg::sparse::{bench_branches, render_bench_toml, render_bench_tsv};
use focusseg::tensor::GradCheckOptions;
use focusseg::train::{
    ablate_dilation, default_datasets, evaluate, render_ablation_table, render_ablation_toml,
    train,
};
use focusseg::{metrics, Error, Result};

#[derive(Parser)]
#[command(
    name = "focusseg",
    about = "Region-focused segmentation: data generation, training, evaluation, benchmarking",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PPM/PGM dataset with a manifest.
    GenData(GenDataArgs),
    /// Verify model gradients against finite differences (exit 1 on failure).
    Gradcheck(GradcheckArgs),
    /// Train a model on synthetic or on-disk data.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted label maps for a dataset or a single image.
    Predict(PredictArgs),
    /// Benchmark dense vs sparse branch execution.
    Bench(BenchArgs),
    /// Train once per 7x7-branch dilation rate and tabulate mIoU.
    AblateDilation(AblateArgs),
}

#[derive(Args)]
struct ConfigFlag {
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigFlag {
    fn resolve(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(path) => load_config(path),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Scene size as HxW, e.g. 64x64.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: [usize; 2],
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigFlag,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Probed coordinates per parameter group (0 = all).
    #[arg(long, default_value_t = 16)]
    max_coords: usize,
    /// Add this offset to every analytic gradient — a negative control that
    /// must make the check fail.
    #[arg(long, default_value_t = 0.0)]
    tamper_grad: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigFlag,
    /// Train from a dataset directory (its manifest.tsv) instead of
    /// generating synthetic scenes.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Validation dataset directory; defaults to generated synthetic scenes.
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory containing manifest.tsv.
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (manifest.tsv); predictions for every listed image.
    #[arg(long, conflicts_with = "image")]
    data_dir: Option<PathBuf>,
    /// Single PPM image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigFlag,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Mask grid size as HxW, e.g. 64x64.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    spatial: [usize; 2],
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigFlag,
    /// Comma-separated dilation rates for the 7x7 branch.
    #[arg(long, default_value = "1,2,4,8,16", value_parser = parse_rates)]
    rates: Rates,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
}

#[derive(Clone)]
struct Rates(Vec<usize>);

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad extent {v:?}: {e}"));
    Ok([parse(h)?, parse(w)?])
}

fn parse_rates(s: &str) -> std::result::Result<Rates, String> {
    let rates = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad rate {v:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rates.is_empty() {
        return Err("need at least one rate".into());
    }
    Ok(Rates(rates))
}

fn echo_config(cfg: &PipelineConfig) {
    println!("# resolved config");
    for line in cfg.to_toml().lines() {
        println!("# {line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Bench(args) => run_bench(args),
        Command::AblateDilation(args) => run_ablate(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let header = vec![
        format!("generator: seed = {}", args.seed),
        format!("generator: count = {}", args.count),
        format!("generator: size = [{}, {}]", args.size[0], args.size[1]),
        format!("generator: classes = {}", args.classes),
    ];
    println!("# resolved config");
    for line in &header {
        println!("# {line}");
    }
    let scenes = gen_synthetic(args.seed, args.count, args.size, args.classes)?;
    let manifest = write_dataset(&args.out_dir, &scenes, &header)?;
    std::fs::write(
        args.out_dir.join("generator.toml"),
        format!(
            "seed = {}\ncount = {}\nsize = [{}, {}]\nclasses = {}\n",
            args.seed, args.count, args.size[0], args.size[1], args.classes
        ),
    )?;
    println!("wrote {} scene pairs; manifest at {}", scenes.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = args.config.resolve()?;
    echo_config(&cfg);
    let opts = GradCheckOptions {
        tol: args.tol,
        seed: args.seed,
        max_coords_per_group: if args.max_coords == 0 { None } else { Some(args.max_coords) },
        tamper: args.tamper_grad,
        ..Default::default()
    };
    let report = focusseg::check::model_grad_check(&cfg.model, args.seed, &opts)?;
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn apply_train_overrides(cfg: &mut PipelineConfig, args: &TrainArgs) {
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.base_lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = args.train_scenes {
        cfg.train.train_scenes = v;
    }
    if let Some(v) = args.val_scenes {
        cfg.train.val_scenes = v;
    }
    if let Some(v) = args.lambda1 {
        cfg.model.loss.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.model.loss.lambda2 = v;
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = args.config.resolve()?;
    apply_train_overrides(&mut cfg, &args);
    cfg.validate()?;
    echo_config(&cfg);

    let (train_set, val_set) = match &args.data_dir {
        Some(dir) => {
            let train_set = load_dataset(&dir.join(focusseg::data::MANIFEST_NAME))?;
            let val_set = match &args.val_dir {
                Some(vdir) => load_dataset(&vdir.join(focusseg::data::MANIFEST_NAME))?,
                None => default_datasets(&cfg.model, &cfg.train)?.1,
            };
            (train_set, val_set)
        }
        None => default_datasets(&cfg.model, &cfg.train)?,
    };

    let result = train(&cfg.model, &cfg.train, &train_set, Some(&args.out_dir))?;
    let eval = evaluate(&result.model, &val_set)?;
    print!("{}", eval.render_table());
    std::fs::write(args.out_dir.join("metrics.toml"), eval.render_toml())?;
    if let Some(p) = &result.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    if let Some(p) = &result.log_path {
        println!("log: {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_eval(args: EvalArgs) -> Result<ExitCode> {
    let (model, train_cfg) = load_checkpoint(&args.checkpoint)?;
    let cfg = PipelineConfig { model: model.cfg.clone(), train: train_cfg };
    echo_config(&cfg);
    let scenes = load_dataset(&args.data_dir.join(focusseg::data::MANIFEST_NAME))?;
    let eval = evaluate(&model, &scenes)?;
    print!("{}", eval.render_table());
    println!("# structured");
    print!("{}", eval.render_toml());
    Ok(ExitCode::SUCCESS)
}

fn run_predict(args: PredictArgs) -> Result<ExitCode> {
    let (model, train_cfg) = load_checkpoint(&args.checkpoint)?;
    let cfg = PipelineConfig { model: model.cfg.clone(), train: train_cfg };
    echo_config(&cfg);
    std::fs::create_dir_all(&args.out_dir)?;

    match (&args.data_dir, &args.image) {
        (Some(dir), None) => {
            let scenes = load_dataset(&dir.join(focusseg::data::MANIFEST_NAME))?;
            let mut acc = metrics::ConfusionAccumulator::new(model.cfg.num_classes);
            for (i, scene) in scenes.iter().enumerate() {
                let (logits, _) = model.forward(&scene.image)?;
                let pred = argmax_labels(&logits)?;
                write_pgm(&args.out_dir.join(format!("pred_{i:04}.pgm")), &pred)?;
                acc.add(&pred, &scene.labels)?;
            }
            let m = acc.metrics();
            println!(
                "metrics: miou={:.4} boundary_miou={:.4} pixel_acc={:.4}",
                m.miou, m.boundary_miou, m.pixel_accuracy
            );
        }
        (None, Some(image_path)) => {
            let image = read_ppm(image_path)?;
            let (logits, _) = model.forward(&image)?;
            let pred = argmax_labels(&logits)?;
            let stem = image_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image");
            write_pgm(&args.out_dir.join(format!("{stem}_pred.pgm")), &pred)?;
        }
        _ => {
            return Err(Error::config(
                "predict needs exactly one of --data-dir or --image".to_string(),
            ))
        }
    }
    println!("predictions written to {}", args.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run_bench(args: BenchArgs) -> Result<ExitCode> {
    let cfg = args.config.resolve()?;
    echo_config(&cfg);
    let rows = bench_branches(&cfg.model.branches, args.channels, args.spatial, args.trials, args.seed)?;
    print!("{}", render_bench_tsv(&rows));
    println!("# structured");
    print!("{}", render_bench_toml(&rows));

    // Whole-model FLOP accounting at the configured input size.
    let model = focusseg::model::build_model(&cfg.model, args.seed)?;
    let report = count_flops(&model, cfg.model.input_size)?;
    println!("# model flops at {:?} ({} params)", cfg.model.input_size, model.count_params());
    print!("{}", report.render());
    Ok(ExitCode::SUCCESS)
}

fn run_ablate(args: AblateArgs) -> Result<ExitCode> {
    let mut cfg = args.config.resolve()?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.train_scenes {
        cfg.train.train_scenes = v;
    }
    if let Some(v) = args.val_scenes {
        cfg.train.val_scenes = v;
    }
    cfg.validate()?;
    echo_config(&cfg);
    let (train_set, val_set) = default_datasets(&cfg.model, &cfg.train)?;
    let rows = ablate_dilation(&cfg.model, &cfg.train, &args.rates.0, &train_set, &val_set)?;
    print!("{}", render_ablation_table(&rows));
    println!("# structured");
    print!("{}", render_ablation_toml(&rows));
    Ok(ExitCode::SUCCESS)
}
