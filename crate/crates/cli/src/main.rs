use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsc_core::checkpoint::{Checkpoint, StoredModel, MAGIC};
use lsc_core::data::{banded_templates, parse_idx_images, TransformKind};
use lsc_core::eval::{encode_grid, snr_of};
use lsc_core::{
    latent_traversal, make_synthetic, parse_config, reconstruct_baseline, snr, train,
    train_baseline, Dataset, LscError, ModelParams, Reconstructor, TrainConfig, TrainRecord,
    TransformSpec,
};

#[derive(Parser)]
#[command(name = "lsc", version, about = "Lie group sparse coding")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a transformed dataset from template images.
    GenData(GenData),
    /// Train an LSC model.
    Train(TrainArgs),
    /// Train the plain sparse coding baseline.
    BaselineTrain(TrainArgs),
    /// Print the pooled reconstruction SNR as `snr=<value>`.
    Eval(EvalArgs),
    /// Render inputs (top row) and reconstructions (bottom row).
    Reconstruct(ReconstructArgs),
    /// Render latent traversals along one torus dimension.
    Traverse(TraverseArgs),
    /// Render the columns of W.
    ExportW(ExportW),
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_parser = parse_kind)]
    kind: TransformKind,
    /// IDX3 file of templates; procedural templates are used when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Use only the first N templates.
    #[arg(long)]
    template_count: Option<usize>,
    /// Side length of procedural templates.
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long)]
    count_per_template: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter ranges `lo:hi,lo:hi`, overriding the defaults for the kind.
    #[arg(long, value_parser = parse_ranges)]
    ranges: Option<Ranges>,
    /// Wrap translations around the border.
    #[arg(long)]
    cyclic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Write the per-batch log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Inference settings (T, alpha0); defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score only the first N images.
    #[arg(long)]
    take: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    take: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraverseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Torus coordinate, counted from 1.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = -std::f64::consts::PI, allow_hyphen_values = true)]
    from: f64,
    #[arg(long, default_value_t = std::f64::consts::PI, allow_hyphen_values = true)]
    to: f64,
    #[arg(long, default_value_t = 9)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    take: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportW {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    cols: usize,
    #[arg(long)]
    out: PathBuf,
}

type Ranges = Vec<(f64, f64)>;

fn parse_kind(s: &str) -> Result<TransformKind, String> {
    s.parse()
}

fn parse_ranges(s: &str) -> Result<Ranges, String> {
    s.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| format!("range `{part}` is not `lo:hi`"))?;
            let lo = lo
                .trim()
                .parse()
                .map_err(|_| format!("bad number `{lo}`"))?;
            let hi = hi
                .trim()
                .parse()
                .map_err(|_| format!("bad number `{hi}`"))?;
            Ok((lo, hi))
        })
        .collect()
}

fn read_images(path: &Path) -> lsc_core::Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        Checkpoint::decode(&bytes)?
            .dataset
            .ok_or_else(|| LscError::invalid(format!("{} holds no dataset", path.display())))
    } else {
        parse_idx_images(&bytes)
    }
}

fn load_config(path: Option<&Path>) -> lsc_core::Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), parse_config)
}

fn load_model(path: &Path) -> lsc_core::Result<StoredModel> {
    Checkpoint::load(path)?
        .model
        .ok_or_else(|| LscError::invalid(format!("{} holds no model", path.display())))
}

fn lsc_model(path: &Path) -> lsc_core::Result<ModelParams> {
    match load_model(path)? {
        StoredModel::Lsc(m) => Ok(m),
        StoredModel::Baseline(_) => Err(LscError::invalid(
            "this command needs an LSC checkpoint, not a baseline",
        )),
    }
}

fn side_of(dim: usize) -> lsc_core::Result<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(LscError::invalid(format!(
            "D = {dim} is not a square image size"
        )));
    }
    Ok(side)
}

fn write_log(path: Option<&Path>, log: &[TrainRecord]) -> lsc_core::Result<()> {
    if let Some(path) = path {
        let mut out = BufWriter::new(File::create(path)?);
        for rec in log {
            writeln!(out, "{rec}")?;
        }
        out.flush()?;
    }
    Ok(())
}

fn gen_data(args: &GenData) -> lsc_core::Result<()> {
    let mut templates = match &args.templates {
        Some(path) => read_images(path)?,
        None => banded_templates(args.side, args.template_count.unwrap_or(3))?,
    };
    if let Some(n) = args.template_count {
        if n > templates.len() {
            return Err(LscError::invalid(format!(
                "asked for {n} templates, file has {}",
                templates.len()
            )));
        }
        templates = templates.slice(0..n);
    }
    let mut spec = match args.kind {
        TransformKind::Translate2d => TransformSpec::translate2d(args.count_per_template),
        TransformKind::RotScale => TransformSpec::rotscale(args.count_per_template),
    };
    if let Some(r) = &args.ranges {
        spec.ranges = r.clone();
    }
    spec.cyclic = args.cyclic;
    let data = make_synthetic(&templates, &spec, args.seed)?;
    Checkpoint::with_dataset(data).save(&args.out)
}

fn training_setup(args: &TrainArgs) -> lsc_core::Result<(TrainConfig, Dataset)> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let data = read_images(&args.data)?;
    match cfg.image_dim {
        Some(d) if d != data.dim() => {
            return Err(LscError::DimensionMismatch {
                what: "image dimension (config D vs data)",
                expected: d,
                got: data.dim(),
            })
        }
        _ => cfg.image_dim = Some(data.dim()),
    }
    cfg.validate()?;
    Ok((cfg, data))
}

fn train_cmd(args: &TrainArgs) -> lsc_core::Result<()> {
    let (cfg, data) = training_setup(args)?;
    let model = lsc_core::init_model(&cfg, cfg.seed)?;
    let (model, log) = train(model, &data, &cfg)?;
    write_log(args.log.as_deref(), &log)?;
    Checkpoint::with_model(model, cfg.grid_size).save(&args.out)
}

fn baseline_cmd(args: &TrainArgs) -> lsc_core::Result<()> {
    let (cfg, data) = training_setup(args)?;
    let (state, log) = train_baseline(&data, &cfg)?;
    write_log(args.log.as_deref(), &log)?;
    Checkpoint::with_baseline(state.model).save(&args.out)
}

fn eval_images(path: &Path, take: Option<usize>) -> lsc_core::Result<Vec<Vec<f64>>> {
    let data = read_images(path)?;
    let n = take.unwrap_or(data.len()).min(data.len());
    Ok(data.slice(0..n).normalized()?.images)
}

fn eval_cmd(args: &EvalArgs) -> lsc_core::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let images = eval_images(&args.data, args.take)?;
    let value = match load_model(&args.ckpt)? {
        StoredModel::Lsc(model) => {
            let recons = Reconstructor::new(&model, &cfg)?.reconstruct_all(&images)?;
            snr_of(&images, &recons)?
        }
        StoredModel::Baseline(model) => {
            let est = reconstruct_baseline(&images, &model, &cfg)?;
            snr(&images, &est)?
        }
    };
    println!("snr={value}");
    Ok(())
}

fn reconstruct_cmd(args: &ReconstructArgs) -> lsc_core::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let images = eval_images(&args.data, Some(args.take))?;
    let est: Vec<Vec<f64>> = match load_model(&args.ckpt)? {
        StoredModel::Lsc(model) => Reconstructor::new(&model, &cfg)?
            .reconstruct_all(&images)?
            .into_iter()
            .map(|r| r.image_hat)
            .collect(),
        StoredModel::Baseline(model) => reconstruct_baseline(&images, &model, &cfg)?,
    };
    let side = side_of(images[0].len())?;
    let mut tiles = images.clone();
    tiles.extend(est);
    std::fs::write(&args.out, encode_grid(&tiles, side, side, images.len())?)?;
    Ok(())
}

fn traverse_cmd(args: &TraverseArgs) -> lsc_core::Result<()> {
    let model = lsc_model(&args.ckpt)?;
    if args.dim == 0 {
        return Err(LscError::invalid("--dim counts from 1"));
    }
    let images = eval_images(&args.data, Some(args.take))?;
    let tiles = latent_traversal(
        &model,
        &images,
        args.dim - 1,
        args.from,
        args.to,
        args.steps,
    )?;
    let side = side_of(model.dim())?;
    std::fs::write(&args.out, encode_grid(&tiles, side, side, args.steps)?)?;
    Ok(())
}

fn export_w_cmd(args: &ExportW) -> lsc_core::Result<()> {
    let model = lsc_model(&args.ckpt)?;
    let side = side_of(model.dim())?;
    let cols: Vec<Vec<f64>> = model
        .w()
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    std::fs::write(&args.out, encode_grid(&cols, side, side, args.cols)?)?;
    Ok(())
}

fn run(cli: &Cli) -> lsc_core::Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::BaselineTrain(a) => baseline_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Traverse(a) => traverse_cmd(a),
        Command::ExportW(a) => export_w_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
