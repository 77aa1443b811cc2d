use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use east::config::{parse_rho_grid, RunConfig};
use east::error::Error;
use east::evaluator::{count_flops, evaluate, EvalMask, MetricsTable, RunMeta};
use east::masker::{rank_tubelets, select_top, MaskKind};
use east::model::{checkpoint, Model};
use east::plot::{accuracy_chart, mask_heatmap};
use east::sampler::{build_inference_clip, ObservationRatio, SamplingConfig};
use east::trainer::train;
use east::video::{generate_synthetic_dataset, read_dataset, write_dataset, LabeledVideo};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (bad flags)
  3  configuration error (missing/invalid key, unknown key, inconsistent settings)
  4  I/O error (unreadable path, malformed dataset file)
  5  checkpoint error (unreadable checkpoint, checkpoint/config mismatch)
  6  numeric error (non-finite loss or logits)
  7  leakage guard tripped (frame read past the visible prefix)
  8  contract violation (internal invariant failed)

Errors are printed to stderr as one line:
  error kind=<kind> code=<n> msg=\"<message>\"

The environment variable EAST_SEED overrides train.seed.";

#[derive(Parser)]
#[command(name = "east", version, about = "Early action prediction on synthetic motion videos", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the data.* keys.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, train_log.csv and run.cfg into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate on this dataset and write metrics.csv into --out.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint at every ratio of the grid; writes a metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `start:stop:step` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        rho_grid: String,
        /// Masking at inference: difference, random or none (default: as trained).
        #[arg(long)]
        mask: Option<MaskKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one clip with its difference mask as SVG.
    MaskViz {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
        /// Observation ratio of the rendered clip.
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the analytic operation count of one training example.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        k: f64,
        /// Count the prediction pass only.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Draw accuracy-vs-ratio curves from metrics CSV files as SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        /// Curve labels, in the order of --metrics (default: file stems).
        #[arg(long, num_args = 1..)]
        label: Vec<String>,
        #[arg(long, default_value = "top-1 accuracy by observation ratio")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (3, "config"),
        Error::Format { .. } | Error::Io(_) => (4, "io"),
        Error::Checkpoint(_) => (5, "checkpoint"),
        Error::Numeric(_) => (6, "numeric"),
        Error::Leakage { .. } => (7, "leakage"),
        Error::Contract(_) => (8, "contract"),
    }
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs) -> east::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(|e| io_at(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> east::Result<Vec<LabeledVideo>> {
    if !path.exists() {
        return Err(io_at(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(read_dataset(path)?.1)
}

fn check_data(cfg: &RunConfig, data: &[LabeledVideo]) -> east::Result<()> {
    let d = &cfg.data;
    for (i, v) in data.iter().enumerate() {
        let shape = (v.video.frames(), v.video.height(), v.video.width(), v.video.channels());
        if shape != (d.frames, d.height, d.width, d.channels) {
            return Err(Error::Config(format!(
                "video {i} has shape {shape:?}, configuration expects {:?}",
                (d.frames, d.height, d.width, d.channels)
            )));
        }
        if v.label as usize >= d.num_classes() {
            return Err(Error::Config(format!("video {i} has label {} beyond {} classes", v.label, d.num_classes())));
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> east::Result<()> {
    fs::write(path, text).map_err(|e| io_at(path, e))
}

fn run_eval(model: &Model, cfg: &RunConfig, data: &[LabeledVideo], grid: &[f64], mask: MaskKind) -> east::Result<MetricsTable> {
    let m = EvalMask { kind: mask, k: cfg.train.mask_k, seed: cfg.train.seed };
    let (mut table, audit) = evaluate(model, data, grid, m)?;
    eprintln!(
        "leakage audit: {} frame reads, {} past the prefix",
        audit.reads(),
        audit.violations()
    );
    table.meta = RunMeta { config_hash: cfg.hash(), seed: cfg.train.seed, checkpoint: String::new() };
    Ok(table)
}

fn run(cli: Cli) -> east::Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg)?;
            let videos = generate_synthetic_dataset(&cfg.data)?;
            write_dataset(&videos, cfg.data.num_classes(), &out)?;
            write(&out.with_extension("cfg"), &cfg.to_text())?;
            println!("wrote {} videos to {}", videos.len(), out.display());
        }
        Command::Train { cfg, data, out, eval_data } => {
            let cfg = load_config(&cfg)?;
            let videos = load_data(&data)?;
            check_data(&cfg, &videos)?;
            fs::create_dir_all(&out).map_err(|e| io_at(&out, e))?;
            let text = cfg.to_text();
            write(&out.join("run.cfg"), &text)?;
            let model = Model::new(cfg.model_config())?;
            let log_path = out.join("train_log.csv");
            let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| io_at(&log_path, e))?);
            let (model, history) = train(model, &cfg.train_config(), &videos, Some(&mut log))?;
            drop(log);
            checkpoint::save(&model, Some(&text), &out.join("checkpoint.json"))?;
            if let Some(last) = history.last() {
                println!("trained {} steps, final loss {:.6}", history.len(), last.loss.total);
            }
            if let Some(eval_path) = eval_data {
                let test = load_data(&eval_path)?;
                check_data(&cfg, &test)?;
                let table = run_eval(&model, &cfg, &test, &cfg.eval_grid, cfg.eval_mask_kind())?;
                write(&out.join("metrics.csv"), &table.to_csv())?;
            }
        }
        Command::Eval { checkpoint: ckpt, data, rho_grid, mask, out } => {
            let (model, run_text) = checkpoint::load(&ckpt)?;
            let mut cfg = match run_text {
                Some(t) => RunConfig::parse(&t).map_err(|e| Error::Checkpoint(format!("embedded run configuration: {e}")))?,
                None => RunConfig::default(),
            };
            if cfg.model_config() != *model.config() {
                return Err(Error::Checkpoint("embedded run configuration does not match the model parameters".into()));
            }
            let grid = parse_rho_grid(&rho_grid)?;
            cfg.eval_grid = grid.clone();
            cfg.eval_mask = mask;
            let videos = load_data(&data)?;
            check_data(&cfg, &videos)?;
            let mut table = run_eval(&model, &cfg, &videos, &grid, cfg.eval_mask_kind())?;
            table.meta.checkpoint = ckpt.display().to_string();
            write(&out, &table.to_csv())?;
            write(&out.with_extension("cfg"), &cfg.to_text())?;
            print!("{}", table.to_csv());
        }
        Command::MaskViz { cfg, data, index, k, rho, out } => {
            let cfg = load_config(&cfg)?;
            let videos = load_data(&data)?;
            let v = videos
                .get(index)
                .ok_or_else(|| Error::Config(format!("index {index} beyond {} videos", videos.len())))?;
            let sampling = SamplingConfig { clip_len: cfg.model.clip_len, ..SamplingConfig::default() };
            let clip = build_inference_clip(&v.video, ObservationRatio::new(rho)?, &sampling)?;
            let geometry = cfg.model.mask_geometry(k);
            let ranks = rank_tubelets(&clip, &geometry)?;
            let sel = select_top(&ranks, &geometry)?;
            write(&out, &mask_heatmap(&clip, &sel, &ranks, geometry.patch, geometry.tubelet))?;
            println!("kept {} of {} tubelets", sel.retained(), sel.shape.len());
        }
        Command::Flops { cfg, k, no_oracle } => {
            let cfg = load_config(&cfg)?;
            let report = count_flops(&cfg.model_config(), k, !no_oracle)?;
            let full = count_flops(&cfg.model_config(), 0.0, !no_oracle)?;
            print!("{}", report.to_text());
            println!("ratio_vs_unmasked={:.6}", full.total_flops as f64 / report.total_flops.max(1) as f64);
        }
        Command::Plot { metrics, label, title, out } => {
            if !label.is_empty() && label.len() != metrics.len() {
                return Err(Error::Config(format!("{} labels for {} metrics files", label.len(), metrics.len())));
            }
            let mut series = Vec::new();
            for (i, p) in metrics.iter().enumerate() {
                let text = fs::read_to_string(p).map_err(|e| io_at(p, e))?;
                let name = label
                    .get(i)
                    .cloned()
                    .unwrap_or_else(|| p.file_stem().map_or_else(|| format!("run {i}"), |s| s.to_string_lossy().into_owned()));
                series.push((name, MetricsTable::from_csv(&text)?));
            }
            write(&out, &accuracy_chart(&series, &title))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error kind={kind} code={code} msg=\"{msg}\"");
            ExitCode::from(code)
        }
    }
}
