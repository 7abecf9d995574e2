use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use liftrisk::hypertune::{grid_search, GridSpec, Outcome, TuneError};
use liftrisk::pipeline::{assign_split, evaluate, run_training, Checkpoint, PipelineConfig, PipelineError};
use liftrisk::saliency::{class_score_gradient, mean_map, sensor_attribution, SaliencyError};
use liftrisk::synthdata::{
    generate_dataset, load_dataset, save_dataset, save_manifest, DataError, DatasetProfile, GeneratorParams, RiskLabel,
    Split,
};
use liftrisk::trainer::TrainError;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_WIDTH: u8 = 5;

#[derive(Parser)]
#[command(name = "liftrisk", version, about = "Lifting-risk classification from wearable IMU data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Class {
    Low,
    Medium,
    High,
}

impl From<Class> for RiskLabel {
    fn from(c: Class) -> Self {
        match c {
            Class::Low => RiskLabel::Low,
            Class::Medium => RiskLabel::Medium,
            Class::High => RiskLabel::High,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Profile::Default)]
        profile: Profile,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Split, preprocess, train and evaluate; writes the checkpoint plus
    /// history, metrics and split CSVs next to it.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pipeline config that must agree with the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Saliency maps for the test trials of one class.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        class: Class,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search over L2 weight, learning rate and dropout; all cells
    /// share one split, written to `split/manifest.csv` under `--out`.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Directory for the result table and per-cell loss curves;
        /// the table is printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train grid cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

fn pipeline_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::UnknownKey { .. } | PipelineError::ConfigSyntax { .. } | PipelineError::ConfigValue { .. } => {
            EXIT_USAGE
        }
        PipelineError::WidthMismatch { .. } => EXIT_WIDTH,
        PipelineError::Train(TrainError::Diverged { .. }) => EXIT_DIVERGED,
        PipelineError::Data(_) | PipelineError::Checkpoint(_) | PipelineError::SampleRate { .. } => EXIT_DATA,
        _ => EXIT_FAILURE,
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::new(pipeline_code(&e), e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(EXIT_DATA, e.to_string())
    }
}

impl From<SaliencyError> for Failure {
    fn from(e: SaliencyError) -> Self {
        Failure::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<TuneError> for Failure {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Pipeline(p) => p.into(),
            other => Failure::new(EXIT_USAGE, other.to_string()),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(EXIT_DATA, e.to_string()))
}

fn sibling(ckpt: &Path, suffix: &str) -> PathBuf {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    ckpt.with_file_name(format!("{stem}_{suffix}"))
}

fn cmd_synth(out: &Path, seed: u64, profile: Profile, force: bool) -> Result<(), Failure> {
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Failure::new(EXIT_USAGE, format!("{} is not empty (use --force to write into it)", out.display())));
    }
    let (p, name) = match profile {
        Profile::Default => (DatasetProfile::default(), "default"),
        Profile::Desk => (DatasetProfile::desk(), "desk"),
    };
    let p = p.with_seed(seed);
    let (trials, manifest) = generate_dataset(&p, &GeneratorParams::default());
    let comments = vec![format!("synthetic dataset, profile {name}, seed {seed}")];
    save_dataset(out, &trials, &manifest, &comments).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let c = p.class_counts();
    println!("wrote {} trials to {} (low {}, medium {}, high {})", trials.len(), out.display(), c[0], c[1], c[2]);
    Ok(())
}

fn cmd_train(data: Option<PathBuf>, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = match &config {
        Some(path) => PipelineConfig::load(path).map_err(|e| match e {
            PipelineError::Io { .. } => Failure::new(EXIT_USAGE, e.to_string()),
            other => other.into(),
        })?,
        None => PipelineConfig::default(),
    };
    let data = data
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no dataset: pass --data or set data_dir"))?;
    let out = out
        .or_else(|| cfg.out_dir.as_ref().map(|d| d.join("model.ckpt")))
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no output: pass --out or set out_dir"))?;
    let (trials, manifest) = load_dataset(&data)?;
    let run = run_training(&cfg, &trials, &manifest)?;
    let comments = cfg.comment_lines();
    write(&out, run.checkpoint.to_bytes())?;
    write(&sibling(&out, "history.csv"), run.history.to_csv(&comments))?;
    write(&sibling(&out, "metrics.csv"), run.evaluation.report.to_csv(&comments))?;
    let split_dir = sibling(&out, "split");
    save_manifest(&split_dir, &run.manifest, &comments).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    let r = &run.evaluation.report;
    println!(
        "epochs {} (restored {}), test accuracy {:.4}, R_K {:.4}; checkpoint {}",
        run.history.epochs_run(),
        run.history.restored_from_epoch,
        r.accuracy,
        r.rk.value,
        out.display()
    );
    Ok(())
}

fn checked_checkpoint(model: &Path, config: Option<&Path>) -> Result<Checkpoint, Failure> {
    let ck = load_checkpoint(model)?;
    if let Some(path) = config {
        let cfg = PipelineConfig::load(path)?;
        if cfg.image_width != ck.config.image_width {
            return Err(
                PipelineError::WidthMismatch { checkpoint: ck.config.image_width, config: cfg.image_width }.into()
            );
        }
    }
    Ok(ck)
}

fn cmd_eval(model: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let ck = checked_checkpoint(model, config)?;
    let (trials, manifest) = load_dataset(data)?;
    let split = assign_split(&ck.config, &manifest)?;
    let ev = evaluate(&ck, &trials, &split, Split::Test)?;
    let csv = ev.report.to_csv(&ck.config.comment_lines());
    match out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn trial_stem(file: &str) -> String {
    Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| file.replace('/', "_"))
}

fn cmd_saliency(model: &Path, data: &Path, class: RiskLabel, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(model)?;
    let (trials, manifest) = load_dataset(data)?;
    let split = assign_split(&ck.config, &manifest)?;
    let chosen: Vec<usize> =
        split.indices(Split::Test).into_iter().filter(|&i| split.entries[i].risk() == class).collect();
    if chosen.is_empty() {
        return Err(Failure::new(EXIT_DATA, format!("no {class} trials in the test split")));
    }
    let mut maps = Vec::with_capacity(chosen.len());
    let mut last_img = None;
    for &i in &chosen {
        let img = ck.preprocessor.encode(&trials[i])?;
        let map = class_score_gradient(&ck.model, &img, class.index())?;
        let path = out.join(format!("saliency_{class}_{}.pgm", trial_stem(&split.entries[i].trial_file)));
        write(&path, liftrisk::saliency::pgm_bytes(&map.magnitude, map.height, map.width))?;
        maps.push(map);
        last_img = Some(img);
    }
    let mean = mean_map(&maps)?;
    write(
        &out.join(format!("saliency_{class}_mean.pgm")),
        liftrisk::saliency::pgm_bytes(&mean.magnitude, mean.height, mean.width),
    )?;
    let img = last_img.expect("at least one image");
    let attribution = sensor_attribution(&mean, &img)?;
    let mut comments = ck.config.comment_lines();
    comments.push(format!("mean saliency over {} test trials of class {class}", maps.len()));
    write(&out.join(format!("sensor_attribution_{class}.csv")), attribution.to_csv(&comments))?;
    let top: Vec<&str> = attribution.ranking.iter().take(4).map(|&s| liftrisk::imaging::SENSOR_NAMES[s]).collect();
    println!("{} maps written to {}; top sensors: {}", maps.len(), out.display(), top.join(", "));
    Ok(())
}

fn cmd_tune(data: &Path, grid: &Path, out: Option<&Path>, parallel: bool) -> Result<(), Failure> {
    let text = fs::read_to_string(grid).map_err(|e| Failure::new(EXIT_USAGE, format!("{}: {e}", grid.display())))?;
    let spec = GridSpec::parse(&text)?;
    let (trials, manifest) = load_dataset(data)?;
    let result = grid_search(&spec, &trials, &manifest, parallel)?;
    let comments = spec.base.comment_lines();
    let csv = result.to_csv(&comments);
    match out {
        Some(dir) => {
            write(&dir.join("tune_results.csv"), &csv)?;
            let split = assign_split(&spec.base, &manifest)?;
            save_manifest(&dir.join("split"), &split, &comments)
                .map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
            for row in &result.rows {
                if let Outcome::Done { history, .. } = &row.outcome {
                    let cfg = spec.cell_config(&row.cell);
                    write(
                        &dir.join("curves").join(format!("cell_{}.csv", row.cell.index)),
                        history.to_csv(&cfg.comment_lines()),
                    )?;
                }
            }
            println!("{} cells, results in {}", result.rows.len(), dir.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { out, seed, profile, force } => cmd_synth(&out, seed, profile, force),
        Command::Train { data, config, out } => cmd_train(data, config, out),
        Command::Eval { model, data, config, out } => cmd_eval(&model, &data, config.as_deref(), out.as_deref()),
        Command::Saliency { model, data, class, out } => cmd_saliency(&model, &data, class.into(), &out),
        Command::Tune { data, grid, out, parallel } => cmd_tune(&data, &grid, out.as_deref(), parallel),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
