//! The `sci-unfold` command line.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, unreadable or
//! inconsistent files) and 2 for internal failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use sci_unfold::checkpoint;
use sci_unfold::eval::{self, AblationAxis, AblationBudget, AblationReport};
use sci_unfold::forward::{compress, gaussian_noise, generate_masks, normalize_measurement, Measurement};
use sci_unfold::io;
use sci_unfold::network::reconstruct;
use sci_unfold::prior::ConvMode;
use sci_unfold::train::{self, synthetic_clips, ConfigFile};
use sci_unfold::{MaskSet, ParameterRegistry, SciError, VideoBlock};

#[derive(Parser, Debug)]
#[command(name = "sci-unfold", version, about = "Video snapshot compressive imaging with a dense deep unfolding network")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with `training` and `network` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random binary mask set.
    Genmask(GenmaskArgs),
    /// Compress a ground-truth video into a measurement.
    Simulate(SimulateArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Reconstruct a video block from a measurement.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on a benchmark directory.
    Evaluate(EvaluateArgs),
    /// Build the ablation variant grids, optionally training each variant.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenmaskArgs {
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// Probability of an open pixel.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Directory of PNG frames or a `.ten` container of shape (B, H, W).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the normalized measurement (default: `<out>.norm.ten`).
    #[arg(long)]
    normalized_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory tree of training sequences.
    #[arg(long, conflicts_with = "synthetic")]
    source: Option<PathBuf>,
    /// Train on this many generated moving-texture clips instead of a corpus.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Fixed masks (default: drawn from the seed).
    #[arg(long)]
    masks: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_clips: Option<usize>,
    /// Clip size as `T,H,W`.
    #[arg(long, value_parser = parse_triple)]
    block: Option<[usize; 3]>,
    #[arg(long)]
    phases: Option<usize>,
    /// Channel widths as `C1,C2,C3`.
    #[arg(long, value_parser = parse_triple)]
    widths: Option<[usize; 3]>,
    #[arg(long)]
    conv_mode: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clamp the output to [0, 1].
    #[arg(long)]
    clamp: bool,
    /// Also write the frames as PNGs into this directory.
    #[arg(long)]
    png_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of scenes, each holding `gt.ten` and `masks.ten`.
    #[arg(long)]
    bench: PathBuf,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// `conv_mode`, `dfm_branches`, `dfma`, `phase_count` or `all`.
    #[arg(long, default_value = "all")]
    axis: String,
    /// Train every variant on this many synthetic clips using the training config.
    #[arg(long)]
    train_clips: Option<usize>,
    /// Write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<usize>| format!("expected three comma-separated values, got {}", v.len()))
}

#[derive(Debug)]
enum Failure {
    User(String),
    Internal(String),
}

impl From<SciError> for Failure {
    fn from(e: SciError) -> Self {
        match e {
            SciError::NonFiniteLoss { .. } | SciError::OperatorTooLarge { .. } => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn user<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::User(msg.into()))
}

/// Refuses to write over any of the inputs.
fn check_outputs(inputs: &[&Path], outputs: &[&Path]) -> Outcome {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for o in outputs {
        if inputs.iter().any(|i| canon(i) == canon(o)) {
            return user(format!("output {} would overwrite an input", o.display()));
        }
    }
    Ok(())
}

fn load_config(shared: &Shared) -> Result<ConfigFile, Failure> {
    match &shared.config {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(ConfigFile::default()),
    }
}

fn genmask(a: &GenmaskArgs, seed: u64, out: &mut dyn Write) -> Outcome {
    let m = generate_masks(a.frames, a.height, a.width, a.density, seed)?;
    io::write_masks(&a.out, &m)?;
    let _ = writeln!(out, "wrote {} masks of {}x{} to {}", a.frames, a.height, a.width, a.out.display());
    Ok(())
}

fn norm_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("measurement".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.norm.ten"))
}

fn simulate(a: &SimulateArgs, seed: u64, out: &mut dyn Write) -> Outcome {
    if !(a.noise_sigma >= 0.0) {
        return user(format!("--noise-sigma must be nonnegative, got {}", a.noise_sigma));
    }
    let norm_out = a.normalized_out.clone().unwrap_or_else(|| norm_path(&a.out));
    check_outputs(&[&a.gt, &a.masks], &[&a.out, &norm_out])?;
    let x = io::read_video::<f32>(&a.gt)?;
    let m = io::read_masks(&a.masks)?;
    if x.tensor().shape() != m.shape() {
        return user(format!(
            "{} has shape {:?} but {} has shape {:?}",
            a.gt.display(),
            x.tensor().shape(),
            a.masks.display(),
            m.shape()
        ));
    }
    let noise = if a.noise_sigma > 0.0 { Some(gaussian_noise(m.height(), m.width(), a.noise_sigma, seed)?) } else { None };
    let y = compress(&x, &m, noise.as_ref())?;
    let ybar = normalize_measurement(&y, &m)?;
    io::write_tensor(&a.out, y.tensor())?;
    io::write_tensor(&norm_out, ybar.tensor())?;
    let _ = writeln!(out, "wrote {} and {}", a.out.display(), norm_out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, shared: &Shared, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let mut file = load_config(shared)?;
    let (t, n) = (&mut file.training, &mut file.network);
    if let Some(s) = shared.seed {
        t.seed = s;
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(t.epochs, a.epochs);
    set!(t.base_lr, a.lr);
    set!(t.batch, a.batch);
    set!(t.n_clips, a.n_clips.or(a.synthetic));
    set!(t.block, a.block);
    set!(t.val_fraction, a.val_fraction);
    set!(n.phases, a.phases);
    set!(n.widths, a.widths);
    if let Some(mode) = &a.conv_mode {
        n.conv_mode = ConvMode::from_str(mode).map_err(Failure::from)?;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if a.source.is_some() {
        t.source_dir = a.source.clone();
    }
    if a.log.is_some() {
        t.log_path = a.log.clone();
    }
    t.checkpoint_dir = Some(a.out.clone());
    t.validate()?;
    n.validate()?;
    if a.synthetic.is_none() && t.source_dir.is_none() {
        return user("train needs --source, --synthetic or training.source_dir in --config");
    }
    let [bt, bh, bw] = t.block;
    let masks = match &a.masks {
        Some(p) => {
            let m = io::read_masks(p)?;
            if m.shape() != t.block {
                return user(format!("{} has shape {:?}, block is {:?}", p.display(), m.shape(), t.block));
            }
            m
        }
        None => generate_masks(bt, bh, bw, t.mask_density, t.seed)?,
    };
    let mut inputs: Vec<&Path> = a.masks.iter().map(PathBuf::as_path).collect();
    if let Some(c) = &shared.config {
        inputs.push(c);
    }
    check_outputs(&inputs, &[&a.out.join(checkpoint::MANIFEST)])?;
    let resolved = serde_json::to_string(&file).map_err(|e| Failure::Internal(e.to_string()))?;
    let _ = writeln!(err, "config: {resolved}");

    let outcome = match a.synthetic {
        Some(count) => {
            let clips = synthetic_clips(count, file.training.block, file.training.seed);
            let n_val = ((count as f64 * file.training.val_fraction).ceil() as usize).min(count - 1);
            let (tr, va) = clips.split_at(count - n_val);
            let reg = ParameterRegistry::new(&file.network, file.training.seed)?;
            train::train_clips(tr, va, &file.training, reg, &masks, None)?
        }
        None => train::train(&file.training, &file.network, &masks)?,
    };
    io::write_masks(&a.out.join("masks.ten"), &masks)?;
    let last = outcome.log.last();
    let _ = writeln!(
        out,
        "trained {} steps; final loss {}; checkpoint in {}",
        outcome.steps,
        last.map_or("-".into(), |r| format!("{:.6}", r.loss)),
        a.out.display()
    );
    Ok(())
}

fn reconstruct_cmd(a: &ReconstructArgs, shared: &Shared, out: &mut dyn Write) -> Outcome {
    check_outputs(&[&a.measurement, &a.masks, &a.ckpt.join(checkpoint::MANIFEST)], &[&a.out])?;
    let reg = checkpoint::load_network::<f32>(&a.ckpt)?;
    if shared.config.is_some() {
        reg.check_config(&load_config(shared)?.network)?;
    }
    let m = io::read_masks(&a.masks)?;
    let y = Measurement::new(io::read_tensor::<f32>(&a.measurement)?)?;
    if y.tensor().shape() != [m.height(), m.width()] {
        return user(format!(
            "{} is {:?} but masks in {} are {}x{}",
            a.measurement.display(),
            y.tensor().shape(),
            a.masks.display(),
            m.height(),
            m.width()
        ));
    }
    let mut x: VideoBlock<f32> = reconstruct(&y, &m, &reg, reg.config())?;
    if a.clamp {
        x = x.clamp_unit();
    }
    io::write_tensor(&a.out, x.tensor())?;
    if let Some(dir) = &a.png_dir {
        io::save_png_frames(dir, &x.clamp_unit())?;
    }
    let _ = writeln!(out, "wrote {:?} reconstruction to {}", x.tensor().shape(), a.out.display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, out: &mut dyn Write) -> Outcome {
    if let Some(j) = &a.json {
        check_outputs(&[&a.ckpt, &a.bench], &[j])?;
    }
    let rec = eval::load_reconstructor(&a.ckpt)?;
    let report = eval::evaluate_benchmark(rec.as_ref(), &a.bench)?;
    let _ = write!(out, "{}", report.table());
    if let Some(j) = &a.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Internal(e.to_string()))?;
        std::fs::write(j, text + "\n").map_err(|e| SciError::io(j, e))?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, shared: &Shared, seed: u64, out: &mut dyn Write) -> Outcome {
    let axes: Vec<AblationAxis> = if a.axis == "all" {
        vec![AblationAxis::ConvMode, AblationAxis::DfmBranches, AblationAxis::Dfma, AblationAxis::PhaseCount]
    } else {
        vec![AblationAxis::from_str(&a.axis)?]
    };
    let file = load_config(shared)?;
    let clips;
    let budget = match a.train_clips {
        Some(0) => return user("--train-clips must be positive"),
        Some(count) => {
            let mut training = file.training.clone();
            training.seed = seed;
            training.validate()?;
            let [t, h, w] = training.block;
            clips = synthetic_clips(count, training.block, seed);
            let n_val = ((count as f64 * training.val_fraction).ceil() as usize).min(count - 1);
            let masks: MaskSet = generate_masks(t, h, w, training.mask_density, seed)?;
            Some((training, masks, n_val))
        }
        None => {
            clips = Vec::new();
            None
        }
    };
    let budget = budget.as_ref().map(|(training, masks, n_val)| AblationBudget {
        training: training.clone(),
        masks: masks.clone(),
        train: &clips[..clips.len() - n_val],
        val: &clips[clips.len() - n_val..],
    });
    let mut reports: Vec<AblationReport> = Vec::new();
    for axis in axes {
        let report = eval::run_ablation(axis, &file.network, budget.as_ref(), seed)?;
        let _ = writeln!(out, "[{}]", serde_json::to_value(axis).map_or(String::new(), |v| v.as_str().unwrap_or("").to_string()));
        let _ = write!(out, "{}", report.table());
        reports.push(report);
    }
    if let Some(j) = &a.json {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Failure::Internal(e.to_string()))?;
        std::fs::write(j, text + "\n").map_err(|e| SciError::io(j, e))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    if cli.shared.device != "cpu" {
        return user(format!("--device {}: only cpu is available in this build", cli.shared.device));
    }
    let seed = match (cli.shared.seed, &cli.shared.config) {
        (Some(s), _) => s,
        (None, Some(_)) => load_config(&cli.shared)?.training.seed,
        (None, None) => 0,
    };
    match &cli.command {
        Command::Genmask(a) => genmask(a, seed, out),
        Command::Simulate(a) => simulate(a, seed, out),
        Command::Train(a) => train_cmd(a, &cli.shared, out, err),
        Command::Reconstruct(a) => reconstruct_cmd(a, &cli.shared, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, &cli.shared, seed, out),
    }
}

/// Runs one command with explicit output streams and returns the exit code.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("sci-unfold")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{e}");
            return 1;
        }
    };
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(&cli, out, err)));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(Failure::User(msg))) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
        Ok(Err(Failure::Internal(msg))) => {
            let _ = writeln!(err, "internal error: {msg}");
            2
        }
        Err(_) => {
            let _ = writeln!(err, "internal error: unexpected panic");
            2
        }
    }
}

/// Runs one command against stdout and stderr; `argv` excludes the program name.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sci_unfold::network::ResidualInit;

    #[test]
    fn triples() {
        assert_eq!(parse_triple("8,64, 64").unwrap(), [8, 64, 64]);
        assert!(parse_triple("8,64").is_err());
        assert!(parse_triple("a,b,c").is_err());
    }

    #[test]
    fn normalized_path_sits_beside_output() {
        assert_eq!(norm_path(Path::new("/tmp/y.ten")), PathBuf::from("/tmp/y.norm.ten"));
    }

    #[test]
    fn residual_init_is_reachable_from_config() {
        let f: ConfigFile = serde_json::from_str(r#"{"network": {"residual_init": "measurement"}}"#).unwrap();
        assert_eq!(f.network.residual_init, ResidualInit::Measurement);
    }

    #[test]
    fn error_classes() {
        assert!(matches!(Failure::from(SciError::Config("x".into())), Failure::User(_)));
        assert!(matches!(
            Failure::from(SciError::NonFiniteLoss { epoch: 0, step: 0, loss: f64::NAN }),
            Failure::Internal(_)
        ));
    }
}
