//! `c2p`: synthetic data, partial-view generation, pretraining, probing and
//! ablations from one executable.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use c2p_core::distill::{pretrain, Model, TrainState};
use c2p_core::eval::{
    data_fraction_run, extract_features, linear_probe, parse_grid, run_ablation, DEFAULT_FRACTIONS,
};
use c2p_core::geometry::Sequence;
use c2p_core::partial_view::{generate_partial_sequence, random_sample_sequence, render_depth};
use c2p_core::synth::make_dataset;
use c2p_core::{autograd, distill, io, Error, RunConfig};

const MANIFEST: &str = "manifest.txt";

#[derive(Parser, Debug)]
#[command(name = "c2p", version, about = "Complete-to-partial 4D point cloud distillation")]
struct Cli {
    /// Run configuration (TOML); missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "C2P_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of labeled complete sequences.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also export every frame as ASCII XYZ into this directory.
        #[arg(long)]
        xyz: Option<PathBuf>,
    },
    /// Turn a complete sequence into a partial one.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep this fraction of points uniformly instead of occlusion culling.
        #[arg(long, value_name = "RATIO")]
        random_sampling: Option<f64>,
        /// Write one C2PD depth image per frame into this directory.
        #[arg(long, value_name = "DIR", conflicts_with = "random_sampling")]
        emit_depth: Option<PathBuf>,
        #[arg(long)]
        xyz: Option<PathBuf>,
    },
    /// Run distillation pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Continue from a checkpoint written by an earlier run; the log is appended to.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen student features.
    Probe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "random_init")]
        ckpt: Option<PathBuf>,
        /// Probe a freshly initialized student instead of a checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        random_init: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain and probe every cell of a configuration grid.
    Ablate {
        /// `base`, `full`, or `axis=v1,v2;axis=v1`.
        #[arg(long, default_value = "full")]
        grid: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write every cell's configuration here.
        #[arg(long)]
        configs: Option<PathBuf>,
        /// Record wall time instead of 0.
        #[arg(long)]
        timing: bool,
    },
    /// Pretrain on growing fractions of the data and probe against random init.
    DataFraction {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        timing: bool,
    },
    /// Finite-difference check of every op and of the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Error },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numeric(_) => 3,
            CliError::Core(e) | CliError::File { source: e, .. } => match e {
                Error::Config(_) | Error::Usage(_) => 1,
                Error::Numeric(_) | Error::NumericInput(_) | Error::Shape(_) => 3,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn at(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |source| CliError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| at(path)(Error::Io(e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("c2p: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t as usize)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(at(p))?,
        None => RunConfig::default(),
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given (see --help)".into()));
    };
    match command {
        Command::Synth {
            scenes,
            frames,
            points,
            seed,
            out,
            xyz,
        } => {
            let mut data_cfg = cfg.data.clone();
            data_cfg.sequences = scenes.unwrap_or(data_cfg.sequences);
            data_cfg.frames = frames.unwrap_or(data_cfg.frames);
            data_cfg.points = points.unwrap_or(data_cfg.points);
            data_cfg.validate()?;
            cmd_synth(&data_cfg, seed, &out, xyz.as_deref())
        }
        Command::Generate {
            input,
            out,
            seed,
            random_sampling,
            emit_depth,
            xyz,
        } => cmd_generate(&cfg, &input, &out, seed, random_sampling, emit_depth.as_deref(), xyz.as_deref()),
        Command::Pretrain {
            data,
            seed,
            out,
            log,
            resume,
        } => cmd_pretrain(&cfg, &data, seed, &out, &log, resume.as_deref()),
        Command::Probe {
            data,
            ckpt,
            random_init: _,
            seed,
        } => cmd_probe(&cfg, &data, ckpt.as_deref(), seed),
        Command::Ablate {
            grid,
            data,
            seeds,
            out,
            configs,
            timing,
        } => {
            let cells = parse_grid(&grid, &cfg)?;
            let data = load_dataset(&data)?;
            let report = run_ablation(&cells, &data, &seeds, timing)?;
            write_file(&out, report.to_csv().as_bytes())?;
            if let Some(path) = configs {
                write_file(&path, report.configs_text().as_bytes())?;
            }
            Ok(())
        }
        Command::DataFraction {
            data,
            fractions,
            seeds,
            out,
            timing,
        } => {
            let fractions = fractions.unwrap_or_else(|| DEFAULT_FRACTIONS.to_vec());
            let data = load_dataset(&data)?;
            let report = data_fraction_run(&fractions, &cfg, &data, &seeds, timing)?;
            write_file(&out, report.to_csv().as_bytes())
        }
        Command::Gradcheck { tolerance, step } => cmd_gradcheck(tolerance, step),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_at(path))
}

fn cmd_synth(data_cfg: &c2p_core::synth::DataConfig, seed: u64, out: &Path, xyz: Option<&Path>) -> Result<()> {
    let seqs = make_dataset(data_cfg.sequences, &data_cfg.template(), seed)?;
    create_dir(out)?;
    let mut manifest = String::new();
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("seq_{i:04}.c2ps");
        let path = out.join(&name);
        io::write_sequence(&path, seq).map_err(at(&path))?;
        manifest.push_str(&name);
        manifest.push('\n');
        if let Some(dir) = xyz {
            create_dir(dir)?;
            io::export_xyz(dir, &format!("seq_{i:04}"), seq).map_err(at(dir))?;
        }
    }
    write_file(&out.join(MANIFEST), manifest.as_bytes())
}

/// Sequences listed in `dir/manifest.txt`, in manifest order.
fn load_dataset(dir: &Path) -> Result<Vec<Sequence>> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(io_at(&manifest))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| {
            let path = dir.join(name);
            io::read_sequence(&path).map_err(at(&path))
        })
        .collect()
}

fn cmd_generate(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    seed: u64,
    random_sampling: Option<f64>,
    emit_depth: Option<&Path>,
    xyz: Option<&Path>,
) -> Result<()> {
    let complete = io::read_sequence(input).map_err(at(input))?;
    let partial = match random_sampling {
        Some(ratio) => random_sample_sequence(&complete, ratio, seed)?,
        None => {
            let (partial, traj) = generate_partial_sequence(&complete, &cfg.trajectory, seed)?;
            if let Some(dir) = emit_depth {
                create_dir(dir)?;
                let intr = cfg.trajectory.intrinsics();
                for (t, (frame, entry)) in complete.frames.iter().zip(&traj.entries).enumerate() {
                    let path = dir.join(format!("depth_{t:04}.c2pd"));
                    io::write_depth(&path, &render_depth(frame, &entry.pose, &intr)).map_err(at(&path))?;
                }
            }
            partial
        }
    };
    io::write_sequence(out, &partial).map_err(at(out))?;
    if let Some(dir) = xyz {
        create_dir(dir)?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("partial");
        io::export_xyz(dir, stem, &partial).map_err(at(dir))?;
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, seed: u64, out: &Path, log: &Path, resume: Option<&Path>) -> Result<()> {
    let data = load_dataset(data)?;
    let state = match resume {
        Some(p) => TrainState::from_checkpoint(&io::read_checkpoint(p).map_err(at(p))?)?,
        None => TrainState::new(Model::new(&cfg.encoder, &cfg.distill).init(seed)?),
    };
    let file = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(log)
    } else {
        File::create(log)
    }
    .map_err(io_at(log))?;
    let mut writer = BufWriter::new(file);
    let mut save = |s: &TrainState| io::write_checkpoint(out, &s.to_checkpoint());
    let report = pretrain(&data, cfg, seed, state, &mut writer, &mut save).map_err(|e| match e {
        Error::Io(_) => at(log)(e),
        e => e.into(),
    })?;
    writer.flush().map_err(io_at(log))?;
    io::write_checkpoint(out, &report.state.to_checkpoint()).map_err(at(out))
}

fn cmd_probe(cfg: &RunConfig, data: &Path, ckpt: Option<&Path>, seed: u64) -> Result<()> {
    let data = load_dataset(data)?;
    let params = match ckpt {
        Some(p) => TrainState::from_checkpoint(&io::read_checkpoint(p).map_err(at(p))?)?.params,
        None => Model::new(&cfg.encoder, &cfg.distill).init(seed)?,
    };
    let feats = extract_features(&params, &cfg.encoder, &data)?;
    let result = linear_probe(&feats, &cfg.probe, seed)?;
    println!("acc={}", result.accuracy);
    println!("correct={} total={}", result.correct, result.total);
    for (c, acc) in result.per_class.iter().enumerate() {
        match acc {
            Some(a) => println!("class{c}={a}"),
            None => println!("class{c}=none"),
        }
    }
    Ok(())
}

fn cmd_gradcheck(tolerance: f64, step: f64) -> Result<()> {
    let mut reports = autograd::run_gradcheck_suite(step)?;
    reports.extend(distill::objective_gradcheck(step)?);
    let mut worst: Option<(String, f64)> = None;
    for r in &reports {
        let status = if r.max_rel_error < tolerance { "ok" } else { "FAIL" };
        println!("{status} {} {:e}", r.name, r.max_rel_error);
        if !(r.max_rel_error < tolerance) && worst.is_none() {
            worst = Some((r.name.clone(), r.max_rel_error));
        }
    }
    match worst {
        Some((name, err)) => Err(CliError::Numeric(format!(
            "gradient check failed: {name} has relative error {err:e} (tolerance {tolerance:e})"
        ))),
        None => Ok(()),
    }
}
