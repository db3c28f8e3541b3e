use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dvfl::config::{ConfigError, HeMode, RunConfig, RunRole};
use dvfl::data::{self, DataError, VerticalSplitSpec};
use dvfl::nn::{NnError, SplitModel, WeightVector};
use dvfl::orchestrator::{self, BenchSweep, RunError};
use dvfl::psi::{distributed_psi, IdSet, PsiConfig};
use dvfl::transport::TcpChannel;

#[derive(Parser)]
#[command(name = "dvfl", version, about = "Distributed vertical federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Intersect the ids of two party files.
    Psi(PsiArgs),
    /// Split a dataset column-wise into active and passive party files.
    Split(SplitArgs),
    /// Train a split model from a TOML run configuration.
    Train(TrainArgs),
    /// Sweep worker counts and HE settings and write a CSV report.
    Bench(BenchArgs),
    /// Evaluate a checkpoint on aligned test files.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PsiArgs {
    #[arg(long)]
    active: PathBuf,
    #[arg(long)]
    passive: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 1e-6)]
    fp: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Columns `start:end` kept by the active party; the rest go passive.
    #[arg(long)]
    active_cols: Option<String>,
    #[arg(long)]
    min_dim: Option<usize>,
    #[arg(long)]
    out_active: PathBuf,
    #[arg(long)]
    out_passive: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Active,
    Passive,
    Local,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the role in the configuration.
    #[arg(long, value_enum)]
    role: Option<RoleArg>,
}

#[derive(Args)]
struct BenchArgs {
    /// Base configuration; data paths are taken from it unless given here.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=v1,v2` pairs over workers, he, key_bits and rows.
    #[arg(long, num_args = 1.., value_delimiter = ' ')]
    sweep: Vec<String>,
    #[arg(long)]
    active: Option<PathBuf>,
    #[arg(long)]
    passive: Option<PathBuf>,
    /// Repeat both datasets this many times with per-copy id prefixes.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    replicate: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// One full checkpoint, or the active and passive halves.
    #[arg(long, num_args = 1.., required = true)]
    model: Vec<PathBuf>,
    #[arg(long)]
    test_active: PathBuf,
    #[arg(long)]
    test_passive: PathBuf,
    #[arg(long)]
    min_dim: Option<usize>,
    /// Also time HE-on inference over this many rows.
    #[arg(long, default_value_t = 0)]
    he_rows: usize,
    #[arg(long, default_value_t = dvfl::paillier::DEFAULT_KEY_BITS)]
    key_bits: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), RunError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn ids_of_file(path: &Path) -> Result<IdSet, RunError> {
    Ok(data::ids_of(&data::load_any(path, None)?))
}

fn cmd_psi(a: PsiArgs) -> Result<(), RunError> {
    if a.workers == 0 {
        return Err(ConfigError::Invalid("--workers must be at least 1".into()).into());
    }
    let mut cfg = PsiConfig {
        fp_target: a.fp,
        ..PsiConfig::default()
    };
    if let Some(seed) = a.seed {
        cfg.partition_seed = seed;
    }
    let active = ids_of_file(&a.active)?;
    let passive = ids_of_file(&a.passive)?;
    let t = std::time::Instant::now();
    let result = distributed_psi(&active, &passive, a.workers, &cfg)?;
    let secs = t.elapsed().as_secs_f64();
    let ids = result.into_sorted_vec();
    write_file(&a.out, |w| {
        for id in &ids {
            w.write_all(id)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    eprintln!(
        "{} common ids out of {} x {} in {secs:.3} s ({:.0} items/s)",
        ids.len(),
        active.len(),
        passive.len(),
        (active.len() + passive.len()) as f64 / secs.max(1e-9)
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<(), RunError> {
    let records = data::load_any(&a.input, a.min_dim)?;
    let dim = data::feature_dim(&records);
    let spec = match &a.active_cols {
        Some(r) => VerticalSplitSpec::parse_range(r, dim)?,
        None => VerticalSplitSpec::halves(dim),
    };
    let (act, pas) = data::vertical_split(&records, &spec)?;
    data::save_csv(&a.out_active, &act, true)?;
    data::save_csv(&a.out_passive, &pas, false)?;
    eprintln!(
        "{} rows: {} active columns, {} passive columns",
        records.len(),
        spec.active_cols.len(),
        spec.passive_cols.len()
    );
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, RunError> {
    p.as_deref()
        .ok_or_else(|| ConfigError::Invalid(format!("data.{what} is required for this role")).into())
}

fn save_checkpoint(path: &Path, w: &WeightVector) -> Result<(), RunError> {
    std::fs::write(path, w.to_checkpoint()).map_err(io_err(path))
}

fn cmd_train(a: TrainArgs) -> Result<(), RunError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(role) = a.role {
        cfg.role = match role {
            RoleArg::Active => RunRole::Active,
            RoleArg::Passive => RunRole::Passive,
            RoleArg::Local => RunRole::Local,
        };
    }
    let min_dim = cfg.data.min_dim;
    match cfg.role {
        RunRole::Local => {
            let act = data::load_any(required(&cfg.data.active, "active")?, min_dim)?;
            let pas = data::load_any(required(&cfg.data.passive, "passive")?, min_dim)?;
            let run = orchestrator::run_local(&cfg, &act, &pas)?;
            report_training(&cfg, run.intersection, run.psi_seconds, run.train_seconds, &run.metrics)?;
            if let Some(path) = &cfg.output.checkpoint {
                save_checkpoint(path, &run.model.weights())?;
            }
            if let (Some(ta), Some(tp)) = (&cfg.data.test_active, &cfg.data.test_passive) {
                let report = orchestrator::evaluate(&run.model, &data::load_any(ta, min_dim)?, &data::load_any(tp, min_dim)?)?;
                print_eval(&report);
            }
        }
        RunRole::Active => {
            let act = data::load_any(required(&cfg.data.active, "active")?, min_dim)?;
            let channels = (0..cfg.n_workers)
                .map(|i| TcpChannel::connect_retry(cfg.endpoints.peer.as_str(), i, 100))
                .collect::<Result<Vec<_>, _>>()?;
            let out = orchestrator::run_active_party(&cfg, &act, channels)?;
            report_training(&cfg, out.intersection, out.psi_seconds, out.train_seconds, &out.metrics)?;
            if let Some(path) = &cfg.output.checkpoint {
                save_checkpoint(path, &out.model.weights())?;
            }
        }
        RunRole::Passive => {
            let pas = data::load_any(required(&cfg.data.passive, "passive")?, min_dim)?;
            let listener = TcpListener::bind(cfg.endpoints.peer.as_str()).map_err(dvfl::transport::TransportError::from)?;
            let channels = TcpChannel::accept_pairs(&listener, cfg.n_workers)?;
            let out = orchestrator::run_passive_party(&cfg, &pas, channels)?;
            eprintln!("passive party done; {} common ids", out.intersection);
            if let Some(path) = &cfg.output.checkpoint {
                save_checkpoint(path, &out.model.weights())?;
            }
        }
    }
    Ok(())
}

fn report_training(
    cfg: &RunConfig,
    intersection: usize,
    psi_s: f64,
    train_s: f64,
    metrics: &[orchestrator::StepMetrics],
) -> Result<(), RunError> {
    let losses = orchestrator::round_losses(metrics);
    eprintln!(
        "{intersection} common ids; PSI {psi_s:.3} s; {} rounds in {train_s:.3} s; final loss {}",
        losses.len(),
        losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    if let Some(path) = &cfg.output.metrics {
        write_file(path, |w| orchestrator::write_metrics_csv(w, metrics))?;
    }
    Ok(())
}

fn parse_list<T>(key: &str, values: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, RunError> {
    values
        .split(',')
        .map(|v| f(v.trim()).ok_or_else(|| ConfigError::Invalid(format!("bad {key} value {v:?}")).into()))
        .collect()
}

fn parse_sweep(items: &[String]) -> Result<BenchSweep, RunError> {
    let mut sweep = BenchSweep {
        workers: vec![1, 2, 4, 8],
        he: vec![HeMode::Off, HeMode::On],
        key_bits: vec![dvfl::paillier::DEFAULT_KEY_BITS],
        rows: vec![None],
    };
    for item in items.iter().flat_map(|s| s.split_whitespace()) {
        let (key, values) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::Invalid(format!("sweep item {item:?} is not key=values")))?;
        match key {
            "workers" => sweep.workers = parse_list(key, values, |v| v.parse().ok().filter(|&n: &usize| n > 0))?,
            "he" => {
                sweep.he = parse_list(key, values, |v| match v {
                    "on" => Some(HeMode::On),
                    "off" => Some(HeMode::Off),
                    _ => None,
                })?
            }
            "key_bits" => sweep.key_bits = parse_list(key, values, |v| v.parse().ok())?,
            "rows" => {
                sweep.rows = parse_list(key, values, |v| match v {
                    "all" => Some(None),
                    _ => v.parse().ok().map(Some),
                })?
            }
            _ => return Err(ConfigError::Invalid(format!("unknown sweep key {key:?}")).into()),
        }
    }
    Ok(sweep)
}

fn cmd_bench(a: BenchArgs) -> Result<(), RunError> {
    let base = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let sweep = parse_sweep(&a.sweep)?;
    let active_path = a.active.clone().or_else(|| base.data.active.clone());
    let passive_path = a.passive.clone().or_else(|| base.data.passive.clone());
    let act = data::load_any(required(&active_path, "active")?, base.data.min_dim)?;
    let pas = data::load_any(required(&passive_path, "passive")?, base.data.min_dim)?;
    let (act, pas) = match a.replicate as usize {
        1 => (act, pas),
        k => (data::replicate(&act, k), data::replicate(&pas, k)),
    };
    let rows = orchestrator::bench(&base, &sweep, &act, &pas);
    write_file(&a.out, |w| orchestrator::write_bench_csv(w, &rows))?;
    for r in &rows {
        eprintln!(
            "workers={} he={:?} key_bits={} rows={}: {:.1} rows/s, {}",
            r.workers, r.he, r.key_bits, r.rows, r.rows_per_s, r.status
        );
    }
    Ok(())
}

fn load_model(paths: &[PathBuf]) -> Result<SplitModel, RunError> {
    let mut weights: Option<WeightVector> = None;
    for p in paths {
        let bytes = std::fs::read(p).map_err(io_err(p))?;
        let w = WeightVector::from_checkpoint(&bytes).map_err(|e| NnError::Checkpoint(format!("{}: {e}", p.display())))?;
        weights = Some(match weights {
            None => w,
            Some(acc) => acc.concat(&w),
        });
    }
    Ok(SplitModel::from_weights(&weights.expect("clap requires one model"))?)
}

fn print_eval(r: &orchestrator::EvalReport) {
    println!("rows {}", r.rows);
    println!("accuracy {:.6}", r.accuracy);
    println!("auc {:.6}", r.auc);
    println!("ms_per_row {:.6}", r.ms_per_row);
}

fn cmd_eval(a: EvalArgs) -> Result<(), RunError> {
    let model = load_model(&a.model)?;
    let act = data::load_any(&a.test_active, a.min_dim)?;
    let pas = data::load_any(&a.test_passive, a.min_dim)?;
    print_eval(&orchestrator::evaluate(&model, &act, &pas)?);
    if a.he_rows > 0 {
        let ms = orchestrator::secure_inference_ms_per_row(
            &model,
            &act,
            &pas,
            a.key_bits,
            dvfl::paillier::DEFAULT_FRAC_BITS,
            a.he_rows,
        )?;
        println!("he_ms_per_row {ms:.6}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Psi(a) => cmd_psi(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_parsing() {
        let s = parse_sweep(&["workers=1,2,4,8 he=off,on".into(), "rows=100,all".into()]).unwrap();
        assert_eq!(s.workers, vec![1, 2, 4, 8]);
        assert_eq!(s.he, vec![HeMode::Off, HeMode::On]);
        assert_eq!(s.rows, vec![Some(100), None]);
        assert_eq!(parse_sweep(&["he=maybe".into()]).unwrap_err().exit_code(), 2);
        assert_eq!(parse_sweep(&["speed=1".into()]).unwrap_err().exit_code(), 2);
        assert!(parse_sweep(&["workers=0".into()]).is_err());
    }
}
