use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semidense::coarse::MatchMode;
use semidense::config::read_kv;
use semidense::error::Error;
use semidense::eval::{bench_pipeline, evaluate};
use semidense::geometry::RansacParams;
use semidense::io::{self, MatchDump, WeightContainer};
use semidense::model::Matcher;
use semidense::synth::{generate_pair, pair_seed};
use semidense::train::{train_toy, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "semidense", version, about = "Semi-dense image matching on CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match two images and write the refined correspondences as CSV.
    Match(MatchArgs),
    /// Generate synthetic (image A, image B, homography) triples.
    Synth(SynthArgs),
    /// Train the toy model on a synthetic dataset directory.
    TrainToy(TrainArgs),
    /// Homography AUC over a dataset directory.
    EvalHomography(EvalArgs),
    /// Per-stage timing on one image pair.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Pair {
    #[arg(long)]
    image_a: PathBuf,
    #[arg(long)]
    image_b: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    pair: Pair,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "full")]
    mode: MatchMode,
    /// Confidence threshold; defaults to the model's.
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long, default_value = "matches.csv")]
    out: PathBuf,
    /// Side-by-side PPM with match lines.
    #[arg(long)]
    viz: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key = value` file; see the README for keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "full")]
    mode: MatchMode,
    /// RANSAC seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-pair CSV report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pair: Pair,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "full")]
    mode: MatchMode,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn load_model(path: &Path) -> Result<(Matcher, String), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let wc = io::decode_weights(&bytes, path)?;
    Ok((Matcher::from_container(&wc)?, io::model_hash(&bytes)))
}

fn dims(t: &[usize]) -> (usize, usize) {
    (t[2], t[1])
}

fn run_match(a: MatchArgs) -> Result<(), Error> {
    let (matcher, hash) = load_model(&a.weights)?;
    let ia = io::load_image(&a.pair.image_a)?;
    let ib = io::load_image(&a.pair.image_b)?;
    let tau = a.tau.unwrap_or(matcher.config().tau);
    let out = matcher.run_with_tau(&ia, &ib, a.mode, tau)?;
    let dump = MatchDump::new(dims(ia.shape()), dims(ib.shape()), a.mode, hash, &out.matches);
    io::write_atomic(&a.out, dump.to_csv().as_bytes())?;
    if let Some(v) = &a.viz {
        io::write_atomic(v, &io::render_matches(&ia, &ib, &out.matches)?.encode())?;
    }
    eprintln!("{} matches -> {}", out.matches.len(), a.out.display());
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<(), Error> {
    if a.size < 8 {
        return Err(Error::Config(format!("size {} is below 8", a.size)));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    for i in 0..a.count {
        let p = generate_pair(a.size, pair_seed(a.seed, i));
        io::save_pair(&a.out, i, &p.a, &p.b, &p.h)?;
    }
    eprintln!("{} pairs -> {}", a.count, a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Error> {
    let kv = match &a.config {
        Some(p) => read_kv(p)?,
        None => Default::default(),
    };
    let mut cfg = TrainConfig::from_pairs(&kv).map_err(|e| match (e, &a.config) {
        (Error::Config(d), Some(p)) => Error::Config(format!("{}: {d}", p.display())),
        (e, _) => e,
    })?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = io::load_dataset(&a.data)?;
    let out = train_toy(&data, &cfg, |r| {
        if r.step % 100 == 0 {
            eprintln!("step {:>5}  l_c {:.4}  l_f1 {:.4}  l_f2 {:.4}  total {:.4}", r.step, r.l_c, r.l_f1, r.l_f2, r.total);
        }
    })?;
    let mut wc = WeightContainer { params: out.params, ..Default::default() };
    wc.meta.extend(cfg.model.to_pairs());
    wc.meta.insert("train_steps".into(), cfg.steps.to_string());
    wc.meta.insert("train_seed".into(), cfg.seed.to_string());
    let curve = a.curve.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    });
    io::write_atomic(&curve, io::loss_curve_csv(&out.curve).as_bytes())?;
    io::save_weights(&a.out, &wc)?;
    eprintln!("weights -> {}, loss curve -> {}", a.out.display(), curve.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Error> {
    let (matcher, _) = load_model(&a.weights)?;
    let data = io::load_dataset(&a.data)?;
    let ransac = RansacParams { seed: a.seed, ..Default::default() };
    let rep = evaluate(&matcher, &data, a.mode, &ransac)?;
    if let Some(p) = &a.out {
        io::write_atomic(p, rep.to_csv().as_bytes())?;
    }
    print!("{rep}");
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), Error> {
    let (matcher, _) = load_model(&a.weights)?;
    let ia = io::load_image(&a.pair.image_a)?;
    let ib = io::load_image(&a.pair.image_b)?;
    if a.repetitions == 0 {
        return Err(Error::Config("--repetitions must be at least 1".into()));
    }
    print!("{}", bench_pipeline(&matcher, &ia, &ib, a.mode, a.repetitions, a.warmup)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Command::Match(a) => run_match(a),
        Command::Synth(a) => run_synth(a),
        Command::TrainToy(a) => run_train(a),
        Command::EvalHomography(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
