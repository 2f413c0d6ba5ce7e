use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand, ValueEnum};

use ripple_core::analysis::{
    bench_kernels, macs_sweep, write_bench_csv, write_macs_csv, AttentionModel, MacScope,
};
use ripple_core::dsp::{istft, stft, wav, StftConfig};
use ripple_core::model::gradcheck::{check_gradients, tiny_problem, GradCheckOptions};
use ripple_core::model::{self, forward, ModelConfig};
use ripple_core::pattern::{build_mask, PatternSpec};
use ripple_core::targets::{apply_mask, MaskMatrix, Objective};
use ripple_core::train::{make_synthetic_mixture, train, RunConfig};
use ripple_core::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "ripple",
    version,
    about = "Ripple sparse attention speech enhancement toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an attention mask as PBM plus a row-degree CSV.
    MaskDump(MaskDumpArgs),
    /// Theoretical MAC table over sequence lengths.
    Macs(MacsArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Train on synthetic mixtures.
    Train(TrainArgs),
    /// Enhance a 16 kHz mono WAV with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Time the dense and sparse attention kernels.
    Bench(BenchArgs),
    /// Write synthetic clean/noise/noisy WAV triples.
    MakeData(MakeDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Full,
    Band,
    Ripple,
    Blockwise,
}

#[derive(clap::Args)]
struct MaskDumpArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long = "L")]
    len: usize,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    /// PBM output (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row-degree CSV output (defaults to `<out>.degrees.csv` when --out is given).
    #[arg(long)]
    degrees: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MacsArgs {
    /// Lengths as `start:stop:step` or a comma list.
    #[arg(long = "L", default_value = "100:3000:100")]
    lens: String,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,blockwise:50,ripple:12:24,sepformer:50"
    )]
    patterns: Vec<String>,
    #[arg(long, default_value = "attention")]
    scope: String,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 1024)]
    d_ff: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use the tiny model (the only size supported).
    #[arg(long, default_value_t = true)]
    tiny: bool,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// key=value run description; defaults to the toy configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[arg(long, default_value = "loss.csv")]
    loss_csv: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long = "L", default_value = "500,1000,2000")]
    lens: String,
    #[arg(long, value_delimiter = ',', default_value = "ripple:12:24")]
    patterns: Vec<String>,
    #[arg(long, default_value_t = 256)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MakeDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    snr: f64,
}

/// Marks an error as caused by input data (exit code 2).
#[derive(Debug)]
struct DataError(String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug)]
struct GradcheckFailed(f64);

impl fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradient check failed: max relative error {:e} > {GRADCHECK_TOLERANCE:e}",
            self.0
        )
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    if err.downcast_ref::<DataError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => 3,
        Some(Error::InvalidConfig(_) | Error::InvalidPattern(_) | Error::ZeroStep) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<io::Error>().is_some() => 2,
        None => 1,
    }
}

fn data<T, E>(r: Result<T, E>, what: impl FnOnce() -> String) -> anyhow::Result<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    r.map_err(|e| anyhow::Error::new(e).context(DataError(what())))
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(data(File::create(p), || {
            format!("cannot create {}", p.display())
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn parse_lens(s: &str) -> anyhow::Result<Vec<usize>> {
    let bad = || anyhow!(Error::InvalidConfig(format!("bad length list `{s}`")));
    let lens: Vec<usize> = if let Some((a, rest)) = s.split_once(':') {
        let (b, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let (a, b, step): (usize, usize, usize) = (
            a.parse().map_err(|_| bad())?,
            b.parse().map_err(|_| bad())?,
            step.parse().map_err(|_| bad())?,
        );
        if step == 0 || a > b {
            return Err(bad());
        }
        (a..=b).step_by(step).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<anyhow::Result<_>>()?
    };
    if lens.is_empty() || lens.contains(&0) {
        return Err(bad());
    }
    Ok(lens)
}

fn mask_spec(a: &MaskDumpArgs) -> anyhow::Result<PatternSpec> {
    let need = |v: Option<usize>, flag: &str| {
        v.ok_or_else(|| {
            anyhow!(Error::InvalidPattern(format!(
                "--{flag} is required for this kind"
            )))
        })
    };
    Ok(match a.kind {
        Kind::Full => PatternSpec::Full,
        Kind::Band => PatternSpec::band(need(a.w, "w")?)?,
        Kind::Ripple => PatternSpec::ripple(need(a.w, "w")?, need(a.d, "d")?)?,
        Kind::Blockwise => PatternSpec::blockwise(need(a.block, "block")?)?,
    })
}

fn mask_dump(a: MaskDumpArgs) -> anyhow::Result<()> {
    let spec = mask_spec(&a)?;
    let mask = build_mask(&spec, a.len)?;
    let mut out = output(&a.out)?;
    mask.write_pbm(&mut out)?;
    out.flush()?;
    let degrees = a.degrees.or_else(|| {
        a.out.as_ref().map(|p| {
            let mut s = p.clone().into_os_string();
            s.push(".degrees.csv");
            PathBuf::from(s)
        })
    });
    if let Some(p) = degrees {
        let f = data(File::create(&p), || {
            format!("cannot create {}", p.display())
        })?;
        let mut w = BufWriter::new(f);
        mask.write_degree_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn macs(a: MacsArgs) -> anyhow::Result<()> {
    let lens = parse_lens(&a.lens)?;
    let models: Vec<AttentionModel> = a
        .patterns
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_, _>>()?;
    let scope: MacScope = a.scope.parse()?;
    let cfg = ModelConfig {
        blocks: a.blocks,
        heads: 1,
        d_model: a.d_model,
        d_ff: a.d_ff,
        bins: 1,
        pattern: PatternSpec::Full,
    };
    cfg.validate()?;
    let rows = macs_sweep(&models, &lens, &cfg, scope)?;
    let mut out = output(&a.out)?;
    write_macs_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if !a.tiny {
        return Err(anyhow!(Error::InvalidConfig(
            "only the tiny model is supported".into()
        )));
    }
    let (params, input, target) = tiny_problem(a.seed)?;
    let opts = GradCheckOptions {
        corrupt_analytic: a.corrupt_gradient,
        ..Default::default()
    };
    let r = check_gradients(&params, &input, &target, opts)?;
    println!(
        "max_rel_error {:.6e} at {}[{}] over {} entries",
        r.max_rel_error, r.worst.0, r.worst.1, r.checked
    );
    if r.max_rel_error <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(GradcheckFailed(r.max_rel_error).into())
    }
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut run = match &a.config {
        Some(p) => {
            let text = data(fs::read_to_string(p), || {
                format!("cannot read {}", p.display())
            })?;
            data(RunConfig::from_text(&text), || {
                format!("bad run config {}", p.display())
            })?
        }
        None => RunConfig::toy(a.objective.unwrap_or(Objective::Irm)),
    };
    if let Some(o) = a.objective {
        run.train.objective = o;
    }
    if let Some(s) = a.steps {
        run.train.steps = s;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    let quiet = a.quiet;
    let outcome = train(&run, |r| {
        if !quiet && (r.step == 1 || r.step % 50 == 0) {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    data(model::save(&outcome.params, &a.out), || {
        format!("cannot write {}", a.out.display())
    })?;
    let f = data(File::create(&a.loss_csv), || {
        format!("cannot create {}", a.loss_csv.display())
    })?;
    let mut w = BufWriter::new(f);
    outcome.write_loss_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn enhance(a: EnhanceArgs) -> anyhow::Result<()> {
    let params = data(model::load(&a.model), || {
        format!("cannot load model {}", a.model.display())
    })?;
    let noisy = data(wav::read(&a.input), || {
        format!("cannot read {}", a.input.display())
    })?;
    let cfg = StftConfig::for_bins(params.config.bins)?;
    let spec = data(stft(&noisy, &cfg), || {
        format!("{} is too short", a.input.display())
    })?;
    let cache = forward(&params, &spec.magnitude())?;
    let mask = MaskMatrix::new(cache.output().clone(), Objective::Irm)?;
    let estimate = istft(&apply_mask(&spec, &mask)?)?;
    data(wav::write(&a.out, &estimate), || {
        format!("cannot write {}", a.out.display())
    })?;
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let lens = parse_lens(&a.lens)?;
    let specs: Vec<PatternSpec> = a
        .patterns
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_, _>>()?;
    let rows = bench_kernels(&specs, &lens, a.d_model, a.heads, a.repetitions, a.seed)?;
    let mut out = output(&a.out)?;
    write_bench_csv(&rows, &mut out)?;
    out.flush()?;
    Ok(())
}

fn make_data(a: MakeDataArgs) -> anyhow::Result<()> {
    data(fs::create_dir_all(&a.out_dir), || {
        format!("cannot create {}", a.out_dir.display())
    })?;
    for i in 0..a.count {
        let m = make_synthetic_mixture(a.seed.wrapping_add(i as u64), a.duration, a.snr)?;
        for (name, w) in [
            ("clean", &m.clean),
            ("noise", &m.noise),
            ("noisy", &m.noisy),
        ] {
            let path = a.out_dir.join(format!("{i:04}_{name}.wav"));
            data(wav::write(&path, w), || {
                format!("cannot write {}", path.display())
            })?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MaskDump(a) => mask_dump(a),
        Command::Macs(a) => macs(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Enhance(a) => enhance(a),
        Command::Bench(a) => bench(a),
        Command::MakeData(a) => make_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
