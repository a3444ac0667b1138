use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uqd_core::codec::{self, Container, Transform};
use uqd_core::diffusion::{gmm_gaussian_denoiser, gmm_uniform_aware_denoiser, GmmSource, StepPath};
use uqd_core::harness::{
    self, build_denoiser, check_rd_monotone, sample_source, GapReport, NoiseAssumption, SourceSpec, SweepConfig,
    Trials, DEFAULT_T_GRID,
};
use uqd_core::schedule::{Spacing, VarianceSchedule};
use uqd_core::LatentTensor;

/// Dithered-quantization diffusion codec and experiment harness.
#[derive(Parser)]
#[command(name = "uqd", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize at timestep t and entropy-code into a .uqd container.
    Compress(CompressArgs),
    /// Decode a container and denoise it back to t = 0.
    Decompress(DecompressArgs),
    /// Rate and distortion over a timestep grid.
    RdSweep(SweepArgs),
    /// Gap experiments.
    #[command(subcommand)]
    Ablate(Ablation),
    /// Print a variance schedule with its bin widths.
    ScheduleDump(ScheduleDumpArgs),
    /// Draw samples from a source, one per line.
    SourceSample(SourceSampleArgs),
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// `cosine[:N]`, `linear[:N:beta_min:beta_max]` or `file:<path>`.
    #[arg(long, default_value = "cosine")]
    schedule: String,
    /// Restrict the schedule to this many coarse steps.
    #[arg(long)]
    subsample: Option<usize>,
    /// Coarse-step spacing for --subsample: leading or linspace.
    #[arg(long, default_value = "leading")]
    spacing: Spacing,
}

impl ScheduleArgs {
    fn load(&self) -> Result<VarianceSchedule> {
        let vs = VarianceSchedule::from_spec(&self.schedule)?;
        Ok(match self.subsample {
            Some(n) => vs.subsample(n, self.spacing)?,
            None => vs,
        })
    }
}

#[derive(Args, Clone)]
struct TrialArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    trials: usize,
    /// Samples per trial for synthetic sources.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Exit nonzero if the expected ordering does not hold.
    #[arg(long)]
    verify: bool,
}

impl TrialArgs {
    fn trials(&self) -> Trials {
        Trials {
            trials: self.trials,
            samples: self.samples,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// A PGM file, or a synthetic source spec such as `gaussian(0,1)`.
    #[arg(long = "in")]
    input: String,
    #[arg(long)]
    t: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Dither seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `identity` or `dct:<block>`.
    #[arg(long, default_value = "identity")]
    transform: Transform,
    /// Sample count for synthetic sources.
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    /// Seed for synthetic sources.
    #[arg(long, default_value_t = 0)]
    source_seed: u64,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `gaussian`, `uniform`, `gmm:<json>` (uniform-aware) or
    /// `gmm-gaussian:<json>`. The first two fit a Gaussian prior per channel
    /// from the received latent.
    #[arg(long, default_value = "uniform")]
    denoiser: String,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// `direct`, `full`, `<n>[:spacing]` or an explicit list like `40,20,0`.
    #[arg(long, default_value = "direct")]
    ddim_steps: StepPath,
    /// Output file: PGM for single-channel images, otherwise one value per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "gaussian")]
    source: SourceSpec,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_T_GRID)]
    t_grid: Vec<usize>,
    /// Noise family the denoiser assumes: gaussian or uniform.
    #[arg(long, default_value = "uniform")]
    denoiser: NoiseAssumption,
    #[arg(long, default_value = "direct")]
    ddim_steps: StepPath,
    #[arg(long, default_value = "identity")]
    transform: Transform,
    #[command(flatten)]
    trials: TrialArgs,
}

#[derive(Subcommand)]
enum Ablation {
    /// Quantize at t_s, denoise assuming t_r, over a full grid.
    NoiseLevel {
        #[arg(long, default_value = "gaussian")]
        source: SourceSpec,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_T_GRID)]
        ts_grid: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_T_GRID)]
        tr_grid: Vec<usize>,
        #[arg(long, default_value = "gaussian")]
        denoiser: NoiseAssumption,
        #[command(flatten)]
        trials: TrialArgs,
    },
    /// Uniform-aware versus Gaussian-assumption denoising.
    NoiseType {
        #[arg(long, default_value = "gmm")]
        source: SourceSpec,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_T_GRID)]
        t_grid: Vec<usize>,
        #[command(flatten)]
        trials: TrialArgs,
    },
    /// Universal versus hard quantization into the same denoiser.
    Discretization {
        #[arg(long, default_value = "gmm")]
        source: SourceSpec,
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_T_GRID)]
        t_grid: Vec<usize>,
        #[arg(long, default_value = "uniform")]
        denoiser: NoiseAssumption,
        #[command(flatten)]
        trials: TrialArgs,
    },
}

#[derive(Args)]
struct ScheduleDumpArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Emit the plain-text schedule file format instead of CSV.
    #[arg(long)]
    text: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SourceSampleArgs {
    #[arg(long)]
    source: SourceSpec,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Returns `false` when `--verify` found a violation.
fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Compress(a) => compress(a).map(|_| true),
        Cmd::Decompress(a) => decompress(a).map(|_| true),
        Cmd::RdSweep(a) => rd_sweep(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::ScheduleDump(a) => schedule_dump(a).map(|_| true),
        Cmd::SourceSample(a) => source_sample(a).map(|_| true),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_input(input: &str, samples: usize, seed: u64) -> Result<LatentTensor> {
    let spec = if Path::new(input).is_file() {
        SourceSpec::Pgm(PathBuf::from(input))
    } else {
        input.parse()?
    };
    Ok(sample_source(&spec, samples, seed)?)
}

fn compress(a: CompressArgs) -> Result<()> {
    let vs = a.schedule.load()?;
    let x = load_input(&a.input, a.samples, a.source_seed)?;
    let c = codec::compress(&x, a.t, &vs, a.transform, a.seed)?;
    c.write(&a.out)?;
    let r = codec::rate_of(&c);
    eprintln!(
        "{} samples, {:.4} payload + {:.4} header bits/sample",
        r.samples,
        r.payload_bits_per_sample(),
        r.header_bits_per_sample()
    );
    Ok(())
}

fn decompress(a: DecompressArgs) -> Result<()> {
    let vs = a.schedule.load()?;
    let c = Container::read(&a.input)?;
    let t = c.t as usize;
    let y_t = codec::receive_latent(&c, &vs)?;
    let d = match a.denoiser.as_str() {
        "gaussian" => build_denoiser(NoiseAssumption::Gaussian, None, &vs, &y_t, t)?,
        "uniform" => build_denoiser(NoiseAssumption::Uniform, None, &vs, &y_t, t)?,
        other => match other.split_once(':') {
            Some(("gmm", path)) => gmm_uniform_aware_denoiser(GmmSource::load(path)?, vs.quantization_schedule()),
            Some(("gmm-gaussian", path)) => gmm_gaussian_denoiser(GmmSource::load(path)?),
            _ => bail!("unknown denoiser `{other}`"),
        },
    };
    let r = codec::reconstruct(&c, &y_t, &d, &vs, &a.ddim_steps)?;
    if r.fallbacks > 0 {
        eprintln!("warning: {} elements used the out-of-support fallback", r.fallbacks);
    }
    let img = &r.output;
    match img.shape() {
        [1, _, _] | [_, _] => codec::write_pgm(&a.out, img)?,
        _ => {
            let mut w = output(Some(&a.out))?;
            for v in img.values() {
                writeln!(w, "{v:e}")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn report_violations(verify: bool, violations: &[String]) -> bool {
    for v in violations {
        eprintln!("violation: {v}");
    }
    !(verify && !violations.is_empty())
}

fn rd_sweep(a: SweepArgs) -> Result<bool> {
    let vs = a.schedule.load()?;
    let cfg = SweepConfig {
        denoiser: a.denoiser,
        path: a.ddim_steps,
        transform: a.transform,
        trials: a.trials.trials(),
    };
    let points = harness::rd_sweep(&a.source, &vs, &a.t_grid, &cfg)?;
    let mut w = output(a.trials.csv.as_deref())?;
    harness::rd_points_csv(&points, &mut w)?;
    w.flush()?;
    let violations = if a.trials.verify { check_rd_monotone(&points) } else { Vec::new() };
    Ok(report_violations(a.trials.verify, &violations))
}

fn ablate(a: Ablation) -> Result<bool> {
    let (report, trials): (GapReport, TrialArgs) = match a {
        Ablation::NoiseLevel {
            source,
            schedule,
            ts_grid,
            tr_grid,
            denoiser,
            trials,
        } => {
            let vs = schedule.load()?;
            let r = harness::ablate_noise_level(&source, &vs, &ts_grid, &tr_grid, denoiser, &trials.trials())?;
            (r, trials)
        }
        Ablation::NoiseType {
            source,
            schedule,
            t_grid,
            trials,
        } => {
            let vs = schedule.load()?;
            (harness::ablate_noise_type(&source, &vs, &t_grid, &trials.trials())?, trials)
        }
        Ablation::Discretization {
            source,
            schedule,
            t_grid,
            denoiser,
            trials,
        } => {
            let vs = schedule.load()?;
            let r = harness::ablate_discretization(&source, &vs, &t_grid, denoiser, &trials.trials())?;
            (r, trials)
        }
    };
    let mut w = output(trials.csv.as_deref())?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let violations = if trials.verify { report.violations() } else { Vec::new() };
    Ok(report_violations(trials.verify, &violations))
}

fn schedule_dump(a: ScheduleDumpArgs) -> Result<()> {
    let vs = a.schedule.load()?;
    let mut w = output(a.out.as_deref())?;
    if a.text {
        w.write_all(vs.to_text().as_bytes())?;
    } else {
        writeln!(w, "t,alpha_bar,delta,snr")?;
        for t in 0..=vs.n_steps() {
            let snr = vs.snr_theoretical(t, 1.0)?;
            writeln!(w, "{t},{:.16e},{:.16e},{:.16e}", vs.alpha_bar(t)?, vs.delta_at(t)?, snr.value())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn source_sample(a: SourceSampleArgs) -> Result<()> {
    let x = sample_source(&a.source, a.n, a.seed)?;
    let mut w = output(a.out.as_deref())?;
    for v in x.values() {
        writeln!(w, "{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}
