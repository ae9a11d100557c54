use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use bdce::imaging::{load_png, psnr, save_png, ssim, Image};
use bdce::models::{NetParams, Networks};
use bdce::selfcheck::run_selfcheck;
use bdce::training::{enhance, train, EnhanceOptions, LossRecord, TrainConfig};
use bdce::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bdce", version, about = "Low-light enhancement by diffusion-refined curve estimation")]
struct Cli {
    /// Seed for training draws and diffusion sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 forces deterministic scheduling. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all networks on synthetic pairs made from a directory of clean PNGs.
    Train {
        config: PathBuf,
        out_checkpoint: PathBuf,
        data_dir: PathBuf,
        /// Write the TSV run log here instead of standard output.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        no_diffusion: bool,
        #[arg(long)]
        no_denoiser: bool,
        #[arg(long)]
        no_self_loss: bool,
    },
    /// Enhance one PNG.
    Enhance {
        checkpoint: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// PSNR/SSIM over `<stem>_low.png` / `<stem>_gt.png` pairs.
    Eval {
        checkpoint: PathBuf,
        pairs_dir: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Gradient checks and invariants; exit 1 if any fail.
    Selfcheck {
        /// Seeds per network gradient check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Network vs full-resolution cost across input sizes.
    BenchResolution {
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048])]
        sizes: Vec<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Config the checkpoint was trained with; defaults to `<checkpoint>.cfg` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the initial curves directly instead of sampling.
    #[arg(long)]
    no_diffusion: bool,
    #[arg(long)]
    no_denoiser: bool,
    /// Sampler steps; defaults to the config value.
    #[arg(long)]
    steps: Option<usize>,
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => 2,
            Some(Error::NonFinite(_)) => 3,
            Some(Error::Checkpoint(_)) => 4,
            _ => 1,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

fn fail(code: u8, err: impl Into<anyhow::Error>) -> Failure {
    Failure { code, err: err.into() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail(1, e))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Train {
            config,
            out_checkpoint,
            data_dir,
            log,
            no_diffusion,
            no_denoiser,
            no_self_loss,
        } => {
            let mut cfg = TrainConfig::load(&config).map_err(|e| fail(2, e))?;
            cfg.use_diffusion &= !no_diffusion;
            cfg.use_denoiser &= !no_denoiser;
            cfg.use_self_loss &= !no_self_loss;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_train(cfg, &out_checkpoint, &data_dir, log.as_deref())?;
            Ok(0)
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
            model,
        } => {
            cmd_enhance(&checkpoint, &input, &output, &model, seed)?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            pairs_dir,
            model,
        } => {
            cmd_eval(&checkpoint, &pairs_dir, &model, seed)?;
            Ok(0)
        }
        Command::Selfcheck { seeds } => Ok(cmd_selfcheck(seeds)),
        Command::BenchResolution {
            checkpoint,
            sizes,
            model,
        } => cmd_bench_resolution(&checkpoint, &sizes, &model, seed),
    }
}

fn png_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry.map_err(anyhow::Error::from)?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn log_line(step: u64, r: &LossRecord, wall: Duration) -> String {
    format!(
        "{step}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.3}\n",
        r.simple,
        r.bootstrap,
        r.sup,
        r.self_loss,
        r.total,
        wall.as_secs_f64() * 1e3
    )
}

fn cmd_train(cfg: TrainConfig, out: &Path, data_dir: &Path, log: Option<&Path>) -> CliResult {
    let files = png_files(data_dir)?;
    if files.is_empty() {
        return Err(fail(1, anyhow!("no PNG images in {}", data_dir.display())));
    }
    let cleans = files.iter().map(|p| load_png(p)).collect::<Result<Vec<_>, _>>()?;
    let (c, n, d) = Networks::new(cfg.model_spec(), cfg.timesteps)?.param_counts();
    eprintln!("parameters: curve {c}, noise {n}, denoise {d}");

    let mut sink: Box<dyn std::io::Write> = match log {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    sink.write_all(b"step\tL_simple\tL_bootstrap\tL_sup\tL_self\ttotal\twall_ms\n")
        .map_err(anyhow::Error::from)?;
    let trainer = train(cfg, &cleans, |step, rec, wall| {
        sink.write_all(log_line(step, rec, wall).as_bytes())
            .map_err(|source| Error::Io {
                path: log.map(Path::to_path_buf).unwrap_or_else(|| "<stdout>".into()),
                source,
            })
    })?;
    sink.flush().map_err(anyhow::Error::from)?;

    trainer.nets.save_checkpoint(&trainer.params, out)?;
    let sidecar = config_sidecar(out);
    fs::write(&sidecar, trainer.cfg.to_text()).with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

struct Loaded {
    cfg: TrainConfig,
    nets: Networks,
    params: NetParams<f32>,
}

fn load_model(checkpoint: &Path, args: &ModelArgs) -> CliResult<Loaded> {
    let cfg_path = args.config.clone().or_else(|| {
        let p = config_sidecar(checkpoint);
        p.exists().then_some(p)
    });
    let cfg = match cfg_path {
        Some(p) => TrainConfig::load(&p).map_err(|e| fail(2, e))?,
        None => TrainConfig::default(),
    };
    let nets = Networks::new(cfg.model_spec(), cfg.timesteps)?;
    let params = nets.load_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io { .. } | Error::Checkpoint(_) => fail(4, e),
        e => e.into(),
    })?;
    Ok(Loaded { cfg, nets, params })
}

fn enhance_options(m: &Loaded, args: &ModelArgs, seed: Option<u64>) -> EnhanceOptions {
    let mut sampler = m.cfg.sampler();
    if let Some(n) = args.steps {
        sampler.num_steps = n;
    }
    EnhanceOptions {
        use_diffusion: m.cfg.use_diffusion && !args.no_diffusion,
        use_denoiser: m.cfg.use_denoiser && !args.no_denoiser,
        sampler,
        seed: seed.unwrap_or(m.cfg.seed),
    }
}

fn cmd_enhance(checkpoint: &Path, input: &Path, output: &Path, args: &ModelArgs, seed: Option<u64>) -> CliResult {
    let m = load_model(checkpoint, args)?;
    let img = load_png(input)?;
    let opts = enhance_options(&m, args, seed);
    let out = enhance(&img, &m.nets, &m.params, &m.cfg.schedule()?, &opts)?;
    save_png(&out.image, output)?;
    println!(
        "network stage: {:.3} ms ({} MACs at {}x{})",
        out.network_time.as_secs_f64() * 1e3,
        out.network_macs,
        m.cfg.low_res,
        m.cfg.low_res
    );
    println!(
        "full-resolution stage: {:.3} ms ({} MACs at {}x{})",
        out.full_res_time.as_secs_f64() * 1e3,
        out.full_res_macs,
        img.height(),
        img.width()
    );
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn cmd_eval(checkpoint: &Path, dir: &Path, args: &ModelArgs, seed: Option<u64>) -> CliResult {
    let m = load_model(checkpoint, args)?;
    let opts = enhance_options(&m, args, seed);
    let sched = m.cfg.schedule()?;

    let mut rows: Vec<(String, [f64; 4])> = Vec::new();
    for low_path in png_files(dir)? {
        let name = low_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some(stem) = name.strip_suffix("_low.png") else {
            if !name.ends_with("_gt.png") {
                eprintln!("warning: skipping {name}: not a _low/_gt pair member");
            }
            continue;
        };
        let gt_path = dir.join(format!("{stem}_gt.png"));
        if !gt_path.exists() {
            eprintln!("warning: skipping {name}: no {stem}_gt.png");
            continue;
        }
        let (low, gt) = (load_png(&low_path)?, load_png(&gt_path)?);
        let out: Image = enhance(&low, &m.nets, &m.params, &sched, &opts)?.image;
        rows.push((
            stem.to_string(),
            [psnr(&low, &gt)?, ssim(&low, &gt)?, psnr(&out, &gt)?, ssim(&out, &gt)?],
        ));
    }
    for path in png_files(dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix("_gt.png") {
            if !dir.join(format!("{stem}_low.png")).exists() {
                eprintln!("warning: skipping {name}: no {stem}_low.png");
            }
        }
    }

    let mut table = String::from("pair\tinput_psnr\tinput_ssim\tenhanced_psnr\tenhanced_ssim\n");
    let row = |t: &mut String, name: &str, v: &[f64; 4]| {
        let _ = writeln!(t, "{name}\t{}\t{:.4}\t{}\t{:.4}", fmt_db(v[0]), v[1], fmt_db(v[2]), v[3]);
    };
    for (name, v) in &rows {
        row(&mut table, name, v);
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mut mean = [0.0; 4];
        for (_, v) in &rows {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        row(&mut table, "mean", &mean);
    }
    print!("{table}");
    Ok(())
}

fn cmd_selfcheck(seeds: u64) -> u8 {
    #[cfg(feature = "fault-injection")]
    if std::env::var_os("BDCE_FAULT_TANH_SIGN").is_some() {
        bdce::fault::inject_tanh_backward_sign_error(true);
    }
    let results = run_selfcheck(seeds);
    for r in &results {
        println!("{}\t{}\t{}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        0
    } else {
        eprintln!("failed: {}", failed.join(", "));
        1
    }
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn cmd_bench_resolution(checkpoint: &Path, sizes: &[usize], args: &ModelArgs, seed: Option<u64>) -> CliResult<u8> {
    let m = load_model(checkpoint, args)?;
    let opts = enhance_options(&m, args, seed);
    let sched = m.cfg.schedule()?;
    println!(
        "internal resolution {0}x{0}, sampler steps {1}, diffusion {2}, denoiser {3}",
        m.cfg.low_res,
        if opts.use_diffusion { opts.sampler.num_steps } else { 0 },
        opts.use_diffusion,
        opts.use_denoiser
    );
    println!("size\tnetwork_macs\tnetwork_ms\tfull_res_macs\tfull_res_ms");
    let (mut pixels, mut times, mut macs) = (Vec::new(), Vec::new(), Vec::new());
    for &s in sizes {
        let img = Image::constant(s, s, 0.2);
        let out = enhance(&img, &m.nets, &m.params, &sched, &opts)?;
        println!(
            "{s}x{s}\t{}\t{:.3}\t{}\t{:.3}",
            out.network_macs,
            out.network_time.as_secs_f64() * 1e3,
            out.full_res_macs,
            out.full_res_time.as_secs_f64() * 1e3
        );
        pixels.push((s * s) as f64);
        times.push(out.full_res_time.as_secs_f64());
        macs.push(out.network_macs);
    }
    let same = macs.windows(2).all(|w| w[0] == w[1]);
    println!("network op count identical across sizes: {same}");
    if sizes.len() >= 3 {
        println!("full-res time vs pixels R^2: {:.4}", r_squared(&pixels, &times));
    }
    Ok(if same { 0 } else { 1 })
}
