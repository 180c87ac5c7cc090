use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use rigidtrack::corrupt::NoiseParams;
use rigidtrack::denoise::{
    fit_coefficients, load_denoiser, train_denoiser, DenoiserConfig, DenoiserNet, FitConfig,
    TrainConfig, TrainState, ViewPair,
};
use rigidtrack::geom3d::io::{load_volume, save_transform, save_volume};
use rigidtrack::geom3d::RigidTransform;
use rigidtrack::harness::{
    evaluate, execute_sweep, execute_track, make_phantom_with, replay, simulate_pair, track,
    verify_closedform, verify_so3, verify_steerable, ExperimentConfig, Manifest, Models,
    PairConfig, PhantomTemplate, SweepConfig, TrackingReport,
};
use rigidtrack::steerable::{Ecnn, EcnnConfig};

#[derive(Parser)]
#[command(
    name = "rigidtrack",
    version,
    about = "Rigid motion tracking of 3D volumes with rotation-equivariant features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of phantoms as VOL1 image and mask files.
    Phantom(PhantomArgs),
    /// Simulate one pair of corrupted views of a phantom.
    Simulate(SimulateArgs),
    /// Train the denoiser on a generated corpus.
    TrainDenoiser(ConfigArgs),
    /// Fit the feature network's coefficients on noise-free view pairs.
    FitCoeffs(ConfigArgs),
    /// Track one pair of volumes, or a batch of simulated pairs from a config.
    Track(TrackArgs),
    /// Run the four one-factor sensitivity sweeps.
    Sweep(BatchArgs),
    /// Run the representation, kernel and solver invariant suites.
    Verify(VerifyArgs),
    /// Summarize a tracking report.
    Eval(EvalArgs),
    /// Rerun an experiment from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Grid side length.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    /// Mask size relative to the grid.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Phantoms to generate, with seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseLevel {
    None,
    Test,
    Training,
}

impl NoiseLevel {
    fn params(self) -> NoiseParams {
        match self {
            Self::None => NoiseParams::zero(),
            Self::Test => NoiseParams::test_caps(),
            Self::Training => NoiseParams::training(),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 6)]
    blobs: usize,
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    #[arg(long, default_value_t = 0)]
    phantom_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-axis rotation range, degrees.
    #[arg(long, default_value_t = 45.0)]
    rot: f64,
    /// Per-axis translation range, voxels.
    #[arg(long, default_value_t = 6.0)]
    trans: f64,
    #[arg(long, value_enum, default_value = "test")]
    noise: NoiseLevel,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; see `--print-config` for the schema and defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the default config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Denoiser checkpoint applied to both views.
    #[arg(long)]
    denoiser: Option<PathBuf>,
    /// Saved feature network; otherwise one is built from the config.
    #[arg(long)]
    ecnn: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, requires = "moving", conflicts_with = "config")]
    fixed: Option<PathBuf>,
    #[arg(long, requires = "fixed")]
    moving: Option<PathBuf>,
    /// Seed of the untrained feature network in single-pair mode.
    #[arg(long, default_value_t = 7)]
    ecnn_seed: u64,
    #[command(flatten)]
    batch: BatchArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    rotations: usize,
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Report CSV written by `track` or `sweep`.
    #[arg(long)]
    report: PathBuf,
    /// Optional timing CSV to include wall time in the summary.
    #[arg(long)]
    timing: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Config of `train-denoiser`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    corpus: PhantomTemplate,
    n_train: u64,
    n_heldout: u64,
    corpus_seed: u64,
    net: DenoiserConfig,
    net_seed: u64,
    train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            corpus: PhantomTemplate {
                dims: [32, 32, 32],
                n_blobs: 6,
                extent: 0.8,
            },
            n_train: 200,
            n_heldout: 16,
            corpus_seed: 1000,
            net: DenoiserConfig::default(),
            net_seed: 5,
            train: TrainConfig::default(),
        }
    }
}

/// Config of `fit-coeffs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitRun {
    phantom: PhantomTemplate,
    n_pairs: usize,
    rot_range_deg: f64,
    trans_range_vox: f64,
    seed: u64,
    ecnn: EcnnConfig,
    ecnn_seed: u64,
    fit: FitConfig,
}

impl Default for FitRun {
    fn default() -> Self {
        Self {
            phantom: PhantomTemplate {
                dims: [32, 32, 32],
                n_blobs: 6,
                extent: 0.8,
            },
            n_pairs: 4,
            rot_range_deg: 45.0,
            trans_range_vox: 3.0,
            seed: 0,
            ecnn: EcnnConfig::desk(),
            ecnn_seed: 7,
            fit: FitConfig::default(),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Loads the config and creates the output directory, or prints `default`
/// and returns `None` for `--print-config`.
fn config_and_out<T: Serialize + DeserializeOwned>(
    args: &ConfigArgs,
    default: T,
) -> Result<Option<(T, PathBuf)>> {
    if args.print_config {
        print_json(&default)?;
        return Ok(None);
    }
    let (Some(config), Some(out)) = (&args.config, &args.out) else {
        bail!("--config and --out are required");
    };
    fs::create_dir_all(out)?;
    Ok(Some((read_json(config)?, out.clone())))
}

fn cube(n: usize) -> [usize; 3] {
    [n, n, n]
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let tpl = PhantomTemplate {
        dims: cube(a.dims),
        n_blobs: a.blobs,
        extent: a.extent,
    };
    let mut index = Vec::new();
    for seed in a.seed..a.seed + a.count {
        let p = make_phantom_with(&tpl.spec(seed))?;
        let stem = format!("phantom_{seed}");
        save_volume(&p.image, a.out.join(format!("{stem}_image.vol")))?;
        save_volume(&p.mask, a.out.join(format!("{stem}_mask.vol")))?;
        index.push(
            serde_json::json!({ "name": stem, "spec": p.spec, "blobs": p.blobs, "tries": p.tries }),
        );
    }
    write_json(&a.out.join("phantoms.json"), &index)?;
    eprintln!("wrote {} phantoms to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let tpl = PhantomTemplate {
        dims: cube(a.dims),
        n_blobs: a.blobs,
        extent: a.extent,
    };
    let phantom = make_phantom_with(&tpl.spec(a.phantom_seed))?;
    let cfg = PairConfig {
        rot_range_deg: a.rot,
        trans_range_vox: a.trans,
        noise: a.noise.params(),
        ..PairConfig::noise_free(0.0, 0.0)
    };
    let pair = simulate_pair(&phantom, &cfg, a.seed)?;
    save_volume(&pair.fixed, a.out.join("fixed.vol"))?;
    save_volume(&pair.moving, a.out.join("moving.vol"))?;
    save_volume(&pair.fixed_mask, a.out.join("fixed_mask.vol"))?;
    save_transform(&pair.truth, a.out.join("truth.json"))?;
    write_json(
        &a.out.join("draws.json"),
        &serde_json::json!({ "fixed": pair.fixed_draw, "moving": pair.moving_draw, "pair": cfg }),
    )?;
    Ok(())
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let Some((run, out)) = config_and_out(args, TrainRun::default())? else {
        return Ok(());
    };
    let images = |from: u64, n: u64| -> Result<Vec<_>> {
        (from..from + n)
            .map(|s| Ok(make_phantom_with(&run.corpus.spec(s))?.image))
            .collect()
    };
    let corpus = images(run.corpus_seed, run.n_train)?;
    let heldout = images(run.corpus_seed + run.n_train, run.n_heldout)?;
    let net = DenoiserNet::new(run.net, run.net_seed)?;
    let mut state = TrainState::new(net, run.train.lr, run.train.seed);
    let every = (run.train.steps / 20).max(1) as u64;
    let report = train_denoiser(&corpus, &heldout, &run.train, &mut state, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step}: loss {loss:.6}");
        }
    })?;
    state.save(out.join("denoiser.psi"))?;
    state.write_history_csv(fs::File::create(out.join("history.csv"))?)?;
    write_json(&out.join("config.json"), &run)?;
    write_json(&out.join("train_report.json"), &report)?;
    print_json(&report)
}

fn cmd_fit(args: &ConfigArgs) -> Result<()> {
    let Some((run, out)) = config_and_out(args, FitRun::default())? else {
        return Ok(());
    };
    let cfg = PairConfig::noise_free(run.rot_range_deg, run.trans_range_vox);
    let pairs: Vec<ViewPair> = (0..run.n_pairs as u64)
        .map(|i| {
            let p = make_phantom_with(&run.phantom.spec(run.seed.wrapping_add(i)))?;
            let sim = simulate_pair(&p, &cfg, run.seed.wrapping_add(1 << 32).wrapping_add(i))?;
            Ok((p.image, sim.t1, sim.t2))
        })
        .collect::<Result<_>>()?;
    let mut net = Ecnn::new(run.ecnn.clone(), run.ecnn_seed)?;
    let report = fit_coefficients(&mut net, &pairs, &run.fit)?;
    net.save(out.join("ecnn.model"))?;
    write_json(&out.join("config.json"), &run)?;
    write_json(&out.join("fit_report.json"), &report)?;
    eprintln!(
        "loss {:.6} -> {:.6}",
        report.initial_loss, report.final_loss
    );
    Ok(())
}

fn models(b: &BatchArgs) -> Models<'_> {
    Models {
        denoiser: b.denoiser.as_deref(),
        ecnn: b.ecnn.as_deref(),
    }
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    if let (Some(fixed), Some(moving)) = (&a.fixed, &a.moving) {
        let psi = a.batch.denoiser.as_deref().map(load_denoiser).transpose()?;
        let phi = match &a.batch.ecnn {
            Some(p) => Ecnn::load(p)?,
            None => Ecnn::new(EcnnConfig::desk(), a.ecnn_seed)?,
        };
        let out = track(
            psi.as_ref(),
            &phi,
            &load_volume(fixed)?,
            &load_volume(moving)?,
        )?;
        let t: &RigidTransform = &out.transform;
        match &a.batch.config.out {
            Some(path) => save_transform(t, path)?,
            None => print_json(&t.to_file())?,
        }
        return Ok(());
    }
    let Some((cfg, out)) = config_and_out(&a.batch.config, ExperimentConfig::noise_free_64())?
    else {
        return Ok(());
    };
    let (report, _) = execute_track(&cfg, models(&a.batch), &out)?;
    print_json(&evaluate(&report)?)
}

fn cmd_sweep(b: &BatchArgs) -> Result<()> {
    let default = SweepConfig {
        base: ExperimentConfig {
            n_pairs: 10,
            ..ExperimentConfig::noise_free_64()
        },
        baseline: Default::default(),
        rotation: vec![15.0, 30.0, 45.0, 60.0, 75.0, 90.0],
        translation: vec![2.0, 4.0, 6.0, 8.0],
        bias: vec![0.0, 0.1, 0.2, 0.3],
        noise: vec![0.0, 0.01, 0.03, 0.05],
    };
    let Some((cfg, out)) = config_and_out(&b.config, default)? else {
        return Ok(());
    };
    let (levels, _) = execute_sweep(&cfg, models(b), &out)?;
    for l in &levels {
        let s = evaluate(&l.report)?;
        println!(
            "{:<12} {:>6} rot {:.3} ± {:.3}  trans {:.3} ± {:.3}  dice {:.4}",
            l.factor.name(),
            l.level,
            s.rot_err_deg.mean,
            s.rot_err_deg.std,
            s.trans_err_vox.mean,
            s.trans_err_vox.std,
            s.dice.mean
        );
    }
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let mut rows = verify_so3(a.rotations, a.seed);
    rows.extend(verify_steerable(a.rotations.min(50), a.points, a.seed));
    rows.extend(verify_closedform(a.trials, a.seed)?);
    println!(
        "{:<11} {:<42} {:>12} {:>10}  result",
        "suite", "check", "worst", "tolerance"
    );
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        println!(
            "{:<11} {:<42} {:>12.3e} {:>10.0e}  {}",
            r.suite,
            r.check,
            r.worst,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut report = TrackingReport::read_csv(fs::File::open(&a.report)?)?;
    if let Some(timing) = &a.timing {
        let mut rdr = csv::Reader::from_path(timing)?;
        for (row, rec) in report
            .rows
            .iter_mut()
            .zip(rdr.deserialize::<(usize, f64)>())
        {
            row.seconds = rec?.1;
        }
    }
    print_json(&evaluate(&report)?)
}

fn cmd_replay(a: &ReplayArgs) -> Result<bool> {
    let manifest = Manifest::load(&a.manifest)?;
    let checks = replay(&manifest, &a.out)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.matches();
        println!("{} {}", if c.matches() { "same" } else { "DIFF" }, c.path);
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a)?,
        Command::Simulate(a) => cmd_simulate(&a)?,
        Command::TrainDenoiser(a) => cmd_train(&a)?,
        Command::FitCoeffs(a) => cmd_fit(&a)?,
        Command::Track(a) => cmd_track(&a)?,
        Command::Sweep(a) => cmd_sweep(&a)?,
        Command::Verify(a) => return cmd_verify(&a),
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Replay(a) => return cmd_replay(&a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
