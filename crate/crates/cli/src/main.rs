mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ivt_core::bench::{frame_sweep, write_bench_csv};
use ivt_core::gradcheck::{check_unit_many, Unit};
use ivt_core::synth::{generate, read_manifest, write_manifest, Scene};
use ivt_core::tensor::{read_checkpoint, write_checkpoint};
use ivt_core::train::{decode_and_evaluate, oracle_maps, predict_maps, train, write_history_csv, RunConfig, TrainError};
use ivt_core::{IvtError, ParamStore};

use manifest::Recorder;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const GRAD_TOLERANCE: f64 = 1e-5;
/// Largest projection matrix (in f64 entries) a command will allocate.
const PROJECTION_BUDGET: usize = 1 << 25;

#[derive(Parser)]
#[command(name = "ivt", version, about = "Multi-person video 3D pose pipeline: training, evaluation and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of the differentiable units.
    Gradcheck(GradcheckArgs),
    /// Train on a synthetic scene.
    Train(TrainArgs),
    /// Decode a checkpoint's predictions and score them.
    Eval(EvalArgs),
    /// Forward-pass cost sweep over the clip length.
    Bench(BenchArgs),
    /// Export a synthetic scene manifest.
    Scene(SceneArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Unit name, or `all`.
    #[arg(long, default_value = "all")]
    unit: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Random instances per unit.
    #[arg(long, default_value_t = 1)]
    instances: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Scene manifest; the configured scene is generated when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Overrides `train.threshold`.
    #[arg(long)]
    threshold: Option<f64>,
    /// Score the ground-truth maps instead of model output.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    frames: Vec<usize>,
    /// Overrides `model.scales`.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

#[derive(Args)]
struct SceneArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides `scene.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<IvtError> for Failure {
    fn from(e: IvtError) -> Self {
        let code = match e {
            IvtError::Numeric { .. } => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        IvtError::Io(e).into()
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Scene(a) => cmd_scene(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("IVT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure {
            code: EXIT_USAGE,
            message: format!("IVT_THREADS must be a positive integer, got {raw:?}"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        })
}

fn out_dir(out: &Option<PathBuf>, command: &str) -> std::io::Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| Path::new("ivt-runs").join(command));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_input(rec: &mut Recorder, path: &Path) -> Result<Vec<u8>, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("{}: {e}", path.display()),
    })?;
    rec.input(path.display().to_string(), &bytes);
    Ok(bytes)
}

fn with_path(path: &Path, e: IvtError) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn load_config(rec: &mut Recorder, path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let bytes = read_input(rec, p)?;
            let text = String::from_utf8_lossy(&bytes);
            RunConfig::from_toml(&text).map_err(|e| with_path(p, e))
        }
    }
}

/// Loads the scene manifest when given, adopting its spec into `cfg`;
/// otherwise generates the configured scene.
fn load_scene(rec: &mut Recorder, path: &Option<PathBuf>, cfg: &mut RunConfig) -> Result<Scene, Failure> {
    let scene = match path {
        None => generate(&cfg.scene)?,
        Some(p) => {
            let bytes = read_input(rec, p)?;
            read_manifest(&String::from_utf8_lossy(&bytes)).map_err(|e| with_path(p, e))?
        }
    };
    cfg.scene = scene.spec.clone();
    check_budget(cfg)?;
    Ok(scene)
}

/// Validates `cfg` and rejects geometries whose widest token projection
/// would not fit in memory.
fn check_budget(cfg: &RunConfig) -> Result<(), Failure> {
    cfg.validate()?;
    let s = &cfg.scene;
    let entries = cfg.model.ivt(s.joints, s.channels, s.height, s.width).largest_projection();
    if entries > PROJECTION_BUDGET {
        return Err(IvtError::Config(format!(
            "widest projection needs {entries} entries (budget {PROJECTION_BUDGET}); \
             token width is joints*channels*scale^2, so reduce scene.joints, scene.channels \
             or model.scales (configs/desk.toml is a runnable preset)"
        ))
        .into());
    }
    Ok(())
}

/// Runs `body`, then writes the manifest whatever the outcome.
fn recorded(
    command: &str,
    out: &Option<PathBuf>,
    body: impl FnOnce(&mut Recorder) -> CmdResult,
) -> CmdResult {
    let dir = out_dir(out, command)?;
    let mut rec = Recorder::new(command, &dir);
    let result = body(&mut rec);
    let code = match &result {
        Ok(c) => *c,
        Err(f) => {
            rec.summary("error", &f.message);
            f.code
        }
    };
    let path = rec.finish(code as i32)?;
    eprintln!("manifest: {}", path.display());
    result
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let units: Vec<Unit> = if a.unit == "all" {
        Unit::ALL.to_vec()
    } else {
        vec![a.unit.parse::<Unit>()?]
    };
    if a.instances == 0 {
        return Err(IvtError::Config("--instances must be at least 1".into()).into());
    }
    recorded("gradcheck", &a.out, |rec| {
        rec.manifest.seed = Some(a.seed);
        let mut csv = String::from("unit,max_rel_error,pass\n");
        let mut all_pass = true;
        for unit in units {
            let err = check_unit_many(unit, a.seed, a.instances, a.eps)?;
            let pass = err <= GRAD_TOLERANCE;
            all_pass &= pass;
            println!("{:<10} {err:.3e} {}", unit.name(), if pass { "ok" } else { "FAIL" });
            csv.push_str(&format!("{},{err:e},{pass}\n", unit.name()));
            rec.summary(unit.name(), err);
        }
        rec.artifact("gradcheck.csv", csv.as_bytes())?;
        Ok(if all_pass { 0 } else { EXIT_NUMERIC })
    })
}

fn checkpoint_bytes(params: &ParamStore) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    recorded("train", &a.common.out, |rec| {
        let mut cfg = load_config(rec, &a.common.config)?;
        if let Some(s) = a.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = a.steps {
            cfg.train.steps = n;
        }
        let scene = load_scene(rec, &a.scene, &mut cfg)?;
        rec.manifest.seed = Some(cfg.train.seed);
        rec.manifest.config = Some(cfg.to_toml());
        rec.artifact("config.toml", cfg.to_toml().as_bytes())?;
        rec.artifact("scene.toml", write_manifest(&scene)?.as_bytes())?;

        let (params, history, code) = match train(&scene, &cfg) {
            Ok(run) => (run.params, run.history, 0),
            Err(TrainError::Setup(e)) => return Err(e.into()),
            Err(TrainError::NonFinite {
                step,
                detail,
                last_good,
                history,
            }) => {
                eprintln!("error: training aborted at step {step}: {detail}; last good checkpoint saved");
                rec.summary("aborted_at_step", step);
                rec.summary("error", detail);
                (*last_good, history, EXIT_NUMERIC)
            }
        };
        rec.artifact("checkpoint.ivtc", &checkpoint_bytes(&params)?)?;
        let mut log = Vec::new();
        write_history_csv(&mut log, &history)?;
        rec.artifact("history.csv", &log)?;
        if let (Some(first), Some(last)) = (history.first(), history.last()) {
            rec.summary("initial_loss", first.loss.total);
            rec.summary("final_loss", last.loss.total);
            println!(
                "steps {} loss {:.6} -> {:.6}",
                history.len(),
                first.loss.total,
                last.loss.total
            );
        }
        Ok(code)
    })
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    recorded("eval", &a.common.out, |rec| {
        let mut cfg = load_config(rec, &a.common.config)?;
        if let Some(t) = a.threshold {
            cfg.train.threshold = t;
        }
        let scene = load_scene(rec, &a.scene, &mut cfg)?;
        rec.manifest.seed = Some(cfg.scene.seed);
        rec.manifest.config = Some(cfg.to_toml());
        let maps = if a.oracle {
            oracle_maps(&scene)
        } else {
            let path = a.checkpoint.as_ref().expect("clap requires --checkpoint without --oracle");
            let bytes = read_input(rec, path)?;
            let params = read_checkpoint(&bytes[..]).map_err(|e| with_path(path, e))?;
            let model = cfg.model_for(&params).map_err(|e| with_path(path, e))?;
            predict_maps(&model, &params, &scene, &cfg.train)?
        };
        let (report, _) = decode_and_evaluate(&scene, &maps, cfg.train.threshold, cfg.train.max_people)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        rec.artifact("report.csv", &csv)?;
        print!("{}", String::from_utf8_lossy(&csv));
        rec.summary("mpjpe", report.mpjpe);
        rec.summary("pa_mpjpe", report.pa_mpjpe);
        rec.summary("matched", report.matched);
        rec.summary("misses", report.misses);
        rec.summary("false_positives", report.false_positives);
        Ok(0)
    })
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    recorded("bench", &a.common.out, |rec| {
        let mut cfg = load_config(rec, &a.common.config)?;
        if let Some(s) = &a.scales {
            cfg.model.scales = s.clone();
        }
        let longest = a.frames.iter().copied().max().unwrap_or(1);
        cfg.scene.frames = cfg.scene.frames.max(longest);
        check_budget(&cfg)?;
        rec.manifest.seed = Some(cfg.train.seed);
        rec.manifest.config = Some(cfg.to_toml());
        let rows = frame_sweep(&cfg, &a.frames, a.repeats)?;
        let mut csv = Vec::new();
        write_bench_csv(&mut csv, &rows)?;
        rec.artifact("bench.csv", &csv)?;
        print!("{}", String::from_utf8_lossy(&csv));
        Ok(0)
    })
}

fn cmd_scene(a: SceneArgs) -> CmdResult {
    recorded("scene", &a.common.out, |rec| {
        let mut cfg = load_config(rec, &a.common.config)?;
        if let Some(s) = a.seed {
            cfg.scene.seed = s;
        }
        cfg.scene.validate()?;
        rec.manifest.seed = Some(cfg.scene.seed);
        rec.manifest.config = Some(cfg.to_toml());
        let scene = generate(&cfg.scene)?;
        let path = rec.artifact("scene.toml", write_manifest(&scene)?.as_bytes())?;
        println!("{}", path.display());
        Ok(0)
    })
}
