//! `eanet`: generate synthetic scenes, train offline, run online streams,
//! evaluate, and plot reports.
//!
//! Exit codes: 0 success, 1 runtime or IO error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use eanet_core::attention::Strategy;
use eanet_core::checkpoint::Checkpoint;
use eanet_core::config::RunConfig;
use eanet_core::data::{format_scene, load_dataset, window_scenes, TrajectoryInstance};
use eanet_core::gradcheck::{run_gradcheck, GradcheckOptions};
use eanet_core::manifest::RunManifest;
use eanet_core::model::{Head, Model};
use eanet_core::plot::{curves_svg, heat_strip_svg};
use eanet_core::report::{read_stream_report, write_loss_log, write_stream_report};
use eanet_core::rng::Rng;
use eanet_core::runtime::{
    compute_base, evaluate, run_online, train_offline, BaseMetrics, ProbeSet,
};
use eanet_core::synth::{generate_synthetic, ScenarioKind, SyntheticScenarioSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "eanet", version, about = "Online trajectory prediction with expert attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true, env = "EANET_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene and its manifest.
    Gen(GenArgs),
    /// Train offline and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Run the test-then-train loop over a stream and write its report.
    Online(OnlineArgs),
    /// Best-of-K evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Train on the first 80% of a scene and score the rest.
    Base(BaseArgs),
    /// Render curve and heat-strip charts from a stream report.
    Plot(PlotArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    kind: ScenarioKind,
    #[arg(long, default_value_t = 6)]
    agents: usize,
    #[arg(long, default_value_t = 400)]
    frames: usize,
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    arena: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Scene file or directory of scene files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct OnlineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, requires = "base_fde")]
    base_ade: Option<f64>,
    #[arg(long, requires = "base_ade")]
    base_fde: Option<f64>,
    /// Held-out scenes scored by best-of-K at the restore-ratio checkpoints.
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    max_instances: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value = "plain")]
    strategy: Strategy,
}

#[derive(Args)]
struct BaseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Also write the JSON summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    report: PathBuf,
    /// Output directory for `curves.svg` and `experts.svg`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
}

/// Argument problems detected after parsing; reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> anyhow::Result<RunConfig> {
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn instances(path: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<TrajectoryInstance>> {
    let scenes = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let inst = window_scenes(&scenes, cfg.model.t_obs, cfg.model.t_pred, 1)?;
    if inst.is_empty() {
        bail!("{} yields no complete {}-frame windows", path.display(), cfg.model.t_obs + cfg.model.t_pred);
    }
    Ok(inst)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn finish(mut manifest: RunManifest, started: Instant, path: &Path) -> anyhow::Result<()> {
    manifest.outputs.push(display(path));
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.write(path)?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = resolve(&a.common)?;
    let mut spec = SyntheticScenarioSpec::new(a.kind, cfg.seed);
    spec.agent_count = a.agents;
    if let Some(v) = a.speed {
        spec.speed = v;
    }
    if let Some(v) = a.noise {
        spec.noise_std = v;
    }
    if let Some(v) = a.period {
        spec.period = v;
    }
    if let Some(v) = a.arena {
        spec.arena = v;
    }
    let tracks = generate_synthetic(&spec, a.frames).map_err(|e| UsageError(e.to_string()))?;
    std::fs::create_dir_all(&a.out)?;
    let file = a.out.join(format!("{}.txt", a.kind));
    std::fs::write(&file, format_scene(&tracks))?;
    let mut m = RunManifest::new("gen", cfg.digest(), cfg.seed);
    m.outputs.push(display(&file));
    m.summary.insert("kind".into(), json!(a.kind.to_string()));
    m.summary.insert("agents".into(), json!(spec.agent_count));
    m.summary.insert("frames".into(), json!(a.frames));
    m.summary.insert("speed".into(), json!(spec.speed));
    m.summary.insert("noise".into(), json!(spec.noise_std));
    m.summary.insert("period".into(), json!(spec.period));
    m.summary.insert("arena".into(), json!(spec.arena));
    finish(m, started, &a.out.join("manifest.json"))?;
    eprintln!("wrote {}", file.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = resolve(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    let cfg = validated(cfg)?;
    let data = instances(&a.data, &cfg)?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    let epochs = cfg.train.epochs;
    let log = train_offline(&mut model, &data, &cfg.train, |e| {
        eprintln!("epoch {}/{epochs} lr {} loss {:.5}", e.epoch + 1, e.lr, e.mean_loss)
    })?;
    let ckpt = Checkpoint::new(&model, &Rng::new(cfg.seed));
    ckpt.save(&a.ckpt_out)?;
    let log_path = a.loss_log.unwrap_or_else(|| with_suffix(&a.ckpt_out, ".loss.csv"));
    write_loss_log(std::fs::File::create(&log_path)?, &log)?;
    let mut m = RunManifest::new("train", cfg.digest(), cfg.seed);
    m.inputs.push(display(&a.data));
    m.outputs.push(display(&a.ckpt_out));
    m.outputs.push(display(&log_path));
    m.summary.insert("instances".into(), json!(data.len()));
    m.summary.insert("final_loss".into(), json!(log.last().map(|e| e.mean_loss)));
    finish(m, started, &with_suffix(&a.ckpt_out, ".manifest.json"))?;
    Ok(())
}

fn cmd_online(a: OnlineArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = resolve(&a.common)?;
    if let Some(s) = a.strategy {
        cfg.set("strategy", &s.to_string())?;
    }
    if let Some(n) = a.max_instances {
        cfg.set("max_instances", &n.to_string())?;
    }
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    cfg.model = ckpt.config;
    let cfg = validated(cfg)?;
    let model = ckpt.model()?;
    let stream = instances(&a.stream, &cfg)?;
    let base = match (a.base_ade, a.base_fde) {
        (Some(ade), Some(fde)) if ade > 0.0 && fde > 0.0 => Some(BaseMetrics { ade, fde }),
        (Some(_), Some(_)) => return Err(UsageError("base metrics must be positive".into()).into()),
        _ => None,
    };
    let probe = match &a.probe {
        Some(p) => Some(ProbeSet {
            instances: instances(p, &cfg)?,
            samples: cfg.samples,
            seed: cfg.seed,
        }),
        None => None,
    };
    let out = run_online(&model, &stream, &cfg.online, base, probe.as_ref())?;
    write_stream_report(std::fs::File::create(&a.report)?, &out.records, cfg.model.layers())?;
    let pre_max = out.records.iter().map(|r| r.grad_norm_pre).fold(0.0, f64::max);
    let summary = json!({
        "strategy": cfg.online.strategy.to_string(),
        "instances": out.records.len(),
        "health": out.health.kind.to_string(),
        "first_trigger": out.health.first_trigger,
        "max_pre_clip_grad_norm": pre_max,
        "checkpoints": out.checkpoints.iter().map(|c| json!({
            "instance": c.instance, "ade": c.ade, "fde": c.fde, "rr": c.rr,
        })).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let mut m = RunManifest::new("online", cfg.digest(), cfg.seed);
    m.inputs.push(display(&a.ckpt));
    m.inputs.push(display(&a.stream));
    if let Some(p) = &a.probe {
        m.inputs.push(display(p));
    }
    m.outputs.push(display(&a.report));
    if let serde_json::Value::Object(map) = summary {
        m.summary = map;
    }
    finish(m, started, &with_suffix(&a.report, ".manifest.json"))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(k) = a.samples {
        cfg.set("samples", &k.to_string())?;
    }
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    cfg.model = ckpt.config;
    let cfg = validated(cfg)?;
    let model = ckpt.model()?;
    let data = instances(&a.data, &cfg)?;
    let layers = cfg.model.layers();
    let mut hedge = vec![0.0; layers];
    hedge[layers - 1] = 1.0;
    let head = match a.strategy {
        Strategy::Plain => Head::Plain,
        Strategy::Ea => Head::Ea,
        Strategy::Hedge => Head::Hedge(&hedge),
    };
    let m = evaluate(&model, &data, head, cfg.samples, cfg.seed)?;
    let summary = json!({
        "ade": m.ade, "fde": m.fde, "samples": cfg.samples,
        "instances": data.len(), "strategy": a.strategy.to_string(), "seed": cfg.seed,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_base(a: BaseArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = resolve(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    if let Some(k) = a.samples {
        cfg.set("samples", &k.to_string())?;
    }
    let cfg = validated(cfg)?;
    let data = instances(&a.data, &cfg)?;
    let epochs = cfg.train.epochs;
    let (base, _) = compute_base(&data, &cfg.model, &cfg.train, cfg.samples, |e| {
        eprintln!("epoch {}/{epochs} loss {:.5}", e.epoch + 1, e.mean_loss)
    })?;
    let summary = json!({
        "ade_base": base.ade, "fde_base": base.fde, "samples": cfg.samples, "instances": data.len(),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, text + "\n")?;
        let mut m = RunManifest::new("base", cfg.digest(), cfg.seed);
        m.inputs.push(display(&a.data));
        m.outputs.push(display(out));
        finish(m, started, &with_suffix(out, ".manifest.json"))?;
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> anyhow::Result<()> {
    let file = std::fs::File::open(&a.report).with_context(|| format!("opening {}", a.report.display()))?;
    let rows = read_stream_report(file)?;
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("curves.svg"), curves_svg(&rows))?;
    std::fs::write(a.out.join("experts.svg"), heat_strip_svg(&rows))?;
    eprintln!("plotted {} rows into {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let cfg = resolve(&a.common)?;
    let report = run_gradcheck(&GradcheckOptions {
        seed: cfg.seed,
        ..Default::default()
    })?;
    for c in &report.cases {
        println!(
            "{} {:<24} elements {:>4} max rel err {:.3e}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.elements,
            c.max_rel_error
        );
    }
    println!(
        "{} cases, max rel err {:.3e} (tolerance {:.0e}), {:.2}s",
        report.cases.len(),
        report.max_error(),
        report.tolerance,
        report.seconds
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Online(a) => cmd_online(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Base(a) => cmd_base(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
