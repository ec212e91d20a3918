use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vinlab_core::dataset::{build_dataset, build_held_out, Dataset, DatasetConfig};
use vinlab_core::eval::{default_step_cap, evaluate, rollout_greedy, ExpertPolicy, Metrics, NetworkPolicy, Policy};
use vinlab_core::models::{default_k, oracle_vin_weights, Family, ModelConfig, ModelWeights};
use vinlab_core::render::{pgm, planner_fields, ppm_paths};
use vinlab_core::rl::{curriculum_train, RlConfig};
use vinlab_core::train::{check_model_gradients_with_fault, train, TrainConfig, MODEL_GRAD_TOL};
use vinlab_tensor::gradcheck::{op_suite, OP_TOL};

#[derive(Parser)]
#[command(
    name = "vinlab",
    version,
    about = "Value iteration networks on gridworld planning tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training set of random maps with shortest-path trajectories.
    Generate(GenerateArgs),
    /// Train a policy network by imitation of the expert.
    Train(TrainArgs),
    /// Score a policy on a dataset.
    Eval(EvalArgs),
    /// Curriculum reinforcement learning on freshly sampled maps.
    Rl(RlArgs),
    /// Render a reward or value field, or a rollout, as an image.
    Plot(PlotArgs),
    /// Finite-difference check of every op and of a full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Random seed; falls back to VINLAB_SEED, then 0.
    #[arg(long, env = "VINLAB_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1000)]
    domains: usize,
    #[arg(long, default_value_t = 7)]
    traj: usize,
    #[arg(long, default_value_t = 0.3)]
    obstacle_fraction: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many held-out maps, disjoint from the training maps.
    #[arg(long, requires = "test_out")]
    test_domains: Option<usize>,
    #[arg(long, requires = "test_domains")]
    test_out: Option<PathBuf>,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_family)]
    model: Family,
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out set scored after every epoch and at the end.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Value-iteration steps; defaults depend on the model and map size.
    #[arg(long, value_parser = positive)]
    k: Option<usize>,
    #[arg(long, default_value_t = 300, value_parser = positive)]
    epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    data_fraction: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Training report as JSON; defaults to the weights path with `.json` appended.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    threads: usize,
    /// Skip the pre-training gradient check.
    #[arg(long)]
    no_grad_check: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "expert")]
    weights: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Score the shortest-path expert instead of a network.
    #[arg(long, conflicts_with = "weights")]
    expert: bool,
    #[arg(long, conflicts_with = "table")]
    json: bool,
    #[arg(long)]
    table: bool,
    /// Rollout step cap; defaults to 4(m + n).
    #[arg(long)]
    step_cap: Option<usize>,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    threads: usize,
}

#[derive(Args)]
struct RlArgs {
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 500, value_parser = positive)]
    iterations: usize,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 1024, value_parser = positive)]
    episodes: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, value_parser = positive)]
    k: Option<usize>,
    #[arg(long, value_parser = positive)]
    max_difficulty: Option<usize>,
    /// Start from imitation-trained weights instead of a fresh network.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
    /// Curriculum log as JSON; defaults to the weights path with `.json` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = positive)]
    threads: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Plot {
    Reward,
    Value,
    Trajectory,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, required_unless_present_any = ["oracle", "expert"])]
    weights: Option<PathBuf>,
    /// Use hand-set weights that perform exact value iteration.
    #[arg(long, conflicts_with = "weights")]
    oracle: bool,
    /// Draw the shortest-path expert's rollout as the predicted path.
    #[arg(long, conflicts_with_all = ["weights", "oracle"])]
    expert: bool,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    domain_index: usize,
    /// Trajectory whose start is used for the rollout render.
    #[arg(long, default_value_t = 0)]
    traj_index: usize,
    #[arg(long, value_enum)]
    what: Plot,
    /// Pixels per cell in trajectory renders.
    #[arg(long, default_value_t = 16, value_parser = positive)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_family)]
    model: Family,
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long, value_parser = positive)]
    k: Option<usize>,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    samples: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn sidecar(path: &std::path::Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = DatasetConfig {
        m: a.size,
        n: a.size,
        n_domains: a.domains,
        n_traj: a.traj,
        obstacle_fraction: a.obstacle_fraction,
        seed: a.seed.seed,
    };
    let ds = build_dataset(&cfg)?;
    ds.write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "wrote {} maps, {} samples to {}",
        ds.domains.len(),
        ds.samples().len(),
        a.out.display()
    );
    if let (Some(n), Some(path)) = (a.test_domains, a.test_out) {
        let test = build_held_out(&cfg, n, &ds)?;
        test.write(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {} held-out maps to {}", test.domains.len(), path.display());
    }
    Ok(())
}

fn read_dataset(path: &std::path::Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_weights(path: &std::path::Path) -> Result<ModelWeights> {
    ModelWeights::read(path).with_context(|| format!("reading weights {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.dataset)?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    let mut config = ModelConfig::new(a.model, data.m, data.n);
    if let Some(k) = a.k {
        config = config.with_k(k);
    }
    let weights = ModelWeights::<f32>::init(config, a.seed.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed.seed,
        data_fraction: a.data_fraction,
        threads: a.threads,
        grad_check: !a.no_grad_check,
        ..TrainConfig::default()
    };
    let (weights, report) = train(weights, &data, val.as_ref(), &cfg)?;
    for e in &report.epochs {
        eprint!(
            "epoch {:>3}  loss {:.4}  train err {:.4}",
            e.epoch, e.train_loss, e.train_error
        );
        if let Some(v) = e.val_error {
            eprint!("  val err {v:.4}");
        }
        eprintln!("  {:.1}s", e.seconds);
    }
    weights
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let mut json = serde_json::to_value(&report)?;
    if let Some(v) = &val {
        let m = evaluate(&NetworkPolicy::new(&weights), v, default_step_cap(v.m, v.n), a.threads)?;
        json["val_metrics"] = serde_json::to_value(m)?;
        println!("{}", serde_json::to_string(&m)?);
    }
    let path = a.report.unwrap_or_else(|| sidecar(&a.out));
    std::fs::write(&path, serde_json::to_string_pretty(&json)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn metrics_table(label: &str, m: &Metrics) -> String {
    let head = ["Model", "Prediction loss", "Success rate", "Traj. diff."];
    let row = [
        label.to_string(),
        format!("{:.4}", m.prediction_loss),
        format!("{:.1}%", 100.0 * m.success_rate),
        format!("{:.4}", m.traj_diff),
    ];
    let w: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&w)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!(
        "{}\n{}\n",
        line(head.to_vec()),
        line(row.iter().map(String::as_str).collect())
    )
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let cap = a.step_cap.unwrap_or_else(|| default_step_cap(ds.m, ds.n));
    let (label, m) = match &a.weights {
        Some(path) => {
            let w = read_weights(path)?;
            (
                w.config().family.to_string(),
                evaluate(&NetworkPolicy::new(&w), &ds, cap, a.threads)?,
            )
        }
        None => ("expert".to_string(), evaluate(&ExpertPolicy, &ds, cap, a.threads)?),
    };
    if a.table {
        print!("{}", metrics_table(&label, &m));
    } else {
        println!("{}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn rl_cmd(a: RlArgs) -> Result<()> {
    let mut cfg = RlConfig::new(a.size, a.size);
    cfg.iterations = a.iterations;
    cfg.gamma = a.gamma;
    cfg.episodes_per_iteration = a.episodes;
    cfg.lr = a.lr;
    cfg.seed = a.seed.seed;
    cfg.threads = a.threads;
    if let Some(d) = a.max_difficulty {
        cfg.max_difficulty = d;
    }
    let weights = match &a.warm_start {
        Some(path) => read_weights(path)?,
        None => {
            let k = a.k.unwrap_or_else(|| default_k(Family::Vin, a.size, a.size));
            ModelWeights::init(ModelConfig::new(Family::Vin, a.size, a.size).with_k(k), a.seed.seed)?
        }
    };
    let (weights, report) = curriculum_train(weights, &cfg, |adv| {
        println!(
            "iteration {}: difficulty {} -> {} (average return {:.4})",
            adv.iteration, adv.from, adv.to, adv.avg_return
        );
    })?;
    println!(
        "reached difficulty {} after {} iterations; test success {:.3}",
        report.curriculum.difficulty,
        report.iterations.len(),
        report.test_success
    );
    weights
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let path = a.log.unwrap_or_else(|| sidecar(&a.out));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Discount used by the hand-set planner in plots.
const ORACLE_GAMMA: f64 = 0.9;

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let Some(dom) = ds.domains.get(a.domain_index) else {
        bail!(
            "domain index {} out of range ({} domains)",
            a.domain_index,
            ds.domains.len()
        );
    };
    let map = &dom.map;
    let weights = match &a.weights {
        Some(path) => Some(read_weights(path)?),
        None if a.oracle => Some(oracle_vin_weights(
            ds.m,
            ds.n,
            default_k(Family::Vin, ds.m, ds.n),
            ORACLE_GAMMA,
        )?),
        None => None,
    };
    let bytes = match a.what {
        Plot::Reward | Plot::Value => {
            let Some(w) = &weights else {
                bail!("reward and value plots need --weights or --oracle");
            };
            let f = planner_fields(w, map)?;
            pgm(if a.what == Plot::Reward { &f.reward } else { &f.value })?
        }
        Plot::Trajectory => {
            let Some(traj) = dom.trajectories.get(a.traj_index) else {
                bail!(
                    "trajectory index {} out of range ({} trajectories)",
                    a.traj_index,
                    dom.trajectories.len()
                );
            };
            let cap = default_step_cap(ds.m, ds.n);
            let optimal = rollout_greedy(ExpertPolicy.for_map(map)?.as_mut(), map, traj.start, cap)?;
            let predicted = match &weights {
                Some(w) => rollout_greedy(NetworkPolicy::new(w).for_map(map)?.as_mut(), map, traj.start, cap)?,
                None => optimal.clone(),
            };
            ppm_paths(map, &optimal.states, &predicted.states, a.scale)?
        }
    };
    std::fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

/// Factor applied to convolution kernel gradients by `--inject-fault`.
const FAULT: f64 = 1.5;

fn gradcheck_cmd(a: GradcheckArgs) -> Result<bool> {
    let fault = a.inject_fault.then_some(FAULT);
    let mut ok = true;
    for (name, report) in op_suite(fault)? {
        let pass = report.passes(OP_TOL);
        ok &= pass;
        println!(
            "{:<28} {:.3e}  {}",
            name,
            report.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let ds = build_dataset(&DatasetConfig {
        m: a.size,
        n: a.size,
        n_domains: 2,
        n_traj: 2,
        obstacle_fraction: 0.3,
        seed: a.seed.seed,
    })?;
    let mut config = ModelConfig::new(a.model, a.size, a.size);
    if let Some(k) = a.k {
        config = config.with_k(k);
    }
    let weights = ModelWeights::<f64>::init(config, a.seed.seed)?;
    let err = check_model_gradients_with_fault(&weights, &ds, a.samples, fault)?;
    let pass = err < MODEL_GRAD_TOL;
    ok &= pass;
    println!(
        "{:<28} {:.3e}  {}",
        format!("model {}", a.model),
        err,
        if pass { "ok" } else { "FAIL" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => generate(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Rl(a) => rl_cmd(a)?,
        Command::Plot(a) => plot_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
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
