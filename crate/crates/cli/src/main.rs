use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use biasnet::lab::{
    counterfactual_scenario, fig6_scan, paper_scenario, run_scenario, write_outputs, Analyses, DecompositionRule,
    Phase, ScenarioConfig, ScheduleSpec, Thresholds,
};
use biasnet::{GainProfile, GainSet, Integrator, WeightedAdjacency};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adaptive bias-estimating consensus simulator.
#[derive(Parser)]
#[command(name = "biasnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a TOML file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Built-in five-agent scenario.
    Paper {
        #[command(flatten)]
        common: Common,
    },
    /// Built-in scenario on the bipartite graph only.
    Counterfactual {
        #[command(flatten)]
        common: Common,
    },
    /// Determinant of the windowed union signless Laplacian.
    Fig6 {
        #[arg(long, default_value_t = 4.0)]
        window: f64,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Scenario whose schedule is scanned; the built-in one by default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Write `fig6.csv` here instead of printing to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random connected network with random biases and initial data.
    Random {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        agents: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Print a built-in scenario as TOML.
    Config { which: Builtin },
    /// Run several config files concurrently, each into `<out>/<name>`.
    Batch {
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "batch-out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Paper,
    Counterfactual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    SingleEdge,
    LeaveOneOut,
    Whole,
}

impl From<Rule> for DecompositionRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::SingleEdge => DecompositionRule::SingleEdge,
            Rule::LeaveOneOut => DecompositionRule::LeaveOneOut,
            Rule::Whole => DecompositionRule::Whole,
        }
    }
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory for CSV files and `summary.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Sub-graph decomposition used when cycling through a parent graph.
    #[arg(long, value_enum)]
    rule: Option<Rule>,
    /// Skip the Lyapunov certificate pass.
    #[arg(long)]
    no_certificate: bool,
}

impl Common {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(r) = self.rule {
            cfg.schedule.rule = r.into();
        }
        if self.no_certificate {
            cfg.analyses.certificate = false;
        }
        if let Some(out) = &self.out {
            cfg.outputs = Some(out.clone());
        }
    }
}

/// Runs one scenario, writes its outputs and prints the summary.
fn execute(cfg: &ScenarioConfig) -> Result<bool> {
    let run = run_scenario(cfg).with_context(|| format!("scenario '{}'", cfg.name))?;
    if let Some(dir) = &cfg.outputs {
        write_outputs(&run, dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&run.report)?);
    for c in run.report.checks.iter().filter(|c| !c.passed) {
        eprintln!("check failed: {} = {:e} (threshold {:e})", c.name, c.value, c.threshold);
    }
    Ok(run.report.passed)
}

fn random_scenario(seed: u64, n: usize) -> Result<ScenarioConfig> {
    if n < 2 {
        bail!("need at least two agents");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 2;
    // Random spanning tree plus a few extra edges.
    let mut edges = Vec::new();
    for j in 1..n {
        edges.push((rng.gen_range(0..j), j, rng.gen_range(0.5..1.5)));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.iter().any(|&(a, b, _)| (a, b) == (i, j)) && rng.gen_bool(0.3) {
                edges.push((i, j, rng.gen_range(0.5..1.5)));
            }
        }
    }
    let parent = WeightedAdjacency::from_edges(n, &edges)?;
    let mut uniform = |lo: f64, hi: f64, len: usize| (0..len).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
    Ok(ScenarioConfig {
        name: format!("random-{seed}"),
        n,
        m,
        gains: GainSet { sigma: 0.5, lambda: 0.5, beta: 0.5, mu_f: 0.05, mu_if: 5.0 },
        gain_profile: GainProfile::multi_frequency(),
        bias: uniform(-1.0, 1.0, n * m),
        q0: uniform(-1.0, 1.0, n * m),
        qdot0: uniform(-0.5, 0.5, n * m),
        theta0: None,
        dt: 2e-3,
        horizon: 20.0,
        integrator: Integrator::LawsonRk4,
        log_stride: 10,
        snapshot_stride: 50,
        schedule: ScheduleSpec {
            phases: vec![Phase { parent, duration: None }],
            rotation: 2.0,
            rule: DecompositionRule::Whole,
        },
        analyses: Analyses { fig6: false, cie_windows: vec![2.0, 5.0, 10.0], ..Analyses::default() },
        thresholds: Thresholds {
            max_position_error: None,
            max_velocity: None,
            max_bias_fraction: None,
            min_fit_r2: None,
            lyapunov_increase: None,
            ..Thresholds::default()
        },
        outputs: None,
    })
}

fn run_batch(configs: &[PathBuf], out: &Path) -> Result<bool> {
    let loaded = configs
        .iter()
        .map(|p| ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = loaded.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!("batch scenarios need distinct names");
    }
    let results: Vec<Result<bool>> = std::thread::scope(|s| {
        let handles: Vec<_> = loaded
            .into_iter()
            .map(|mut cfg| {
                cfg.outputs = Some(out.join(&cfg.name));
                s.spawn(move || -> Result<bool> {
                    let run = run_scenario(&cfg).with_context(|| format!("scenario '{}'", cfg.name))?;
                    write_outputs(&run, cfg.outputs.as_deref().expect("set above"))?;
                    eprintln!("{}: {}", cfg.name, if run.report.passed { "passed" } else { "FAILED" });
                    Ok(run.report.passed)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    let mut all = true;
    for r in results {
        all &= r?;
    }
    Ok(all)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, common } => {
            let mut cfg = ScenarioConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            common.apply(&mut cfg);
            execute(&cfg)
        }
        Command::Paper { common } => {
            let mut cfg = paper_scenario();
            common.apply(&mut cfg);
            execute(&cfg)
        }
        Command::Counterfactual { common } => {
            let mut cfg = counterfactual_scenario();
            common.apply(&mut cfg);
            execute(&cfg)
        }
        Command::Random { seed, agents, common } => {
            let mut cfg = random_scenario(seed, agents)?;
            common.apply(&mut cfg);
            execute(&cfg)
        }
        Command::Fig6 { window, step, config, horizon, out } => {
            let mut cfg = match config {
                Some(p) => ScenarioConfig::load(&p)?,
                None => paper_scenario(),
            };
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            let points = fig6_scan(&cfg.build_schedule()?, window, step)?;
            let mut text = String::from("t,det\n");
            for p in &points {
                text.push_str(&format!("{},{}\n", p.t, p.det));
            }
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("fig6.csv"), text)?;
                }
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Config { which } => {
            let cfg = match which {
                Builtin::Paper => paper_scenario(),
                Builtin::Counterfactual => counterfactual_scenario(),
            };
            print!("{}", cfg.to_toml());
            Ok(true)
        }
        Command::Batch { configs, out } => run_batch(&configs, &out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
