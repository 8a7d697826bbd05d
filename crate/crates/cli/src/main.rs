use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use koopman_ioc_core::harness::{
    dataset, demonstration, run_experiment, run_table1, run_table2, train_dkr, validation_suite, Check,
    ExperimentConfig, Table,
};
use koopman_ioc_core::ioc::estimate_weights;
use koopman_ioc_core::koopman::{max_recon_error, TrainReport};
use koopman_ioc_core::observables::mlp_observable;
use koopman_ioc_core::{DerivativeSource, KoopmanModel, Mlp, MlpConfig, Provenance, Trajectory};

#[derive(Parser)]
#[command(name = "koopman-ioc", version, about = "Objective weight recovery with Koopman-identified dynamics")]
struct Cli {
    /// Experiment configuration (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for `train` and `run`; tables use the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Where the dynamics derivatives in the weight solve come from.
    #[arg(long, global = true)]
    provenance: Option<Provenance>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the demonstration trajectory.
    Demo,
    /// Identify the dynamics only and save the model and observable.
    Train {
        /// Trajectory JSON or CSV; defaults to `<out>/demo.json`, generated if absent.
        #[arg(long)]
        demo: Option<PathBuf>,
    },
    /// Estimate weights from a trajectory and, for koopman provenance, a saved model.
    Estimate {
        #[arg(long)]
        demo: Option<PathBuf>,
        /// Defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to `<out>/observable.json`.
        #[arg(long)]
        observable: Option<PathBuf>,
    },
    /// Full loop: identification interleaved with weight estimation.
    Run,
    /// Errors across reconstruction-error targets.
    Table1,
    /// Errors across hidden widths.
    Table2,
    /// Fast oracle checks.
    Validate,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.cfg.seeds[0])
    }

    /// The given trajectory file, else `<out>/demo.json`, else a fresh solve.
    fn trajectory(&self, given: Option<&Path>) -> Result<Trajectory> {
        let path = match given {
            Some(p) => p.to_path_buf(),
            None => {
                let p = self.path("demo.json");
                if !p.exists() {
                    return Ok(demonstration(&self.cfg)?.trajectory);
                }
                p
            }
        };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let traj = if path.extension().is_some_and(|e| e == "csv") {
            Trajectory::read_csv(text.as_bytes())?
        } else {
            Trajectory::from_json(&text)?
        };
        Ok(traj)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

#[derive(Serialize)]
struct DemoMeta<'a> {
    weights: &'a [f64],
    objective: f64,
    grad_norm: f64,
    pmp_residual: f64,
    iterations: usize,
    config: &'a ExperimentConfig,
}

fn demo(ctx: &Ctx) -> Result<bool> {
    let sol = demonstration(&ctx.cfg)?;
    ctx.write("demo.json", &sol.trajectory.to_json()?)?;
    let mut csv = Vec::new();
    sol.trajectory.write_csv(&mut csv)?;
    ctx.write("demo.csv", std::str::from_utf8(&csv)?)?;
    let meta = DemoMeta {
        weights: &sol.weights,
        objective: sol.objective,
        grad_norm: sol.grad_norm,
        pmp_residual: sol.pmp_residual,
        iterations: sol.iterations,
        config: &ctx.cfg,
    };
    ctx.write("demo.meta.json", &serde_json::to_string_pretty(&meta)?)?;
    println!(
        "demonstration: objective {:.6e}, pmp residual {:.3e}, {} iterations",
        sol.objective, sol.pmp_residual, sol.iterations
    );
    Ok(sol.pmp_residual <= ctx.cfg.oc.pmp_tol)
}

#[derive(Serialize)]
struct TrainSummary {
    seed: u64,
    reports: Vec<TrainReport>,
    l_c_max: f64,
}

fn train(ctx: &Ctx, demo: Option<&Path>) -> Result<bool> {
    let traj = ctx.trajectory(demo)?;
    let segments = dataset(&ctx.cfg, &traj)?;
    let seed = ctx.seed();
    let mut net = mlp_observable(&MlpConfig {
        seed,
        ..ctx.cfg.observable.clone()
    })?;
    let (model, reports) = train_dkr(&segments, &mut net, ctx.cfg.ridge, &ctx.cfg.train)?;
    let l_c_max = max_recon_error(&model, &segments, &net)?;
    ctx.write("model.json", &model.to_json()?)?;
    ctx.write("observable.json", &net.to_json()?)?;
    ctx.write(
        "train.json",
        &serde_json::to_string_pretty(&TrainSummary { seed, reports, l_c_max })?,
    )?;
    println!("trained on {} segments, l_c_max {l_c_max:.3e}", segments.len());
    Ok(l_c_max.is_finite())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn estimate(ctx: &Ctx, demo: Option<&Path>, model: Option<&Path>, observable: Option<&Path>) -> Result<bool> {
    let traj = ctx.trajectory(demo)?;
    let segments = dataset(&ctx.cfg, &traj)?;
    let feat = ctx.cfg.features();
    let est = match ctx.cfg.provenance {
        Provenance::True => estimate_weights(&segments, &feat, DerivativeSource::True(&ctx.cfg.system()?))?,
        Provenance::Koopman => {
            let model_path = model.map_or_else(|| ctx.path("model.json"), Path::to_path_buf);
            let obs_path = observable.map_or_else(|| ctx.path("observable.json"), Path::to_path_buf);
            let model = KoopmanModel::from_json(&read(&model_path)?)?;
            let net = Mlp::from_json(&read(&obs_path)?)?;
            estimate_weights(
                &segments,
                &feat,
                DerivativeSource::Koopman {
                    model: &model,
                    observable: &net,
                },
            )?
        }
    };
    let est = est.compare(&ctx.cfg.omega_true)?;
    ctx.write("estimate.json", &serde_json::to_string_pretty(&est)?)?;
    println!(
        "omega_rescaled {:?}, weight error {:.4}, residual {:.3e}",
        est.omega_rescaled,
        est.weight_error.unwrap_or(f64::NAN),
        est.residual
    );
    Ok(est.omega_rescaled.iter().all(|v| v.is_finite()))
}

fn run(ctx: &Ctx) -> Result<bool> {
    let result = run_experiment(&ctx.cfg, &ctx.cfg.observable, &ctx.cfg.train, ctx.seed())?;
    ctx.write("run.json", &serde_json::to_string_pretty(&result)?)?;
    for it in &result.iterations {
        println!(
            "iteration {}: l_c_max {:.3e}, omega {:?}, weight error {:.4}",
            it.iteration,
            it.l_c_max,
            it.omega_rescaled,
            it.weight_error.unwrap_or(f64::NAN)
        );
    }
    println!(
        "trajectory error {}, wall time {:.2}s",
        result.traj_error.map_or("unavailable".to_string(), |e| format!("{e:.4e}")),
        result.wall_time_secs
    );
    let finite = result
        .iterations
        .iter()
        .all(|it| it.loss_k.is_finite() && it.loss_c.is_finite() && it.omega_hat.iter().all(|v| v.is_finite()));
    Ok(finite && result.bound.bound_holds)
}

fn table(ctx: &Ctx, name: &str, table: Table) -> Result<bool> {
    ctx.write(&format!("{name}.csv"), &table.to_csv()?)?;
    ctx.write(&format!("{name}.json"), &serde_json::to_string_pretty(&table)?)?;
    for (plot, svg) in table.plots() {
        ctx.write(&format!("{name}_{plot}.svg"), &svg)?;
    }
    for m in &table.medians {
        println!(
            "{:>10e}  median weight error {:>8.4}  traj error {:>10}  l_c_max {:.2e}{}",
            m.grid_value,
            m.weight_error,
            m.traj_error.map_or("-".to_string(), |e| format!("{e:.4e}")),
            m.l_c_max,
            if m.reached { "" } else { "  (unreached)" }
        );
    }
    Ok(match &table.trend {
        Some(trend) => {
            println!(
                "trend: weight error non-increasing {}, traj error follows {}, final median {:?}, sums preserved {}",
                trend.weight_error_non_increasing,
                trend.traj_error_follows,
                trend.final_median_weight_error,
                trend.sums_preserved
            );
            trend.passed()
        }
        None => true,
    })
}

fn validate(ctx: &Ctx) -> Result<bool> {
    let checks: Vec<Check> = validation_suite(&ctx.cfg, ctx.seed())?;
    ctx.write("validation.json", &serde_json::to_string_pretty(&checks)?)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("assertion failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(p) = cli.provenance {
        cfg.provenance = p;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if cfg.seeds.is_empty() {
        bail!("configuration has no seeds");
    }
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        out,
    };
    match cli.command {
        Command::Demo => demo(&ctx),
        Command::Train { demo } => train(&ctx, demo.as_deref()),
        Command::Estimate {
            demo,
            model,
            observable,
        } => estimate(&ctx, demo.as_deref(), model.as_deref(), observable.as_deref()),
        Command::Run => run(&ctx),
        Command::Table1 => table(&ctx, "table1", run_table1(&ctx.cfg)?),
        Command::Table2 => table(&ctx, "table2", run_table2(&ctx.cfg)?),
        Command::Validate => validate(&ctx),
    }
}
