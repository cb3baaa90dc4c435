//! Command-line front end for the projektor pipelines.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use projektor_core::dataspace::{compose, MixingRatio, MixtureSpec};
use projektor_core::harness::{
    self, build_fit_dataset, evaluate, extrapolation_split, fit_pair, grid_ratios, mae_table,
    materialize, model_path, projection_sweep, valuations, Experiment, ExperimentConfig,
    FitDataset, Valuations,
};
use projektor_core::ot::transport;
use projektor_core::predictors::{selection_ratio_from_values, PredictorKind};
use projektor_core::projection::{write_projection_csv, ScalePair};
use projektor_core::selection::{search_min_budget, select_fixed_budget};
use projektor_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "projektor",
    version,
    about = "Predict, project and select data-source mixtures"
)]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "projektor.json")]
    pub config: PathBuf,
    /// Run seed; defaults to the first entry of the config's `seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Also write OT potentials of the compositions a command solves.
    #[arg(long, global = true)]
    pub dump_transport: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the pilot and validation sets as CSV.
    Gen,
    /// Observe the grid at both scales and fit every configured predictor.
    Fit,
    /// Projected performance of one mixture.
    Predict {
        #[arg(long, default_value = "pq")]
        kind: PredictorKind,
        /// Comma-separated mixing ratio.
        #[arg(long, value_parser = parse_ratio)]
        ratio: MixingRatio,
        /// Target scale; the larger fitting scale when absent.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Project every grid mixture to the configured target scales.
    Project {
        #[arg(long, default_value = "pq")]
        kind: PredictorKind,
        /// Skip measuring actual performance at the target scales.
        #[arg(long)]
        no_actual: bool,
    },
    /// Maximize projected performance at a fixed budget.
    Select {
        #[arg(long, default_value = "pq")]
        kind: PredictorKind,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Smallest budget whose optimized performance reaches the target.
    Budget {
        #[arg(long, default_value = "pq")]
        kind: PredictorKind,
        #[arg(long)]
        target: Option<f64>,
    },
    /// MAE tables, extrapolation split and efficiency curve over every seed.
    Eval,
    /// All predictors on identical tuples, plus their selections.
    Compare,
}

fn parse_ratio(s: &str) -> std::result::Result<MixingRatio, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    MixingRatio::new(v).map_err(|e| e.to_string())
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

struct Context {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    dump_transport: bool,
}

impl Context {
    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    fn models_dir(&self) -> PathBuf {
        self.path("models")
    }

    fn load_pair(&self, kind: PredictorKind) -> Result<ScalePair> {
        let path = model_path(self.models_dir(), kind);
        if !path.exists() {
            return Err(Error::Config(format!(
                "no fitted {kind} model at {}; run `fit` first",
                path.display()
            )));
        }
        ScalePair::load(path)
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = ExperimentConfig::load(&cli.config)?;
    let seed = cli.seed.unwrap_or(config.seeds[0]);
    fs::create_dir_all(&cli.out)?;
    let ctx = Context {
        config,
        seed,
        out: cli.out.clone(),
        dump_transport: cli.dump_transport,
    };
    match &cli.command {
        Command::Gen => gen(&ctx),
        Command::Fit => fit(&ctx),
        Command::Predict {
            kind,
            ratio,
            budget,
        } => predict(&ctx, *kind, ratio, *budget),
        Command::Project { kind, no_actual } => project(&ctx, *kind, !no_actual),
        Command::Select { kind, budget } => select(&ctx, *kind, *budget),
        Command::Budget { kind, target } => budget(&ctx, *kind, *target),
        Command::Eval => eval(&ctx),
        Command::Compare => compare(&ctx),
    }
}

fn gen(ctx: &Context) -> Result<()> {
    let exp = materialize(&ctx.config, ctx.seed)?;
    let dir = ctx.path("data");
    fs::create_dir_all(&dir)?;
    for s in &exp.sources {
        s.write_csv(dir.join(format!("{}.csv", s.id())))?;
    }
    exp.val.write_csv(dir.join("val.csv"))?;
    println!(
        "wrote {} pilots and the validation set to {}",
        exp.sources.len(),
        dir.display()
    );
    Ok(())
}

fn dump_transport(
    ctx: &Context,
    exp: &Experiment,
    ratio: &MixingRatio,
    n: usize,
    name: &str,
) -> Result<()> {
    let comp = compose(
        &exp.sources,
        &MixtureSpec {
            budget: n,
            ratio: ratio.clone(),
            seed: projektor_core::rng::derive(exp.seed, &[4, 0]),
        },
    )?;
    let dir = ctx.path("transport");
    fs::create_dir_all(&dir)?;
    transport(
        &comp.dataset,
        &exp.val,
        &ctx.config.cost_spec,
        &ctx.config.solver,
    )?
    .write_duals_csv(dir.join(format!("{name}.csv")))
}

fn values_for(
    config: &ExperimentConfig,
    exp: &Experiment,
    kinds: &[PredictorKind],
) -> Result<Option<Valuations>> {
    harness::needs_values(kinds)
        .map(|shapley| valuations(config, exp, shapley))
        .transpose()
}

fn fit(ctx: &Context) -> Result<()> {
    let exp = materialize(&ctx.config, ctx.seed)?;
    let data = build_fit_dataset(&ctx.config, &exp)?;
    data.write_csv(ctx.path("fit.csv"))?;
    let dir = ctx.models_dir();
    fs::create_dir_all(&dir)?;
    let kinds = &ctx.config.predictor_kinds;
    let values = values_for(&ctx.config, &exp, kinds)?;
    let mut failed = None;
    for &kind in kinds {
        match fit_pair(kind, &data, ctx.config.cost_spec, values.as_ref()) {
            Ok(pair) => pair.save(model_path(&dir, kind))?,
            Err(e) if e.is_numeric() => {
                log::warn!("{kind} could not be fit: {e}");
                failed.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    if ctx.dump_transport {
        let uniform = MixingRatio::uniform(ctx.config.m());
        dump_transport(ctx, &exp, &uniform, exp.n0, "uniform_n0")?;
        dump_transport(ctx, &exp, &uniform, exp.n1, "uniform_n1")?;
    }
    println!(
        "observed {} mixtures at n0={} and n1={}; models in {}",
        data.len(),
        exp.n0,
        exp.n1,
        dir.display()
    );
    failed.map_or(Ok(()), Err)
}

fn predict(
    ctx: &Context,
    kind: PredictorKind,
    ratio: &MixingRatio,
    budget: Option<usize>,
) -> Result<()> {
    let pair = ctx.load_pair(kind)?;
    let target = budget.unwrap_or(pair.n1);
    let exp = materialize(&ctx.config, ctx.seed)?;
    let (ot0, ot1) = if kind.uses_transport() {
        harness::scale_distances(&ctx.config, &exp, ratio)?
    } else {
        (0.0, 0.0)
    };
    let predicted = pair.project_query(ratio, target, ot0, ot1)?;
    if ctx.dump_transport {
        dump_transport(ctx, &exp, ratio, exp.n0, "query_n0")?;
        dump_transport(ctx, &exp, ratio, exp.n1, "query_n1")?;
    }
    let report = json!({
        "kind": kind,
        "ratio": ratio,
        "target_n": target,
        "ot_n0": ot0,
        "ot_n1": ot1,
        "predicted": predicted,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn project(ctx: &Context, kind: PredictorKind, with_actual: bool) -> Result<()> {
    if ctx.config.target_n.is_empty() {
        return Err(Error::Config(
            "config has no target_n list to project to".into(),
        ));
    }
    let pair = ctx.load_pair(kind)?;
    let exp = materialize(&ctx.config, ctx.seed)?;
    let grid = grid_ratios(ctx.config.m(), ctx.config.grid_resolution)?;
    let rows = projection_sweep(&ctx.config, &exp, &pair, &grid, with_actual)?;
    let path = ctx.path(format!("projection_{kind}.csv"));
    write_projection_csv(&path, &rows)?;
    println!("wrote {} projections to {}", rows.len(), path.display());
    Ok(())
}

fn select(ctx: &Context, kind: PredictorKind, budget: Option<usize>) -> Result<()> {
    let sel = ctx.config.select.clone().unwrap_or(harness::SelectConfig {
        budget: 0,
        optimizer: Default::default(),
    });
    let budget = budget
        .filter(|&b| b > 0)
        .or((sel.budget > 0).then_some(sel.budget))
        .ok_or_else(|| {
            Error::Config(
                "no selection budget: pass --budget or set select.budget in the config".into(),
            )
        })?;
    let pair = ctx.load_pair(kind)?;
    let exp = materialize(&ctx.config, ctx.seed)?;
    let res = select_fixed_budget(&pair, budget, &exp.sources, &exp.val, &sel.optimizer)?;
    res.write_trajectory_csv(ctx.path(format!("trajectory_{kind}.csv")))?;
    res.write_json(ctx.path(format!("selection_{kind}.json")))?;
    if ctx.dump_transport {
        dump_transport(ctx, &exp, &res.ratio, exp.n1, "selected_n1")?;
    }
    println!(
        "{kind}: p* = {} predicted {:.4} after {} iterations{}",
        res.ratio,
        res.predicted_performance,
        res.iterations,
        if res.converged {
            ""
        } else {
            " (not converged)"
        }
    );
    Ok(())
}

fn budget(ctx: &Context, kind: PredictorKind, target: Option<f64>) -> Result<()> {
    let mut search = ctx
        .config
        .budget_search
        .clone()
        .ok_or_else(|| Error::Config("config has no budget_search section".into()))?;
    if let Some(t) = target {
        search.target = t;
    }
    let pair = ctx.load_pair(kind)?;
    let exp = materialize(&ctx.config, ctx.seed)?;
    let (n, res) = search_min_budget(&pair, &exp.sources, &exp.val, &search)?;
    let report = json!({
        "target": search.target,
        "budget": n,
        "ratio": res.ratio,
        "predicted_performance": res.predicted_performance,
        "converged": res.converged,
        "iterations": res.iterations,
    });
    fs::write(
        ctx.path(format!("budget_{kind}.json")),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    println!(
        "{kind}: smallest budget {n} reaches {:.4}",
        res.predicted_performance
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn eval(ctx: &Context) -> Result<()> {
    let mut mae = csv::Writer::from_path(ctx.path("eval_mae.csv")).map_err(Error::from)?;
    mae.write_record(["seed", "kind", "train_mae", "test_mae"])?;
    let mut eff = csv::Writer::from_path(ctx.path("efficiency.csv")).map_err(Error::from)?;
    eff.write_record(["seed", "count", "kind", "test_mae"])?;
    let seeds = match ctx.seed {
        s if ctx.config.seeds.contains(&s) => ctx.config.seeds.clone(),
        s => vec![s],
    };
    for seed in seeds {
        let exp = materialize(&ctx.config, seed)?;
        let data = build_fit_dataset(&ctx.config, &exp)?;
        let report = evaluate(&ctx.config, &exp, &data)?;
        for row in &report.rows {
            mae.write_record([
                seed.to_string(),
                row.kind.to_string(),
                fmt_opt(row.train_mae),
                fmt_opt(row.test_mae),
            ])?;
        }
        for row in &report.efficiency {
            eff.write_record([
                seed.to_string(),
                row.count.to_string(),
                row.kind.to_string(),
                fmt_opt(row.test_mae),
            ])?;
        }
        log::info!("seed {seed} evaluated");
    }
    mae.flush()?;
    eff.flush()?;
    println!(
        "wrote eval_mae.csv and efficiency.csv to {}",
        ctx.out.display()
    );
    Ok(())
}

fn compare(ctx: &Context) -> Result<()> {
    let exp = materialize(&ctx.config, ctx.seed)?;
    let data: FitDataset = build_fit_dataset(&ctx.config, &exp)?;
    let (train, test) = extrapolation_split(
        &data,
        ctx.config.extrapolation_source,
        ctx.config.extrapolation_cap,
    )?;
    let kinds = PredictorKind::ALL.to_vec();
    let values = values_for(&ctx.config, &exp, &kinds)?;
    let rows = mae_table(&kinds, &train, &test, ctx.config.cost_spec, values.as_ref())?;
    let mut w = csv::Writer::from_path(ctx.path("compare.csv")).map_err(Error::from)?;
    w.write_record(["kind", "train_mae", "test_mae", "error"])?;
    for r in &rows {
        w.write_record([
            r.kind.to_string(),
            fmt_opt(r.train_mae),
            fmt_opt(r.test_mae),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    if let Some(sel) = &ctx.config.select {
        let mut w =
            csv::Writer::from_path(ctx.path("compare_selection.csv")).map_err(Error::from)?;
        let m = ctx.config.m();
        let mut header = vec!["kind".to_string()];
        header.extend((0..m).map(|i| format!("p_{i}")));
        header.extend(["predicted".into(), "actual_n1".into()]);
        w.write_record(&header)?;
        for &kind in &kinds {
            let outcome = match kind {
                PredictorKind::Loo | PredictorKind::Shapley => {
                    let v = values.as_ref().expect("valuations computed for every kind");
                    let per_scale = if kind == PredictorKind::Loo {
                        &v.loo[1]
                    } else {
                        &v.shapley.as_ref().expect("shapley requested")[1]
                    };
                    selection_ratio_from_values(per_scale).map(|(r, _)| (r, None))
                }
                _ => {
                    fit_pair(kind, &data, ctx.config.cost_spec, values.as_ref()).and_then(|pair| {
                        select_fixed_budget(
                            &pair,
                            sel.budget,
                            &exp.sources,
                            &exp.val,
                            &sel.optimizer,
                        )
                        .map(|res| (res.ratio, Some(res.predicted_performance)))
                    })
                }
            };
            let (ratio, predicted) = match outcome {
                Ok(x) => x,
                Err(e) if e.is_numeric() => {
                    log::warn!("{kind}: selection failed: {e}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let actual = match harness::observe_accuracy(&ctx.config, &exp, &ratio, exp.n1) {
                Ok(acc) => Some(acc),
                Err(Error::InsufficientData { .. }) => None,
                Err(e) => return Err(e),
            };
            let mut row = vec![kind.to_string()];
            row.extend(ratio.as_slice().iter().map(|x| x.to_string()));
            row.push(fmt_opt(predicted));
            row.push(fmt_opt(actual));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    println!("wrote compare.csv to {}", ctx.out.display());
    Ok(())
}
