//! Implementations of the CLI subcommands.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::cost::{derived_cost, CostMetric, TargetNetConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::train_eval;
use crate::genotype::Genotype;
use crate::lug::{build_lug, effective_parallelism, LookupGraph, LugBuildConfig};
use crate::search::{
    run_search, ConstraintSource, ConstraintSpec, FeatureFlags, SearchResult, SearchRunConfig,
};

use super::config::{load_dataset, parse_constraint, parse_grid, Settings};
use super::manifest::RunManifest;
use super::metrics::MetricsWriter;
use super::{
    CommonArgs, Command, CostArgs, EvalArgs, LugAction, LugBuildArgs, SearchArgs, SweepArgs,
};

pub fn dispatch(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Search(args) => cmd_search(args, argv),
        Command::Lug(LugAction::Build(args)) => cmd_lug_build(args, argv),
        Command::Eval(args) => cmd_eval(args, argv),
        Command::Cost(args) => cmd_cost(args),
        Command::Sweep(args) => cmd_sweep(args, argv),
    }
}

/// Defaults → config file → CLI flags, then dataset binding.
fn resolve(common: &CommonArgs, epochs: Option<usize>) -> Result<(Settings, Dataset)> {
    let mut settings = Settings::default();
    if let Some(path) = &common.config {
        settings.load_file(path)?;
    }
    if let Some(ds) = &common.dataset {
        settings.dataset = ds.clone();
    }
    if let Some(take) = common.take {
        settings.take = Some(take);
    }
    if let Some(metric) = &common.metric {
        settings.search.metric = CostMetric::from_name(metric)
            .ok_or_else(|| Error::config(format!("unknown metric `{metric}`")))?;
    }
    if let Some(seed) = common.seed {
        settings.search.seed = seed;
        settings.eval.seed = seed;
    }
    if let Some(flags) = &common.flags {
        settings.search.flags = FeatureFlags::parse(flags)?;
    }
    if let Some(epochs) = epochs {
        settings.search.epochs = epochs;
    }
    settings.search.deterministic = common.deterministic;
    settings.eval.deterministic = common.deterministic;
    let dataset = load_dataset(&settings.dataset, settings.take)?;
    settings.bind_dataset(&dataset);
    Ok((settings, dataset))
}

fn out_dir(common: &CommonArgs, manifest: &RunManifest) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(manifest.run_id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Resolve K_d and K_d' from --constraint / --lug / --kd-prime.
fn resolve_constraint(
    args: &SearchArgs,
    settings: &Settings,
    manifest: &mut RunManifest,
) -> Result<Option<ConstraintSpec>> {
    if !settings.search.flags.resource_constraint {
        return Ok(None);
    }
    let metric = settings.search.metric;
    match (&args.lug, args.kd_prime) {
        (Some(_), Some(_)) => Err(Error::config(
            "give exactly one of --lug or --kd-prime, not both",
        )),
        (None, Some(kd_prime)) => {
            let kd = match &args.constraint {
                Some(c) => parse_constraint(c, metric)?,
                None => kd_prime,
            };
            Ok(Some(ConstraintSpec {
                metric,
                kd,
                kd_prime,
                source: ConstraintSource::Direct,
                penalty_scale: 1.0 / kd_prime,
            }))
        }
        (Some(lug_path), None) => {
            let constraint = args.constraint.as_ref().ok_or_else(|| {
                Error::config("--lug needs --constraint <K_d> to look up")
            })?;
            let kd = parse_constraint(constraint, metric)?;
            let text = std::fs::read_to_string(lug_path)?;
            let lug = LookupGraph::from_text(&text)?;
            if lug.metric != metric {
                return Err(Error::config(format!(
                    "LUG metric {} does not match requested {}",
                    lug.metric.name(),
                    metric.name()
                )));
            }
            manifest.add_input("lug", lug_path)?;
            let looked = lug.lookup(kd)?;
            if looked.extrapolated {
                eprintln!(
                    "warning: K_d={kd} lies outside the calibrated range; clamped to K_d'={}",
                    looked.kd_prime
                );
            }
            Ok(Some(ConstraintSpec {
                metric,
                kd,
                kd_prime: looked.kd_prime,
                source: ConstraintSource::Lug,
                penalty_scale: 1.0 / looked.kd_prime,
            }))
        }
        (None, None) => Err(Error::config(
            "resource constraint is enabled but no search bound was given; \
             build a lookup graph with `dcanas lug build` and pass --lug <file> \
             --constraint <K_d>, or give --kd-prime directly (or disable with --flags -rc)",
        )),
    }
}

fn write_search_artifacts(
    dir: &Path,
    manifest: &mut RunManifest,
    writer: &mut MetricsWriter,
    result: &SearchResult,
    constraint: Option<&ConstraintSpec>,
    deterministic: bool,
) -> Result<()> {
    let genotype_path = dir.join("genotype.txt");
    std::fs::write(&genotype_path, result.genotype.to_text())?;
    manifest.add_artifact(&genotype_path);
    for rec in &result.epochs {
        writer.search_epoch(rec)?;
    }
    writer.summary(
        "search_summary",
        json!({
            "seed": result.seed,
            "derived_cost": result.derived_cost,
            "kd": constraint.map(|c| c.kd),
            "kd_prime": constraint.map(|c| c.kd_prime),
            "best_val_accuracy": result.best_val_accuracy,
            "stopped_early": result.stopped_early,
            "wall_clock_s": if deterministic { 0.0 } else { result.wall_clock_s },
        }),
    )?;
    Ok(())
}

fn cmd_search(args: SearchArgs, argv: Vec<String>) -> Result<()> {
    let (settings, dataset) = resolve(&args.common, args.epochs)?;
    let mut manifest = RunManifest::new(
        "search",
        argv,
        settings.canonical(),
        settings.search.seed,
        args.common.deterministic,
    );
    let constraint = resolve_constraint(&args, &settings, &mut manifest)?;
    let dir = out_dir(&args.common, &manifest)?;
    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;

    let result = run_search(settings.search.clone(), constraint.clone(), &dataset)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut writer =
        MetricsWriter::create(&metrics_path, &manifest.run_id(), args.common.deterministic)?;
    write_search_artifacts(
        &dir,
        &mut manifest,
        &mut writer,
        &result,
        constraint.as_ref(),
        args.common.deterministic,
    )?;
    manifest.add_artifact(&metrics_path);
    manifest.finalize(&manifest_path)?;

    println!("run {}", manifest.run_id());
    println!("genotype {}", dir.join("genotype.txt").display());
    println!(
        "derived_cost {} {}",
        result.derived_cost,
        settings.search.metric.name()
    );
    if let Some(c) = &constraint {
        println!("kd {} kd_prime {}", c.kd, c.kd_prime);
    }
    if let Some(acc) = result.best_val_accuracy {
        println!("best_val_accuracy {acc:.4}");
    }
    Ok(())
}

fn cmd_lug_build(args: LugBuildArgs, argv: Vec<String>) -> Result<()> {
    let (settings, dataset) = resolve(&args.common, args.epochs)?;
    let mut base = settings.search.clone();
    base.track_val_accuracy = false;

    let grid = if let Some(rest) = args.grid.strip_prefix("auto") {
        let n: usize = match rest.strip_prefix(':') {
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("bad grid point count `{v}`")))?,
            None => 5,
        };
        if n < 2 {
            return Err(Error::config("auto grid needs at least 2 points"));
        }
        // Anchor on an unconstrained run's k_s, then bracket it.
        let mut anchor_cfg = base.clone();
        anchor_cfg.flags.resource_constraint = false;
        let anchor = run_search(anchor_cfg, None, &dataset)?;
        let ks = anchor
            .epochs
            .last()
            .map(|e| e.ks)
            .ok_or_else(|| Error::config("anchor search ran zero epochs"))?;
        let ratio = (1.5f64 / 0.25).powf(1.0 / (n - 1) as f64);
        (0..n).map(|i| 0.25 * ks * ratio.powi(i as i32)).collect()
    } else {
        parse_grid(&args.grid)?
    };

    let mut manifest = RunManifest::new(
        "lug-build",
        argv,
        {
            let mut cfg = settings.canonical();
            cfg.insert(
                "lug.grid".to_string(),
                grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
            );
            cfg.insert("lug.repeats".to_string(), args.repeats.to_string());
            cfg
        },
        base.seed,
        args.common.deterministic,
    );
    let dir = out_dir(&args.common, &manifest)?;
    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;

    let build = LugBuildConfig {
        grid,
        repeats: args.repeats,
        parallelism: args.parallel,
        base,
    };
    let total = build.grid.len() * build.repeats.max(1);
    eprintln!(
        "lug build: {} points x {} repeats = {} searches ({} workers)",
        build.grid.len(),
        build.repeats.max(1),
        total,
        effective_parallelism(args.parallel).min(total),
    );
    let lug = build_lug(&build, &dataset)?;

    let lug_path = args.lug_out.clone().unwrap_or_else(|| dir.join("lug.txt"));
    std::fs::write(&lug_path, lug.to_text())?;
    manifest.add_artifact(&lug_path);
    manifest.finalize(&manifest_path)?;
    for p in lug.points() {
        println!(
            "point kd_prime={} kd_measured={} seeds={}{}",
            p.kd_prime,
            p.kd_measured,
            p.seed_count,
            if p.flagged { " (non-monotone)" } else { "" }
        );
    }
    println!("lug {}", lug_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs, argv: Vec<String>) -> Result<()> {
    let (mut settings, dataset) = resolve(&args.common, None)?;
    if let Some(epochs) = args.epochs {
        settings.eval.epochs = epochs;
    }
    let text = std::fs::read_to_string(&args.genotype)?;
    let genotype = Genotype::from_text(&text)?;
    let mut manifest = RunManifest::new(
        "eval",
        argv,
        settings.canonical(),
        settings.eval.seed,
        args.common.deterministic,
    );
    manifest.add_input("genotype", &args.genotype)?;
    let dir = out_dir(&args.common, &manifest)?;
    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;

    let result = train_eval(&genotype, &dataset, &settings.eval)?;

    let metrics_path = dir.join("metrics.jsonl");
    let mut writer =
        MetricsWriter::create(&metrics_path, &manifest.run_id(), args.common.deterministic)?;
    for rec in &result.curve {
        writer.eval_epoch(rec)?;
    }
    writer.summary(
        "eval_summary",
        json!({
            "seed": result.seed,
            "final_test_accuracy": result.final_test_accuracy,
            "best_test_accuracy": result.best_test_accuracy,
            "params": result.params,
            "flops": result.flops,
            "wall_clock_s": if args.common.deterministic { 0.0 } else { result.wall_clock_s },
        }),
    )?;
    manifest.add_artifact(&metrics_path);
    manifest.finalize(&manifest_path)?;

    println!(
        "final_test_accuracy {:.4} best {:.4} params {} flops {}",
        result.final_test_accuracy, result.best_test_accuracy, result.params, result.flops
    );
    Ok(())
}

fn cmd_cost(args: CostArgs) -> Result<()> {
    let metric = CostMetric::from_name(&args.metric)
        .ok_or_else(|| Error::config(format!("unknown metric `{}`", args.metric)))?;
    let (h, w) = args
        .input
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::config(format!("bad --input `{}`, expected HxW", args.input)))?;
    let text = std::fs::read_to_string(&args.genotype)?;
    let genotype = Genotype::from_text(&text)?;
    let cfg = TargetNetConfig {
        layers: args.cells,
        channels: args.channels,
        input_channels: args.in_channels,
        input_hw: (h, w),
        classes: args.classes,
    };
    let cost = derived_cost(&genotype, &cfg, metric)?;
    println!("{cost}");
    Ok(())
}

struct SweepJob {
    label: String,
    seed: u64,
    cfg: SearchRunConfig,
    constraint: Option<ConstraintSpec>,
}

struct SweepOutcome {
    accuracy: f64,
    cost: u64,
    search_s: f64,
}

fn run_sweep_job(job: &SweepJob, dataset: &Dataset, settings: &Settings) -> Result<SweepOutcome> {
    let result = run_search(job.cfg.clone(), job.constraint.clone(), dataset)?;
    let mut eval_cfg = settings.eval.clone();
    eval_cfg.seed = job.seed;
    eval_cfg.target = job.cfg.target.clone();
    let eval = train_eval(&result.genotype, dataset, &eval_cfg)?;
    Ok(SweepOutcome {
        accuracy: eval.best_test_accuracy,
        cost: result.derived_cost,
        search_s: result.wall_clock_s,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_sweep(args: SweepArgs, argv: Vec<String>) -> Result<()> {
    let (settings, dataset) = resolve(&args.common, args.epochs)?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad seed `{s}`")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::config("--seeds must name at least one seed"));
    }

    let mut jobs: Vec<SweepJob> = Vec::new();
    if args.ablate {
        // One row per flag combination; constraint off so rows time the
        // search accelerations themselves.
        let combos: Vec<FeatureFlags> = vec![
            FeatureFlags::all_off(),
            FeatureFlags { weight_sharing: true, ..FeatureFlags::all_off() },
            FeatureFlags { channel_bottleneck: true, ..FeatureFlags::all_off() },
            FeatureFlags { derived_cells: true, ..FeatureFlags::all_off() },
            FeatureFlags { resource_constraint: false, ..FeatureFlags::all_on() },
        ];
        for flags in combos {
            for &seed in &seeds {
                let mut cfg = settings.search.clone();
                cfg.flags = flags;
                cfg.seed = seed;
                jobs.push(SweepJob {
                    label: flags.label(),
                    seed,
                    cfg,
                    constraint: None,
                });
            }
        }
    } else {
        let constraints = args
            .constraints
            .as_ref()
            .ok_or_else(|| Error::config("--constraints is required (or use --ablate)"))?;
        let levels: Vec<&str> = constraints.split(',').map(|s| s.trim()).collect();
        if levels.is_empty() {
            return Err(Error::config("--constraints must name at least one level"));
        }
        let lug = match &args.lug {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                Some(LookupGraph::from_text(&text)?)
            }
            None => None,
        };
        if settings.search.flags.resource_constraint && lug.is_none() {
            return Err(Error::config(
                "sweep with the resource constraint enabled needs --lug <file>; \
                 build one with `dcanas lug build` (or disable with --flags -rc)",
            ));
        }
        for level in levels {
            let kd = parse_constraint(level, settings.search.metric)?;
            let constraint = if settings.search.flags.resource_constraint {
                let looked = lug.as_ref().unwrap().lookup(kd)?;
                Some(ConstraintSpec {
                    metric: settings.search.metric,
                    kd,
                    kd_prime: looked.kd_prime,
                    source: ConstraintSource::Lug,
                    penalty_scale: 1.0 / looked.kd_prime,
                })
            } else {
                None
            };
            for &seed in &seeds {
                let mut cfg = settings.search.clone();
                cfg.seed = seed;
                jobs.push(SweepJob {
                    label: level.to_string(),
                    seed,
                    cfg,
                    constraint: constraint.clone(),
                });
            }
        }
    }

    let mut manifest = RunManifest::new(
        "sweep",
        argv,
        {
            let mut cfg = settings.canonical();
            cfg.insert(
                "sweep.labels".to_string(),
                jobs.iter().map(|j| j.label.clone()).collect::<Vec<_>>().join(";"),
            );
            cfg.insert(
                "sweep.seeds".to_string(),
                seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            );
            cfg
        },
        seeds[0],
        args.common.deterministic,
    );
    if let Some(path) = &args.lug {
        manifest.add_input("lug", path)?;
    }
    let dir = out_dir(&args.common, &manifest)?;
    let manifest_path = dir.join("manifest.json");
    manifest.write(&manifest_path)?;

    // Timing sweeps must not share cores between runs.
    let workers = if args.ablate {
        1
    } else {
        effective_parallelism(args.parallel).min(jobs.len().max(1))
    };
    let mut outcomes: Vec<Option<Result<SweepOutcome>>> = Vec::new();
    outcomes.resize_with(jobs.len(), || None);
    if workers <= 1 {
        for (slot, job) in jobs.iter().enumerate() {
            outcomes[slot] = Some(run_sweep_job(job, &dataset, &settings));
        }
    } else {
        let slots: Vec<std::sync::Mutex<Option<Result<SweepOutcome>>>> =
            jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for w in 0..workers {
                let jobs = &jobs;
                let slots = &slots;
                let dataset = &dataset;
                let settings = &settings;
                scope.spawn(move || {
                    let mut i = w;
                    while i < jobs.len() {
                        *slots[i].lock().unwrap() =
                            Some(run_sweep_job(&jobs[i], dataset, settings));
                        i += workers;
                    }
                });
            }
        });
        for (slot, cell) in slots.into_iter().enumerate() {
            outcomes[slot] = cell.into_inner().unwrap();
        }
    }

    // Aggregate in job label order (first occurrence wins the row order).
    let mut labels: Vec<String> = Vec::new();
    for job in &jobs {
        if !labels.contains(&job.label) {
            labels.push(job.label.clone());
        }
    }
    let mut csv = String::new();
    let header = if args.ablate {
        "flags,seeds,acc_mean,acc_std,cost_mean,search_s_mean"
    } else {
        "constraint,seeds,acc_mean,acc_std,cost_mean,cost_std,search_s_mean"
    };
    csv.push_str(header);
    csv.push('\n');
    for label in &labels {
        let mut accs = Vec::new();
        let mut costs = Vec::new();
        let mut times = Vec::new();
        for (job, outcome) in jobs.iter().zip(outcomes.iter_mut()) {
            if &job.label != label {
                continue;
            }
            let o = outcome.take().expect("job ran")?;
            accs.push(o.accuracy);
            costs.push(o.cost as f64);
            times.push(if args.common.deterministic { 0.0 } else { o.search_s });
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (cost_mean, cost_std) = mean_std(&costs);
        let (time_mean, _) = mean_std(&times);
        if args.ablate {
            csv.push_str(&format!(
                "{label},{},{acc_mean:.4},{acc_std:.4},{cost_mean:.1},{time_mean:.2}\n",
                accs.len()
            ));
        } else {
            csv.push_str(&format!(
                "{label},{},{acc_mean:.4},{acc_std:.4},{cost_mean:.1},{cost_std:.1},{time_mean:.2}\n",
                accs.len()
            ));
        }
    }
    let csv_path = dir.join("sweep.csv");
    std::fs::write(&csv_path, &csv)?;
    manifest.add_artifact(&csv_path);
    manifest.finalize(&manifest_path)?;
    let mut stdout = std::io::stdout();
    let _ = stdout.write_all(csv.as_bytes());
    Ok(())
}
