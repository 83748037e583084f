use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use poolal::classifier::accuracy;
use poolal::dataset::{feature_matrix, generate_synthetic, write_class_list, write_csv, Dataset};
use poolal::engine::{
    baseline_noisy_pool, baseline_seed_only, baseline_supervised, export_curve, read_curve,
    run_learner, simulated_oracle, ActiveLearner, LearningCurve, LoopCheckpoint, LoopConfig,
    LoopState, Strategy,
};
use poolal_service::{AppState, ServiceConfig};

use crate::args::{BaselineArgs, GenerateArgs, RunArgs, ServeArgs};
use crate::settings::{runtime, Global};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn generate(g: &Global, args: &GenerateArgs) -> Result<(), CliError> {
    let spec = g.synthetic_spec(Some(args.classes), &args.synthetic)?;
    let ds = generate_synthetic(&spec).map_err(runtime)?;
    ensure_dir(&g.out_dir)?;
    let csv = g.out_dir.join("dataset.csv");
    write_csv(&ds, &csv).map_err(runtime)?;
    write_class_list(ds.class_names(), g.out_dir.join("classes.txt")).map_err(runtime)?;
    g.log(format_args!("wrote {}", csv.display()));
    println!("seed={} pool={} test={}", ds.seed_set().len(), ds.pool().len(), ds.test_set().len());
    Ok(())
}

fn run_name(strategy: Strategy, rep: usize) -> String {
    format!("{strategy}-r{rep}")
}

/// One (strategy, repetition) run with periodic checkpoints under `runs/`.
fn run_one(
    g: &Global,
    ds: Arc<Dataset>,
    cfg: LoopConfig,
    save_every: usize,
    runs_dir: &Path,
    name: &str,
    resume: bool,
) -> Result<LearningCurve, CliError> {
    let curve_path = runs_dir.join(format!("{name}.csv"));
    let ckpt_path = runs_dir.join(format!("{name}.alloop"));
    if resume && curve_path.exists() {
        g.log(format_args!("[{name}] already finished"));
        return read_curve(&curve_path).map_err(runtime);
    }
    let mut oracle = simulated_oracle(&ds);
    let learner = if resume && ckpt_path.exists() {
        let ckpt = LoopCheckpoint::load(&ckpt_path).map_err(runtime)?;
        g.log(format_args!("[{name}] resuming at iteration {}", ckpt.iteration));
        ActiveLearner::resume(ds, cfg, ckpt).map_err(runtime)?
    } else {
        ActiveLearner::new(ds, cfg).map_err(runtime)?
    };
    let (curve, _) = run_learner(learner, &mut oracle, |l| {
        let t = l.iteration();
        if t % save_every == 0 {
            l.checkpoint().save(&ckpt_path)?;
            g.log(format_args!("[{name}] iteration {t}"));
        }
        Ok(())
    })
    .map_err(|abort| {
        CliError::Runtime(format!(
            "{name}: {} (checkpoint kept at {})",
            abort.error,
            ckpt_path.display()
        ))
    })?;
    export_curve(&curve, &curve_path).map_err(runtime)?;
    if ckpt_path.exists() {
        fs::remove_file(&ckpt_path).map_err(runtime)?;
    }
    Ok(curve)
}

/// Mean of each column over the runs that reached it.
pub fn summarize(checkpoints: &[usize], curves: &[LearningCurve]) -> Vec<Option<f64>> {
    checkpoints
        .iter()
        .map(|&c| {
            let hits: Vec<f64> = curves.iter().filter_map(|k| k.at(c)).map(|p| p.accuracy).collect();
            (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
        })
        .collect()
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |a| format!("{:.2}", 100.0 * a))
}

pub fn run(g: &Global, args: &RunArgs) -> Result<(), CliError> {
    let source = g.data_source(&args.data)?;
    let (base_cfg, save_every) = g.loop_config(&args.looping)?;
    let strategies = g.strategies(args.strategies.as_deref(), false)?;
    let reps = g.repetitions(args.repetitions)?;
    let runs_dir = g.out_dir.join("runs");
    ensure_dir(&runs_dir)?;

    let shared = (!source.varies_per_repetition()).then(|| source.load(0)).transpose()?;
    let mut rows = Vec::new();
    for &strategy in &strategies {
        let mut curves = Vec::with_capacity(reps);
        for rep in 0..reps {
            let ds = match &shared {
                Some(ds) => ds.clone(),
                None => source.load(rep)?,
            };
            let cfg = LoopConfig {
                strategy,
                rng_seed: g.rng_seed.wrapping_add(rep as u64),
                ..base_cfg.clone()
            };
            curves.push(run_one(g, ds, cfg, save_every, &runs_dir, &run_name(strategy, rep), args.resume)?);
        }
        rows.push((strategy, summarize(&base_cfg.checkpoint_iterations, &curves)));
    }

    let checkpoints = &base_cfg.checkpoint_iterations;
    let mut csv = String::from("strategy");
    for c in checkpoints {
        csv.push_str(&format!(",{c}"));
    }
    csv.push('\n');
    for (s, means) in &rows {
        csv.push_str(s.name());
        for m in means {
            csv.push(',');
            if let Some(v) = m {
                csv.push_str(&v.to_string());
            }
        }
        csv.push('\n');
    }
    write_text(&g.out_dir.join("summary.csv"), &csv)?;

    let mut table = format!("{:<10}", "strategy");
    for c in checkpoints {
        table.push_str(&format!(" {c:>7}"));
    }
    table.push('\n');
    for (s, means) in &rows {
        table.push_str(&format!("{:<10}", s.name()));
        for m in means {
            table.push_str(&format!(" {:>7}", percent(*m)));
        }
        table.push('\n');
    }
    write_text(&g.out_dir.join("summary.txt"), &table)?;
    println!("accuracy (%) at checkpoint, mean of {reps} run(s)");
    print!("{table}");
    Ok(())
}

fn final_accuracy(ds: &Dataset, state: &LoopState) -> Result<f64, CliError> {
    let x = feature_matrix(ds.test_set().iter().map(|e| e.features.as_slice()), ds.dim());
    let y: Vec<usize> = ds.test_set().iter().filter_map(|e| e.true_class).collect();
    accuracy(state.learner.as_classifier(), x.view(), &y).map_err(runtime)
}

pub fn baselines(g: &Global, args: &BaselineArgs) -> Result<(), CliError> {
    let source = g.data_source(&args.data)?;
    let (base_cfg, _) = g.loop_config(&args.looping)?;
    let strategies = g.strategies(args.strategies.as_deref(), true)?;
    let reps = g.repetitions(args.repetitions)?;
    let tc = &base_cfg.classifier;

    let mut names: Vec<String> = ["seed-only", "supervised", "noisy-pool"].map(String::from).to_vec();
    names.extend(strategies.iter().map(|s| s.name().to_owned()));
    let mut sums = vec![0.0; names.len()];
    for rep in 0..reps {
        let ds = source.load(rep)?;
        sums[0] += baseline_seed_only(&ds, tc).map_err(runtime)?;
        sums[1] += baseline_supervised(&ds, tc).map_err(runtime)?;
        sums[2] += baseline_noisy_pool(&ds, tc).map_err(runtime)?;
        for (i, &strategy) in strategies.iter().enumerate() {
            let cfg = LoopConfig {
                strategy,
                rng_seed: g.rng_seed.wrapping_add(rep as u64),
                ..base_cfg.clone()
            };
            let mut oracle = simulated_oracle(&ds);
            let learner = ActiveLearner::new(ds.clone(), cfg).map_err(runtime)?;
            let (_, state) = run_learner(learner, &mut oracle, |_| Ok(())).map_err(|a| runtime(a.error))?;
            sums[3 + i] += final_accuracy(&ds, &state)?;
            g.log(format_args!("[{strategy} r{rep}] done"));
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / reps as f64).collect();

    let mut csv = String::from("method,accuracy\n");
    let mut table = format!("{:<12} {:>12}\n", "method", "accuracy (%)");
    for (name, m) in names.iter().zip(&means) {
        csv.push_str(&format!("{name},{m}\n"));
        table.push_str(&format!("{name:<12} {:>12}\n", percent(Some(*m))));
    }
    ensure_dir(&g.out_dir)?;
    write_text(&g.out_dir.join("baselines.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

pub fn serve(g: &Global, args: &ServeArgs) -> Result<(), CliError> {
    let source = g.data_source(&args.data)?;
    let (mut cfg, _) = g.loop_config(&args.looping)?;
    let strategy = match &args.strategy {
        Some(s) => Some(s.clone()),
        None => g.file.raw("serve.strategy").map(str::to_owned),
    };
    cfg.strategy = match strategy {
        Some(s) => s.parse().map_err(CliError::Usage)?,
        None => cfg.strategy,
    };
    let bind = match args.bind {
        Some(a) => a,
        None => g.file.get("serve.bind")?.unwrap_or_else(|| "127.0.0.1:8080".parse().expect("literal")),
    };
    let timeout = match args.query_timeout_secs {
        Some(s) => Some(s),
        None => g.file.get("serve.query_timeout_secs")?,
    };
    let static_dir = args
        .static_dir
        .clone()
        .or_else(|| g.file.raw("serve.static_dir").map(PathBuf::from));

    ensure_dir(&g.out_dir)?;
    let svc = ServiceConfig {
        checkpoint_path: Some(poolal_service::default_checkpoint_path(&g.out_dir)),
        query_timeout: timeout.map(Duration::from_secs),
        static_dir,
    };
    let state = AppState::open(source.load(0)?, cfg, svc, args.resume).map_err(runtime)?;

    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async move {
        let listener = poolal_service::bind(bind)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {bind}: {e}")))?;
        let addr = listener.local_addr().map_err(runtime)?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().map_err(runtime)?;
        poolal_service::serve(listener, state).await.map_err(runtime)
    })
}
