use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

use trim_core::allocation::{outlier_ratio, owl_allocate, OwlParams};
use trim_core::diagnostics::{
    degradation_curve, gini_report, outlier_dense_stress, parse_grid, remove_one_dimension, DegradationCurve,
    GiniReport, RemovalReport, RemovalStrategy, StressArm, StressReport,
};
use trim_core::optimizer::TrimConfig;
use trim_core::pipeline::{
    capture_activations, evaluate_models, prune_model, score_layers, train_regressor, Activation, CalibrationSet,
    CalibrationSource, EvalReport, PruneConfig, RunReport, ToyModel, REPORT_SCHEMA_VERSION,
};
use trim_core::{LayerAllocation, ScoreMatrix, ScoreMetric, Seed, TensorContainer, TrimError};

use crate::output::{create_dir, write_csv, write_json};
use crate::{
    AllocMethod, AllocateArgs, DemoArgs, DiagnoseArgs, Diagnostic, EvalArgs, ModelArgs, PruneArgs, ScoreArgs,
    ScoreOpts, UsageError,
};

type Model = ToyModel<f32>;
type Calib = CalibrationSet<f32>;

pub const DEMO_DIMS: [usize; 3] = [16, 32, 8];
const DEMO_TRAIN_STEPS: usize = 200;
const DEMO_TRAIN_LR: f64 = 0.01;

const RUN_CONTAINER: &str = "run.tnsr";
const RUN_REPORT: &str = "run.json";
const DENSE_MODEL: &str = "dense.tnsr";
const PRUNED_MODEL: &str = "pruned.tnsr";

fn load_model(path: &Path) -> anyhow::Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_calib(args: &ModelArgs, model: &Model) -> anyhow::Result<Calib> {
    match &args.calib {
        Some(p) => Calib::load(p).with_context(|| format!("loading calibration {}", p.display())),
        None => Ok(Calib::synthetic_gaussian(model.input_dim(), args.calib_samples, args.seed)?),
    }
}

fn scores_for(model: &Model, calib: &Calib, opts: &ScoreOpts) -> anyhow::Result<Vec<ScoreMatrix<f32>>> {
    Ok(score_layers(model, calib, opts.metric, opts.damping, opts.gblm_alpha, opts.gradient_loss)?)
}

/// Trains a small ReLU regressor on a random teacher so that its weights
/// carry learned structure.
pub fn demo(args: DemoArgs) -> anyhow::Result<()> {
    create_dir(&args.out_dir)?;
    let seed = args.seed;
    let teacher = Model::random(&DEMO_DIMS, Activation::Relu, seed.wrapping_add(1))?;
    let mut model = Model::random(&DEMO_DIMS, Activation::Relu, seed)?;
    let calib = Calib::synthetic_gaussian(DEMO_DIMS[0], args.samples, seed.wrapping_add(2))?;
    let targets = teacher.forward(&calib.samples)?;
    train_regressor(&mut model, &calib.samples, &targets, DEMO_TRAIN_STEPS, DEMO_TRAIN_LR)?;
    model.save(args.out_dir.join("model.tnsr"))?;
    calib.with_targets(targets)?.save(args.out_dir.join("calib.tnsr"))?;
    println!("{}", args.out_dir.display());
    Ok(())
}

pub fn score(args: ScoreArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model.model)?;
    let calib = load_calib(&args.model, &model)?;
    let scores = scores_for(&model, &calib, &args.score)?;
    let mut c = TensorContainer::new();
    for (layer, a) in model.layers().iter().zip(&scores) {
        c.insert_matrix(format!("{}.score", layer.name), a.scores())?;
    }
    c.save(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn read_scores(path: &Path) -> anyhow::Result<Vec<(String, ScoreMatrix<f32>)>> {
    let c = TensorContainer::load(path).with_context(|| format!("loading scores {}", path.display()))?;
    let mut out = Vec::new();
    for name in c.names() {
        if let Some(layer) = name.strip_suffix(".score") {
            // the stored values carry no metric tag; the label is only nominal
            out.push((layer.to_string(), ScoreMatrix::new(c.matrix(name)?, ScoreMetric::Wanda)?));
        }
    }
    if out.is_empty() {
        return Err(TrimError::Format(format!("{} holds no .score tensors", path.display())).into());
    }
    Ok(out)
}

pub fn allocate(args: AllocateArgs) -> anyhow::Result<()> {
    let alloc = match args.method {
        AllocMethod::Import => {
            let from = args.from.as_ref().expect("required by clap");
            LayerAllocation::load(from).with_context(|| format!("importing {}", from.display()))?
        }
        AllocMethod::Uniform | AllocMethod::Owl => {
            let scores = read_scores(args.scores.as_ref().expect("required by clap"))?;
            let t = args.t.expect("required by clap");
            let names: Vec<String> = scores.iter().map(|(n, _)| n.clone()).collect();
            let sizes: Vec<u64> = scores.iter().map(|(_, a)| a.scores().len() as u64).collect();
            if args.method == AllocMethod::Uniform {
                let layers: Vec<(String, u64)> = names.into_iter().zip(sizes).collect();
                LayerAllocation::uniform(&layers, t)?
            } else {
                let p = OwlParams {
                    m: args.owl_m,
                    lambda: args.owl_lambda,
                };
                let ratios: Vec<f64> = scores.iter().map(|(_, a)| outlier_ratio(a, p.m)).collect();
                owl_allocate(&names, &ratios, &sizes, t, p, args.cutoff)?
            }
        }
    };
    alloc.save(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

/// `run.json`: the run report plus what is needed to evaluate it later.
#[derive(Serialize)]
struct RunFile<'a> {
    #[serde(flatten)]
    report: RunReport,
    calibration: &'a CalibrationSource,
    config: &'a PruneConfig,
    allocation: &'a LayerAllocation,
}

fn prune_config(args: &PruneArgs) -> anyhow::Result<PruneConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: PruneConfig = serde_json::from_str(&text)
            .map_err(|e| TrimError::Format(format!("config {}: {e}", path.display())))?;
        return Ok(cfg);
    }
    Ok(PruneConfig {
        score_metric: args.score.metric,
        hessian_damping: args.score.damping,
        gblm_blend: args.score.gblm_alpha,
        gradient_loss: args.score.gradient_loss,
        trim: TrimConfig {
            k_iters: args.k,
            lr_schedule: args.lr_schedule.clone(),
            cutoff: args.cutoff,
            layer_metric: args.layer_metric,
            dim_metric: args.dim_metric,
            ..TrimConfig::default()
        },
        trim_enabled: !args.no_trim,
        recalc: args.recalc,
        group: args.group,
    })
}

pub fn prune(args: PruneArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model.model)?;
    let calib = load_calib(&args.model, &model)?;
    let cfg = prune_config(&args)?;
    let allocation = match (&args.allocation, args.t) {
        (Some(p), _) => LayerAllocation::load(p).with_context(|| format!("loading allocation {}", p.display()))?,
        (None, Some(t)) => LayerAllocation::uniform(&model.layer_sizes(), t)?,
        (None, None) => return Err(UsageError("either --allocation or --t is required".into()).into()),
    };
    let run = prune_model(&model, &calib, &allocation, &cfg)?;

    create_dir(&args.out_dir)?;
    let mut c = TensorContainer::new();
    for l in &run.layers {
        c.insert_matrix(format!("{}.mask", l.name), &l.mask.to_matrix::<f32>())?;
        c.insert_vector(format!("{}.svec", l.name), l.result.s_best.values())?;
        c.insert_matrix(format!("{}.score", l.name), l.scores.scores())?;
    }
    c.save(args.out_dir.join(RUN_CONTAINER))?;
    run.dense.save(args.out_dir.join(DENSE_MODEL))?;
    run.pruned.save(args.out_dir.join(PRUNED_MODEL))?;
    let report = run.report();
    write_json(
        &args.out_dir.join(RUN_REPORT),
        &RunFile {
            report: report.clone(),
            calibration: &run.calibration,
            config: &run.config,
            allocation: &run.allocation,
        },
    )?;
    for l in &report.layers {
        println!(
            "{}\tT={:.4}\tlr={}\tq_uniform={:.6}\tq_best={:.6}",
            l.layer, l.t, l.chosen_lr, l.q_uniform, l.q_best
        );
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

#[derive(Serialize)]
struct GiniFile {
    schema_version: u32,
    score_metric: ScoreMetric,
    layers: Vec<GiniReport>,
}

#[derive(Serialize)]
struct CurveLayer {
    layer: String,
    #[serde(flatten)]
    curve: DegradationCurve,
}

#[derive(Serialize)]
struct CurveFile {
    schema_version: u32,
    score_metric: ScoreMetric,
    layers: Vec<CurveLayer>,
}

#[derive(Serialize)]
struct RemovalFile {
    schema_version: u32,
    removal: RemovalReport,
    eval: EvalReport,
}

#[derive(Serialize)]
struct StressEntry {
    report: StressReport,
    eval: EvalReport,
}

#[derive(Serialize)]
struct StressFile {
    schema_version: u32,
    score_metric: ScoreMetric,
    outlier_dense: StressEntry,
    random: StressEntry,
}

fn holdout_for(args: &DiagnoseArgs, model: &Model) -> anyhow::Result<Calib> {
    if args.model.calib.is_none() && args.model.seed == args.holdout_seed {
        return Err(UsageError("--holdout-seed must differ from the calibration --seed".into()).into());
    }
    Ok(Calib::synthetic_gaussian(
        model.input_dim(),
        args.model.calib_samples,
        args.holdout_seed,
    )?)
}

pub fn diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model.model)?;
    let calib = load_calib(&args.model, &model)?;
    create_dir(&args.out_dir)?;
    let metric = args.score.metric;
    match args.which {
        Diagnostic::Gini => {
            let scores = scores_for(&model, &calib, &args.score)?;
            let layers: Vec<GiniReport> = model
                .layers()
                .iter()
                .zip(&scores)
                .map(|(l, a)| gini_report(&l.name, a, args.bins))
                .collect();
            let rows: Vec<Vec<String>> = layers
                .iter()
                .flat_map(|r| {
                    r.per_row_gini
                        .iter()
                        .enumerate()
                        .map(|(i, g)| vec![r.layer.clone(), i.to_string(), fmt(*g)])
                })
                .collect();
            let header = ["layer", "row", "gini"].map(String::from);
            write_csv(&args.out_dir.join("gini.csv"), &header, &rows)?;
            write_json(
                &args.out_dir.join("gini.json"),
                &GiniFile {
                    schema_version: REPORT_SCHEMA_VERSION,
                    score_metric: metric,
                    layers,
                },
            )?;
        }
        Diagnostic::Curve => {
            let grid = parse_grid(&args.grid)?;
            let scores = scores_for(&model, &calib, &args.score)?;
            let acts = capture_activations(&model, &calib)?;
            let mut layers = Vec::with_capacity(model.len());
            for ((l, a), x) in model.layers().iter().zip(&scores).zip(&acts) {
                layers.push(CurveLayer {
                    layer: l.name.clone(),
                    curve: degradation_curve(&l.weight, x, a, &grid, args.cutoff)?,
                });
            }
            let mut header = vec!["layer".to_string(), "row".to_string()];
            header.extend(grid.iter().map(|g| fmt(*g)));
            let rows: Vec<Vec<String>> = layers
                .iter()
                .flat_map(|cl| {
                    cl.curve.per_dim_quality.iter().enumerate().map(|(i, q)| {
                        let mut row = vec![cl.layer.clone(), i.to_string()];
                        row.extend(q.iter().map(|v| fmt(*v)));
                        row
                    })
                })
                .collect();
            write_csv(&args.out_dir.join("curve.csv"), &header, &rows)?;
            write_json(
                &args.out_dir.join("curve.json"),
                &CurveFile {
                    schema_version: REPORT_SCHEMA_VERSION,
                    score_metric: metric,
                    layers,
                },
            )?;
        }
        Diagnostic::RemoveOne => {
            let strategy: RemovalStrategy = args.strategy.parse()?;
            let holdout = holdout_for(&args, &model)?;
            let (modified, removal) = remove_one_dimension(&model, strategy)?;
            let eval = evaluate_models(&model, &modified, &holdout)?;
            write_json(
                &args.out_dir.join("remove_one.json"),
                &RemovalFile {
                    schema_version: REPORT_SCHEMA_VERSION,
                    removal,
                    eval,
                },
            )?;
        }
        Diagnostic::OutlierStress => {
            let holdout = holdout_for(&args, &model)?;
            let acts = capture_activations(&model, &calib)?;
            let run_arm = |arm| -> anyhow::Result<StressEntry> {
                let (modified, report) =
                    outlier_dense_stress(&model, &acts, args.owl_m, args.top_frac, args.row_sparsity, arm)?;
                let eval = evaluate_models(&model, &modified, &holdout)?;
                Ok(StressEntry { report, eval })
            };
            let outlier_dense = run_arm(StressArm::OutlierDense)?;
            let random = run_arm(StressArm::Random {
                seed: Seed(args.model.seed),
            })?;
            println!(
                "outlier_dense\tend_to_end_cosine={:.6}\nrandom\tend_to_end_cosine={:.6}",
                outlier_dense.eval.global.end_to_end_cosine, random.eval.global.end_to_end_cosine
            );
            write_json(
                &args.out_dir.join("outlier_stress.json"),
                &StressFile {
                    schema_version: REPORT_SCHEMA_VERSION,
                    score_metric: metric,
                    outlier_dense,
                    random,
                },
            )?;
        }
    }
    println!("{}", args.out_dir.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let report_path = args.run.join(RUN_REPORT);
    let text = std::fs::read_to_string(&report_path).with_context(|| format!("reading {}", report_path.display()))?;
    let run: Value =
        serde_json::from_str(&text).map_err(|e| TrimError::Format(format!("{}: {e}", report_path.display())))?;
    let calibration: CalibrationSource = serde_json::from_value(run["calibration"].clone())
        .map_err(|e| TrimError::Format(format!("{}: calibration: {e}", report_path.display())))?;

    let dense = load_model(&args.run.join(DENSE_MODEL))?;
    let pruned = load_model(&args.run.join(PRUNED_MODEL))?;
    let holdout = match &args.holdout {
        Some(p) => Calib::load(p).with_context(|| format!("loading holdout {}", p.display()))?,
        None => {
            if calibration == (CalibrationSource::SyntheticGaussian { seed: Seed(args.holdout_seed) }) {
                return Err(TrimError::Contract("holdout seed must differ from the calibration seed".into()).into());
            }
            Calib::synthetic_gaussian(dense.input_dim(), args.holdout_samples, args.holdout_seed)?
        }
    };
    let report = evaluate_models(&dense, &pruned, &holdout)?;
    let out = args.out.unwrap_or_else(|| args.run.join("eval.json"));
    write_json(&out, &report)?;
    println!(
        "sparsity={:.6}\tend_to_end_cosine={:.6}\tloss_delta={:.6e}",
        report.global.sparsity, report.global.end_to_end_cosine, report.global.loss_delta
    );
    Ok(())
}
