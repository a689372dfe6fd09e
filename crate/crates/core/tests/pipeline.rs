//! End-to-end pruning of small models.

use trim_core::masking::ComparisonGroup;
use trim_core::pipeline::{
    capture_activations, evaluate_models, GradientLoss, evaluate_run, prune_model, score_layers, Activation, CalibrationSet,
    PruneConfig, ToyModel,
};
use trim_core::{LayerAllocation, ScoreMetric, TrimError};

fn model() -> ToyModel<f32> {
    ToyModel::random(&[12, 24, 16, 6], Activation::Relu, 5).unwrap()
}

fn uniform(m: &ToyModel<f32>, t: f64) -> LayerAllocation {
    LayerAllocation::uniform(&m.layer_sizes(), t).unwrap()
}

#[test]
fn captured_inputs_match_a_manual_forward_pass() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 20, 0).unwrap();
    let acts = capture_activations(&m, &calib).unwrap();
    assert_eq!(acts.len(), m.len());
    assert_eq!(acts[0], calib.samples);
    for (i, layer) in m.layers().iter().enumerate().skip(1) {
        let prev = &m.layers()[i - 1];
        let (d, n) = prev.weight.shape();
        let x = &acts[i - 1];
        for b in 0..x.cols() {
            for r in 0..d {
                let z: f64 = (0..n).map(|j| prev.weight.get(r, j) as f64 * x.get(j, b) as f64).sum();
                let want = prev.activation.apply(z);
                let got = acts[i].get(r, b) as f64;
                assert!((want - got).abs() < 1e-4, "layer {} row {r} sample {b}", layer.name);
            }
        }
    }
    let out = m.forward(&calib.samples).unwrap();
    let last = m.layers().last().unwrap();
    assert_eq!(out, last.weight.matmul(acts.last().unwrap()).unwrap());
}

#[test]
fn global_budget_is_met_to_one_weight() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 64, 1).unwrap();
    let total = m.total_params();
    for t in [0.3, 0.5, 0.7, 0.9] {
        let run = prune_model(&m, &calib, &uniform(&m, t), &PruneConfig::default()).unwrap();
        assert_eq!(run.pruned_count(), (t * total as f64).round_ties_even() as usize, "T={t}");
        assert!((run.pruned_fraction() - t).abs() <= 1.0 / total as f64);
        for (rec, layer) in run.layers.iter().zip(run.pruned.layers()) {
            let zeros = layer.weight.as_slice().iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, rec.mask.pruned_count());
            assert!(rec.result.q_best.value >= rec.result.q_uniform.value);
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 32, 2).unwrap();
    let a = prune_model(&m, &calib, &uniform(&m, 0.6), &PruneConfig::default()).unwrap();
    let b = prune_model(&m, &calib, &uniform(&m, 0.6), &PruneConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a.report()).unwrap(),
        serde_json::to_string(&b.report()).unwrap()
    );
}

#[test]
fn dense_against_itself_is_lossless() {
    let m = model();
    let holdout = CalibrationSet::synthetic_gaussian(12, 32, 9).unwrap();
    let r = evaluate_models(&m, &m, &holdout).unwrap();
    assert!((r.global.end_to_end_cosine - 1.0).abs() < 1e-9);
    assert_eq!(r.global.loss_delta, 0.0);
    assert_eq!(r.global.sparsity, 0.0);
    assert!(r.layers.iter().all(|l| (l.cosim_flat - 1.0).abs() < 1e-9));
}

#[test]
fn heavier_pruning_degrades_more() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 64, 3).unwrap();
    let holdout = CalibrationSet::synthetic_gaussian(12, 64, 4).unwrap();
    let cos: Vec<f64> = [0.2, 0.5, 0.85]
        .iter()
        .map(|&t| {
            let run = prune_model(&m, &calib, &uniform(&m, t), &PruneConfig::default()).unwrap();
            let r = evaluate_run(&run, &holdout).unwrap();
            assert!((r.global.sparsity - run.pruned_fraction()).abs() < 1e-12);
            r.global.end_to_end_cosine
        })
        .collect();
    assert!(cos[2] <= cos[1] && cos[1] <= cos[0], "{cos:?}");
}

#[test]
fn holdout_must_not_reuse_the_calibration_seed() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 16, 7).unwrap();
    let run = prune_model(&m, &calib, &uniform(&m, 0.5), &PruneConfig::default()).unwrap();
    let same = CalibrationSet::synthetic_gaussian(12, 16, 7).unwrap();
    assert!(matches!(evaluate_run(&run, &same), Err(TrimError::Contract(_))));
}

#[test]
fn recalc_keeps_scores_and_first_layer() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 48, 5).unwrap();
    let alloc = uniform(&m, 0.7);
    let off = prune_model(&m, &calib, &alloc, &PruneConfig::default()).unwrap();
    let cfg = PruneConfig {
        recalc: true,
        ..PruneConfig::default()
    };
    let on = prune_model(&m, &calib, &alloc, &cfg).unwrap();
    for (a, b) in off.layers.iter().zip(&on.layers) {
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.mask.pruned_count(), b.mask.pruned_count());
    }
    assert_eq!(off.layers[0].mask, on.layers[0].mask);
    assert_eq!(off.pruned_count(), on.pruned_count());
}

#[test]
fn whole_layer_group_without_trim() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 32, 6).unwrap();
    let cfg = PruneConfig {
        trim_enabled: false,
        group: ComparisonGroup::WholeLayer,
        ..PruneConfig::default()
    };
    let run = prune_model(&m, &calib, &uniform(&m, 0.5), &cfg).unwrap();
    assert_eq!(run.pruned_count(), (0.5 * m.total_params() as f64).round_ties_even() as usize);
    for rec in &run.layers {
        assert_eq!(rec.result.chosen_lr, 0.0);
        assert_eq!(rec.result.q_best, rec.result.q_uniform);
    }
}

#[test]
fn gblm_needs_targets() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 8, 0).unwrap();
    let err = score_layers(&m, &calib, ScoreMetric::Gblm, 0.01, 1.0, GradientLoss::SquaredError).unwrap_err();
    assert!(matches!(err, TrimError::Contract(_)));
}

#[test]
fn missing_layer_in_allocation_is_rejected() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 8, 0).unwrap();
    let mut alloc = uniform(&m, 0.5);
    alloc.layers.pop();
    assert!(prune_model(&m, &calib, &alloc, &PruneConfig::default()).is_err());
}

#[test]
fn report_shape() {
    let m = model();
    let calib = CalibrationSet::synthetic_gaussian(12, 16, 0).unwrap();
    let run = prune_model(&m, &calib, &uniform(&m, 0.5), &PruneConfig::default()).unwrap();
    let v = serde_json::to_value(run.report()).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 3);
    let l0 = &v["layers"][0];
    for key in ["T", "chosen_lr", "q_uniform", "q_best", "per_iter_quality", "lr_trials", "s_vector_ref"] {
        assert!(l0.get(key).is_some(), "missing {key}");
    }
    assert_eq!(l0["s_vector_ref"], "layer0.svec");
}

#[test]
fn f64_models_prune_too() {
    let m: ToyModel<f64> = ToyModel::random(&[8, 16, 4], Activation::Gelu, 1).unwrap();
    let calib = CalibrationSet::synthetic_gaussian(8, 32, 0).unwrap();
    let alloc = LayerAllocation::uniform(&m.layer_sizes(), 0.5).unwrap();
    let run = prune_model(&m, &calib, &alloc, &PruneConfig::default()).unwrap();
    assert_eq!(run.pruned_count(), 96);
}

#[test]
fn gradient_loss_changes_gblm_scores_only() {
    let m = model();
    let mut calib = CalibrationSet::synthetic_gaussian(12, 16, 0).unwrap();
    let teacher: ToyModel<f32> = ToyModel::random(&[12, 24, 16, 6], Activation::Relu, 99).unwrap();
    calib = calib.clone().with_targets(teacher.forward(&calib.samples).unwrap()).unwrap();
    let sq = score_layers(&m, &calib, ScoreMetric::Gblm, 0.01, 1.0, GradientLoss::SquaredError).unwrap();
    let ab = score_layers(&m, &calib, ScoreMetric::Gblm, 0.01, 1.0, GradientLoss::AbsoluteError).unwrap();
    assert_ne!(sq, ab);
    let w1 = score_layers(&m, &calib, ScoreMetric::Wanda, 0.01, 1.0, GradientLoss::SquaredError).unwrap();
    let w2 = score_layers(&m, &calib, ScoreMetric::Wanda, 0.01, 1.0, GradientLoss::AbsoluteError).unwrap();
    assert_eq!(w1, w2);
}
