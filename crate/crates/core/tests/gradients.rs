mod common;

use common::{small_batch, small_config, small_data, small_field};
use surfreg::fd::{central_gradient, max_relative_error};
use surfreg::field::FieldParams;
use surfreg::regularizers::LossWeights;
use surfreg::train::{evaluate_batch, TrainConfig};

/// Checks the full objective and, separately, its regularisation part. The analytic
/// regularisation gradient is the full gradient minus the photometric-only one.
fn check(cfg: &TrainConfig, label: &str) {
    let params = small_field(3);
    let data = small_data(&params.layout.bounds);
    let batch = small_batch(&data, cfg);
    let mut plain = *cfg;
    plain.regularize = false;
    let base = evaluate_batch(&params, &data, cfg, 0, &batch, None).unwrap();
    let photo = evaluate_batch(&params, &data, &plain, 0, &batch, None).unwrap();
    assert!(base.report.reg_batches > 0, "{label}: no surface candidates");
    let frozen = base.denominators.clone();

    for (part, g) in [
        ("total", base.gradient.clone()),
        ("regularisation", base.gradient.iter().zip(&photo.gradient).map(|(a, b)| a - b).collect::<Vec<_>>()),
    ] {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gmax > 0.0, "{label}/{part}: zero gradient");
        let mut idx: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-3 * gmax).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        idx.truncate(60);
        idx.extend((0..g.len()).step_by(37).take(20));
        let only_reg = part != "total";
        let loss = |v: &[f64]| {
            let p = FieldParams::from_values(params.layout, v.to_vec()).unwrap();
            let e = evaluate_batch(&p, &data, cfg, 0, &batch, Some(&frozen)).unwrap();
            if only_reg {
                e.report.losses.total()
            } else {
                e.total
            }
        };
        let numeric = central_gradient(&params.values, &idx, 1e-5, loss);
        let analytic: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        let err = max_relative_error(&analytic, &numeric, 1e-6 * gmax);
        println!("{label}/{part}: {} entries, max relative error {err:.3e}", idx.len());
        assert!(err < 1e-4, "{label}/{part}: relative error {err:.3e}");
    }
}

#[test]
fn photometric_only_gradient_matches_fd() {
    let mut cfg = small_config(12, 4);
    cfg.regularize = false;
    let params = small_field(3);
    let data = small_data(&params.layout.bounds);
    let batch = small_batch(&data, &cfg);
    let base = evaluate_batch(&params, &data, &cfg, 0, &batch, None).unwrap();
    assert_eq!(base.report.reg_batches, 0);
    let g = &base.gradient;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let idx: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-3 * gmax).take(80).collect();
    let loss = |v: &[f64]| {
        let p = FieldParams::from_values(params.layout, v.to_vec()).unwrap();
        evaluate_batch(&p, &data, &cfg, 0, &batch, None).unwrap().total
    };
    let numeric = central_gradient(&params.values, &idx, 1e-5, loss);
    let analytic: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
    assert!(max_relative_error(&analytic, &numeric, 1e-6 * gmax) < 1e-4);
}

#[test]
fn full_objective_gradient_matches_fd() {
    let mut cfg = small_config(12, 4);
    cfg.loss_weights = LossWeights {
        lambda_d: 0.1,
        lambda_n: 0.1,
        lambda_b: 0.03,
        lambda_s: 0.01,
    };
    check(&cfg, "full");
}

#[test]
fn each_regulariser_gradient_matches_fd() {
    for (k, name) in ["L_d", "L_n", "L_b", "L_s"].iter().enumerate() {
        let mut cfg = small_config(8, 4);
        let mut w = [0.0; 4];
        w[k] = 1.0;
        cfg.loss_weights = LossWeights {
            lambda_d: w[0],
            lambda_n: w[1],
            lambda_b: w[2],
            lambda_s: w[3],
        };
        check(&cfg, name);
    }
}

