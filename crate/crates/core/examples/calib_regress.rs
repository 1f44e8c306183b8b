//! Calibration probe: 1D nonlinear regression per Table C2, 3 seeds.

use gbp_core::baseline::{linear_fit_1d, rmse};
use gbp_core::factor::Activation;
use gbp_core::metrics::NullSink;
use gbp_core::synth::regression_data;
use gbp_core::*;

fn main() {
    let spec = ModelSpec {
        input: [1, 1, 1],
        batch_size: 90,
        layers: vec![
            LayerSpec::input_obs(0.02),
            LayerSpec::dense(16, Activation::Sigmoid, 5e-3, 6.0, 10.0),
            LayerSpec::dense(1, Activation::Identity, 1e-2, 1.5, 3.0),
            LayerSpec::output_obs(0.05),
        ],
    };
    for seed in 0..3u64 {
        let data = regression_data::<f64>(90, 225, seed);
        let t0 = std::time::Instant::now();
        let train_cfg = DriverConfig {
            engine: EngineConfig {
                iters: 4000,
                damping: 0.8,
                msg_dropout: 0.6,
                seed,
                ..EngineConfig::default()
            },
            build: BuildOptions::default(),
            build_seed: seed,
        };
        let tasks = vec![TaskBatch {
            inputs: data.train_x.iter().map(|&x| vec![x]).collect(),
            labels: None,
            targets: Some(data.train_y.iter().map(|&y| vec![y]).collect()),
        }];
        let post = train_filtering(&spec, &tasks, &train_cfg, &mut NullSink).unwrap();

        let mut pred_cfg = DriverConfig {
            engine: EngineConfig {
                iters: 1000,
                damping: 0.8,
                msg_dropout: 0.6,
                seed,
                ..EngineConfig::default()
            },
            build: BuildOptions::default(),
            build_seed: seed + 100,
        };
        pred_cfg.build.hard_fix_params = true;
        let test_in: Vec<Vec<f64>> = data.test_x.iter().map(|&x| vec![x]).collect();
        let outs = predict(&spec, &post, &test_in, &pred_cfg).unwrap();
        let yhat: Vec<f64> = outs.iter().map(|o| o[0].mean()).collect();
        let gbp_rmse = rmse(&yhat, &data.test_y_clean).unwrap();

        let (a, b) = linear_fit_1d(&data.train_x, &data.train_y).unwrap();
        let lin_pred: Vec<f64> = data.test_x.iter().map(|&x| a * x + b).collect();
        let lin_rmse = rmse(&lin_pred, &data.test_y_clean).unwrap();

        let improve = 100.0 * (1.0 - gbp_rmse / lin_rmse);
        println!(
            "seed {seed}: gbp {gbp_rmse:.4} linear {lin_rmse:.4} improvement {improve:+.1}% ({}) [{:.1}s]",
            if improve >= 25.0 { "PASS" } else { "fail" },
            t0.elapsed().as_secs_f64()
        );
    }
}
