//! Calibration probe: XOR per Table C1, 5 seeds.

use gbp_core::factor::Activation;
use gbp_core::metrics::NullSink;
use gbp_core::synth::xor_dataset;
use gbp_core::*;

fn main() {
    let (inputs, labels) = xor_dataset::<f64>();
    let spec = ModelSpec {
        input: [1, 1, 2],
        batch_size: 4,
        layers: vec![
            LayerSpec::input_obs(0.02),
            LayerSpec::dense(8, Activation::leaky_relu_default(), 0.1, 3.0, 5.0),
            LayerSpec::dense(2, Activation::Identity, 0.1, 3.0, 2.0),
            LayerSpec::softmax_obs(0.1),
        ],
    };

    let mut wins = 0;
    for seed in 0..5u64 {
        let train_cfg = DriverConfig {
            engine: EngineConfig {
                iters: 600,
                damping: 0.7,
                seed,
                ..EngineConfig::default()
            },
            build: BuildOptions::default(),
            build_seed: seed,
        };
        let tasks = vec![TaskBatch { inputs: inputs.clone(), labels: Some(labels.clone()), targets: None }];
        let post = train_filtering(&spec, &tasks, &train_cfg, &mut NullSink).unwrap();

        let mut pred_cfg = DriverConfig {
            engine: EngineConfig { iters: 300, damping: 0.7, seed, ..EngineConfig::default() },
            build: BuildOptions::default(),
            build_seed: seed + 100,
        };
        pred_cfg.build.hard_fix_params = true;
        let outs = predict(&spec, &post, &inputs, &pred_cfg).unwrap();
        let preds: Vec<usize> = outs.iter().map(|o| argmax_class(o)).collect();
        let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        let logit_gaps: Vec<f64> = outs.iter().map(|o| o[1].mean() - o[0].mean()).collect();
        println!(
            "seed {seed}: {correct}/4 correct, preds {preds:?}, logit1-logit0 {:?}",
            logit_gaps.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>()
        );
        if correct == 4 {
            wins += 1;
        }
    }
    println!("seeds with 4/4: {wins}/5");
}
