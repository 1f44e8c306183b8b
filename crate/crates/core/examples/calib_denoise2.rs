//! Stats probe: where does conv1 denoising spend its updates?

use gbp_core::factor::Activation;
use gbp_core::layers::build_model;
use gbp_core::metrics::NullSink;
use gbp_core::synth::panning_texture_video;
use gbp_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let conv1 = ModelSpec {
        input: [64, 64, 1],
        batch_size: 1,
        layers: vec![
            LayerSpec::input_obs(0.2).with_robust(0.2),
            LayerSpec::conv_transpose(3, 4, Activation::Identity, 0.1, 0.018, 0.5)
                .with_robust(1.4),
        ],
    };
    let clean = panning_texture_video::<f64>(64, 64, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy = corrupt_salt_pepper(&clean[0], 0.1, &mut rng).unwrap();

    for iters in [30usize, 300] {
        let cfg = EngineConfig {
            iters,
            damping: 0.8,
            msg_dropout: 0.6,
            seed: 0,
            ..EngineConfig::default()
        };
        let (mut g, mv) = build_model(
            &conv1,
            std::slice::from_ref(&noisy),
            None,
            None,
            None,
            &BuildOptions::default(),
            0,
        )
        .unwrap();
        let t = std::time::Instant::now();
        let r = run_inference(&mut g, &cfg, &mut NullSink).unwrap();
        let den: Vec<f64> =
            mv.examples[0].input.iter().map(|&v| g.belief(v).unwrap().mean()).collect();
        println!(
            "iters {iters}: {:.1}s energy {:.1} psnr {:.2} stats {:?}",
            t.elapsed().as_secs_f64(),
            r.final_energy,
            psnr(&clean[0], &den).unwrap(),
            r.stats
        );
    }
}
