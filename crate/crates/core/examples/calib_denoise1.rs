//! Timing probe: one frame of each denoising method at 64×64.

use gbp_core::factor::Activation;
use gbp_core::synth::panning_texture_video;
use gbp_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let pairwise = ModelSpec {
        input: [64, 64, 1],
        batch_size: 1,
        layers: vec![
            LayerSpec::input_obs(0.2).with_robust(0.14),
            LayerSpec::pairwise_smooth(1.3, 0.35),
        ],
    };
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
    let noisy = vec![corrupt_salt_pepper(&clean[0], 0.1, &mut rng).unwrap()];

    for (name, spec, iters, damping, dropout) in [
        ("pairwise", &pairwise, 200usize, 0.7, 0.0),
        ("conv1", &conv1, 300, 0.8, 0.6),
    ] {
        let cfg = DriverConfig {
            engine: EngineConfig {
                iters,
                damping,
                msg_dropout: dropout,
                seed: 0,
                ..EngineConfig::default()
            },
            build: BuildOptions::default(),
            build_seed: 0,
        };
        let t = std::time::Instant::now();
        let r =
            denoise_video(spec, &noisy, Some(&clean), DenoiseMode::PerFrame, 0.0, &cfg).unwrap();
        println!(
            "{name}: {:.1}s psnr {:.2} (noisy {:.2})",
            t.elapsed().as_secs_f64(),
            r[0].psnr_denoised,
            r[0].psnr_noisy
        );
    }
}
