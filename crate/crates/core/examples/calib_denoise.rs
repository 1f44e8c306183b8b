//! Calibration probe: video denoising ordering (pairwise vs conv1
//! per-frame vs conv1 continual) on a 64×64×10 synthetic sequence.

use gbp_core::factor::Activation;
use gbp_core::synth::panning_texture_video;
use gbp_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_psnr(rs: &[FrameResult<f64>]) -> f64 {
    rs.iter().map(|r| r.psnr_denoised).sum::<f64>() / rs.len() as f64
}

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

    let mut gaps1 = Vec::new();
    let mut gaps2 = Vec::new();
    for seed in 0..3u64 {
        let clean = panning_texture_video::<f64>(64, 64, 10, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17);
        let noisy: Vec<Vec<f64>> =
            clean.iter().map(|f| corrupt_salt_pepper(f, 0.1, &mut rng).unwrap()).collect();

        let pw_cfg = DriverConfig {
            engine: EngineConfig { iters: 200, damping: 0.7, seed, ..EngineConfig::default() },
            build: BuildOptions::default(),
            build_seed: seed,
        };
        let cv_cfg = DriverConfig {
            engine: EngineConfig {
                iters: 300,
                damping: 0.8,
                msg_dropout: 0.6,
                seed,
                ..EngineConfig::default()
            },
            build: BuildOptions::default(),
            build_seed: seed,
        };

        let t0 = std::time::Instant::now();
        let pw =
            denoise_video(&pairwise, &noisy, Some(&clean), DenoiseMode::PerFrame, 0.0, &pw_cfg)
                .unwrap();
        let t1 = std::time::Instant::now();
        let pf = denoise_video(&conv1, &noisy, Some(&clean), DenoiseMode::PerFrame, 0.0, &cv_cfg)
            .unwrap();
        let t2 = std::time::Instant::now();
        let ct = denoise_video(&conv1, &noisy, Some(&clean), DenoiseMode::Continual, 0.5, &cv_cfg)
            .unwrap();
        let t3 = std::time::Instant::now();

        let (p, f, c) = (mean_psnr(&pw), mean_psnr(&pf), mean_psnr(&ct));
        let noisy_psnr = pw.iter().map(|r| r.psnr_noisy).sum::<f64>() / pw.len() as f64;
        println!(
            "seed {seed}: noisy {noisy_psnr:.2} pairwise {p:.2} perframe {f:.2} continual {c:.2} | c-p {:+.2} c-f {:+.2} | {:.0}s/{:.0}s/{:.0}s",
            c - p,
            c - f,
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64()
        );
        gaps1.push(c - p);
        gaps2.push(c - f);
    }
    let g1 = gaps1.iter().sum::<f64>() / 3.0;
    let g2 = gaps2.iter().sum::<f64>() / 3.0;
    println!(
        "mean gaps: continual-pairwise {g1:+.2} (need ≥0.5) continual-perframe {g2:+.2} (need ≥0) => {}",
        if g1 >= 0.5 && g2 >= 0.0 { "PASS" } else { "fail" }
    );
}
