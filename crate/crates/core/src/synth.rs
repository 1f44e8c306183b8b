//! Deterministic synthetic datasets for the bundled experiments:
//! XOR corners, the 1D nonlinear-regression generator, a stroke-rendered
//! digit corpus (an MNIST stand-in that ships with the repository), and a
//! panning-texture video for denoising runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::real::{real, Real};

/// The four XOR corners on the unit square with labels `x ⊕ y`.
pub fn xor_dataset<T: Real>() -> (Vec<Vec<T>>, Vec<usize>) {
    let inputs = vec![
        vec![real(0.0), real(0.0)],
        vec![real(0.0), real(1.0)],
        vec![real(1.0), real(0.0)],
        vec![real(1.0), real(1.0)],
    ];
    (inputs, vec![0, 1, 1, 0])
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace<T: Real>(lo: f64, hi: f64, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![real((lo + hi) / 2.0)];
    }
    (0..n)
        .map(|i| real(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// 1D nonlinear regression data plus the noise-free targets used to score a
/// fit.
#[derive(Clone, Debug)]
pub struct RegressionData<T> {
    pub train_x: Vec<T>,
    pub train_y: Vec<T>,
    pub test_x: Vec<T>,
    /// Noise-free targets at `test_x`, normalized with the *training* stats.
    pub test_y_clean: Vec<T>,
    pub z_mean: f64,
    pub z_std: f64,
}

/// Draw `n_train` inputs `x ~ U(−1,1)`, generate
/// `z = 5·sin(6.7x) + 0.15·(10x)² + ε` with `ε ~ N(0, std = 1.5 + x²)`,
/// and normalize `y = (z − mean(z)) / (2·std(z))` using empirical
/// (population) statistics over the training z's. Test inputs are `n_test`
/// evenly spaced points over [−1,1]; their targets drop ε but reuse the
/// training normalization.
pub fn regression_data<T: Real>(n_train: usize, n_test: usize, seed: u64) -> RegressionData<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n_train).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let zs: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * (1.5 + x * x);
            regression_curve(x) + eps
        })
        .collect();
    let mean = zs.iter().sum::<f64>() / n_train as f64;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n_train as f64;
    let std = var.sqrt();
    let norm = |z: f64| (z - mean) / (2.0 * std);

    let test_x = linspace::<T>(-1.0, 1.0, n_test);
    let test_y_clean = test_x
        .iter()
        .map(|&x| real(norm(regression_curve(x.to_f64_c()))))
        .collect();
    RegressionData {
        train_x: xs.iter().map(|&x| real(x)).collect(),
        train_y: zs.iter().map(|&z| real(norm(z))).collect(),
        test_x,
        test_y_clean,
        z_mean: mean,
        z_std: std,
    }
}

/// The noise-free regression curve `5·sin(6.7x) + 0.15·(10x)²`.
pub fn regression_curve(x: f64) -> f64 {
    5.0 * (6.7 * x).sin() + 0.15 * (10.0 * x) * (10.0 * x)
}

// ---------------------------------------------------------------------------
// Stroke-rendered digit corpus
// ---------------------------------------------------------------------------

/// Polyline strokes per digit, in a unit box (x right, y down).
fn glyph(digit: usize) -> Vec<Vec<(f64, f64)>> {
    fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
        let n = 14;
        (0..=n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    }
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.24, 0.36)],
        1 => vec![vec![(0.36, 0.28), (0.55, 0.12), (0.55, 0.88)]],
        2 => vec![vec![
            (0.28, 0.28),
            (0.36, 0.14),
            (0.54, 0.11),
            (0.68, 0.2),
            (0.69, 0.36),
            (0.55, 0.55),
            (0.3, 0.86),
            (0.72, 0.86),
        ]],
        3 => vec![vec![
            (0.3, 0.18),
            (0.5, 0.11),
            (0.67, 0.22),
            (0.6, 0.42),
            (0.45, 0.48),
            (0.62, 0.53),
            (0.7, 0.72),
            (0.54, 0.88),
            (0.31, 0.82),
        ]],
        4 => vec![
            vec![(0.62, 0.88), (0.62, 0.12), (0.27, 0.62), (0.76, 0.62)],
        ],
        5 => vec![vec![
            (0.68, 0.13),
            (0.34, 0.13),
            (0.31, 0.45),
            (0.55, 0.42),
            (0.7, 0.56),
            (0.68, 0.76),
            (0.5, 0.88),
            (0.3, 0.8),
        ]],
        6 => vec![vec![
            (0.64, 0.13),
            (0.45, 0.22),
            (0.33, 0.45),
            (0.31, 0.68),
            (0.44, 0.87),
            (0.62, 0.82),
            (0.68, 0.63),
            (0.52, 0.52),
            (0.34, 0.6),
        ]],
        7 => vec![
            vec![(0.26, 0.14), (0.74, 0.14), (0.45, 0.88)],
            vec![(0.38, 0.5), (0.6, 0.5)],
        ],
        8 => vec![
            ellipse(0.5, 0.3, 0.17, 0.17),
            ellipse(0.5, 0.66, 0.21, 0.2),
        ],
        9 => vec![
            ellipse(0.52, 0.32, 0.19, 0.19),
            vec![(0.7, 0.38), (0.67, 0.88)],
        ],
        _ => panic!("digit out of range"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Per-sample rendering jitter.
struct Jitter {
    dx: f64,
    dy: f64,
    scale: f64,
    angle: f64,
    thickness: f64,
}

fn render_digit<T: Real>(digit: usize, side: usize, jit: &Jitter, rng: &mut ChaCha8Rng) -> Vec<T> {
    let strokes = glyph(digit);
    let (sin, cos) = jit.angle.sin_cos();
    let aa = 0.03; // antialiasing band width in glyph units
    let noise = 0.06;
    let mut out = Vec::with_capacity(side * side);
    for py in 0..side {
        for px in 0..side {
            // Pixel center → glyph coordinates (inverse of the sample's
            // scale/rotate/translate about the box center).
            let u = (px as f64 + 0.5) / side as f64 - 0.5 - jit.dx;
            let v = (py as f64 + 0.5) / side as f64 - 0.5 - jit.dy;
            let gx = (cos * u + sin * v) / jit.scale + 0.5;
            let gy = (-sin * u + cos * v) / jit.scale + 0.5;
            let mut d = f64::INFINITY;
            for poly in &strokes {
                for seg in poly.windows(2) {
                    d = d.min(dist_to_segment((gx, gy), seg[0], seg[1]));
                }
            }
            let ink = ((jit.thickness - d) / aa + 0.5).clamp(0.0, 1.0);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * noise;
            out.push(real((ink + eps).clamp(0.0, 1.0)));
        }
    }
    out
}

/// A deterministic 28×28 handwriting-style digit corpus: stroke glyphs with
/// per-sample translation, scale, rotation, and line-width jitter plus pixel
/// noise. Labels cycle `i mod 10`. Same seed → identical corpus.
pub fn digit_corpus<T: Real>(n: usize, seed: u64) -> Dataset<T> {
    let side = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let jit = Jitter {
            dx: rng.gen_range(-0.08..0.08),
            dy: rng.gen_range(-0.08..0.08),
            scale: rng.gen_range(0.82..1.12),
            angle: rng.gen_range(-0.2..0.2),
            thickness: rng.gen_range(0.05..0.09),
        };
        images.push(render_digit(digit, side, &jit, &mut rng));
        labels.push(digit);
    }
    Dataset { images, h: side, w: side, c: 1, labels: Some(labels), name: "digits".into() }
}

// ---------------------------------------------------------------------------
// Panning-texture video
// ---------------------------------------------------------------------------

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    sharp: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    amp: f64,
}

/// A clean single-channel video: an oriented-texture field (sharp and smooth
/// gratings plus soft blobs) panned across the crop at a fixed velocity, so
/// consecutive frames share structure and a continually learned filter bank
/// transfers between them. Intensities are min–max normalized over the whole
/// sequence into [0.05, 0.95]; same seed → identical frames.
pub fn panning_texture_video<T: Real>(
    h: usize,
    w: usize,
    frames: usize,
    seed: u64,
) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<Grating> = (0..3)
        .map(|k| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(2.5..6.0) * std::f64::consts::TAU;
            Grating {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.5..1.0),
                // One near-square-wave grating for edge content.
                sharp: if k == 0 { 6.0 } else { 1.0 },
            }
        })
        .collect();
    let blobs: Vec<Blob> = (0..3)
        .map(|_| Blob {
            cx: rng.gen_range(0.0..1.0),
            cy: rng.gen_range(0.0..1.0),
            r: rng.gen_range(0.1..0.22),
            amp: rng.gen_range(0.8..1.6) * if rng.gen::<bool>() { 1.0 } else { -1.0 },
        })
        .collect();
    // Pan velocity in crop widths per frame (≈ 1.6/0.9 px per frame at 64²).
    let (vx, vy) = (1.6 / w as f64, 0.9 / h as f64);

    let field = |x: f64, y: f64| -> f64 {
        let mut g = 0.0;
        for gr in &gratings {
            let s = (gr.fx * x + gr.fy * y + gr.phase).sin();
            g += gr.amp * (gr.sharp * s).tanh() / gr.sharp.tanh();
        }
        for b in &blobs {
            // Periodic distance so the pan never leaves the texture.
            let dx = (x - b.cx) - (x - b.cx).round();
            let dy = (y - b.cy) - (y - b.cy).round();
            g += b.amp * (-(dx * dx + dy * dy) / (2.0 * b.r * b.r)).exp();
        }
        g
    };

    let mut raw = Vec::with_capacity(frames);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..frames {
        let (ox, oy) = (t as f64 * vx, t as f64 * vy);
        let mut img = Vec::with_capacity(h * w);
        for py in 0..h {
            for px in 0..w {
                let v = field(px as f64 / w as f64 + ox, py as f64 / h as f64 + oy);
                lo = lo.min(v);
                hi = hi.max(v);
                img.push(v);
            }
        }
        raw.push(img);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.into_iter()
        .map(|img| {
            img.into_iter()
                .map(|v| real((0.05 + 0.9 * (v - lo) / span).clamp(0.05, 0.95)))
                .collect()
        })
        .collect()
}
