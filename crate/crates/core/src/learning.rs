//! Continual learning: parameter-posterior filtering, prior interpolation,
//! prediction with pinned parameters, and video-denoising drivers.
//!
//! Training is inference: build the batch graph with [`build_model`], run
//! GBP, and read the parameter marginals back out. Filtering feeds those
//! marginals in as the priors of the next batch's graph, so the data of a
//! batch can be discarded once its graph is dropped and the posterior
//! accumulates information batch by batch — exactly, in the linear-Gaussian
//! case, since messages between tasks are only ever passed forward.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::engine::{run_inference, EngineConfig};
use crate::error::{CoreError, Result};
use crate::gaussian::GaussianInfo;
use crate::graph::FactorGraph;
use crate::layers::{build_model, BuildOptions, ModelSpec, ModelVars};
use crate::metrics::{MetricsSink, NullSink};
use crate::real::{real, Real};

/// Marginal Gaussian posterior over one layer's parameters, in the exact
/// variable order the builder creates them (weights output-major, then
/// biases per channel; see [`ModelSpec::param_counts`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPosterior<T> {
    /// Index of the layer in `ModelSpec::layers`.
    pub layer_index: usize,
    pub weights: Vec<GaussianInfo<T>>,
    pub biases: Vec<GaussianInfo<T>>,
}

/// Parameter posterior for a whole model: per-layer marginals plus the
/// fingerprint of the [`ModelSpec`] it was trained under. The fingerprint is
/// checked whenever the posterior meets a spec, so stale posteriors fail
/// loudly instead of silently mis-shaping priors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPosterior<T> {
    pub fingerprint: String,
    pub layers: Vec<LayerPosterior<T>>,
}

impl<T: Real> ParamPosterior<T> {
    /// The spec's nominal parameter priors (`N(0, σ_w²)` per layer) shaped
    /// as a posterior — the `original_prior` that [`interpolate_prior`]
    /// mixes back toward. A fresh build's actual priors are the seeded,
    /// draw-centered ones of [`ParamPosterior::from_spec_seeded`].
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let mut layers = Vec::new();
        for (li, nw, nb) in spec.param_counts()? {
            let sigma_w = spec.layers[li]
                .sigma_weight_prior
                .ok_or_else(|| CoreError::ModelMismatch(format!("layer {li} has no weight prior")))?;
            let m = GaussianInfo::from_mean_sigma(T::zero(), real(sigma_w));
            layers.push(LayerPosterior {
                layer_index: li,
                weights: vec![m; nw],
                biases: vec![m; nb],
            });
        }
        Ok(ParamPosterior { fingerprint: spec.fingerprint(), layers })
    }

    /// The exact per-parameter priors a fresh build assigns under
    /// `build_seed`: weight priors are centered on the builder's seeded
    /// symmetry-breaking draws (`N(σ_w·z, σ_w²)`, `z` standard normal),
    /// bias priors on zero. This replays the builder's draw order, so a
    /// graph built from `(spec, build_seed)` with no posterior has these
    /// marginals as its parameter beliefs before any message passing.
    pub fn from_spec_seeded(spec: &ModelSpec, build_seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(build_seed);
        let mut layers = Vec::new();
        for (li, nw, nb) in spec.param_counts()? {
            let sigma_w = spec.layers[li]
                .sigma_weight_prior
                .ok_or_else(|| CoreError::ModelMismatch(format!("layer {li} has no weight prior")))?;
            let weights = (0..nw)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    GaussianInfo::from_mean_sigma(real::<T>(sigma_w * z), real(sigma_w))
                })
                .collect();
            let zero = GaussianInfo::from_mean_sigma(T::zero(), real(sigma_w));
            layers.push(LayerPosterior { layer_index: li, weights, biases: vec![zero; nb] });
        }
        Ok(ParamPosterior { fingerprint: spec.fingerprint(), layers })
    }

    /// Read the current parameter marginals out of a trained batch graph.
    ///
    /// Errors with [`CoreError::DegenerateBelief`] if any parameter belief
    /// has non-positive precision (no information ever reached it).
    pub fn extract(graph: &FactorGraph<T>, vars: &ModelVars, spec: &ModelSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(vars.params.len());
        for lp in &vars.params {
            let read = |ids: &[usize]| -> Result<Vec<GaussianInfo<T>>> {
                ids.iter()
                    .map(|&v| {
                        let b = graph.belief(v)?;
                        if b.lam <= T::zero() {
                            return Err(CoreError::DegenerateBelief(v));
                        }
                        Ok(b)
                    })
                    .collect()
            };
            layers.push(LayerPosterior {
                layer_index: lp.layer_index,
                weights: read(&lp.weights)?,
                biases: read(&lp.biases)?,
            });
        }
        Ok(ParamPosterior { fingerprint: spec.fingerprint(), layers })
    }

    /// Verify this posterior was produced under `spec`.
    pub fn check_fingerprint(&self, spec: &ModelSpec) -> Result<()> {
        let actual = spec.fingerprint();
        if self.fingerprint != actual {
            return Err(CoreError::FingerprintMismatch {
                stored: self.fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Total number of parameters covered.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }
}

/// One task/batch of a [`train_filtering`] sequence.
#[derive(Clone, Debug, Default)]
pub struct TaskBatch<T> {
    /// Flattened input grids, one per datapoint (channel-major).
    pub inputs: Vec<Vec<T>>,
    /// Class labels for a `softmax_obs` head.
    pub labels: Option<Vec<usize>>,
    /// Output observations for an `output_obs` head.
    pub targets: Option<Vec<Vec<T>>>,
}

/// Ordered batches `[z₁ … z_T]` consumed by filtering.
pub type TaskSequence<T> = Vec<TaskBatch<T>>;

/// Shared driver knobs: the engine schedule plus graph-construction options.
#[derive(Clone, Debug)]
pub struct DriverConfig {
    pub engine: EngineConfig,
    pub build: BuildOptions,
    /// Base seed for graph construction (parameter linearization sampling);
    /// batch `t` / chunk `c` uses `build_seed + t`.
    pub build_seed: u64,
}

impl DriverConfig {
    pub fn new(engine: EngineConfig) -> Self {
        DriverConfig { engine, build: BuildOptions::default(), build_seed: 0 }
    }
}

/// Minibatched continual learning by parameter filtering (§3.4 steps 1–3).
///
/// For each task `t`: build the graph with parameter priors set to
/// `posterior_{t−1}` (the spec prior for `t = 0`), run GBP, extract the new
/// marginals, and drop the graph — the task's data is never needed again.
/// `sink.batch_start(t)` precedes each task's iteration records.
pub fn train_filtering<T: Real, S: MetricsSink>(
    spec: &ModelSpec,
    tasks: &[TaskBatch<T>],
    cfg: &DriverConfig,
    sink: &mut S,
) -> Result<ParamPosterior<T>> {
    if tasks.is_empty() {
        return Err(CoreError::InvalidParameter("empty task sequence".into()));
    }
    let mut post: Option<ParamPosterior<T>> = None;
    for (t, task) in tasks.iter().enumerate() {
        sink.batch_start(t);
        let (mut g, mv) = build_model(
            spec,
            &task.inputs,
            task.labels.as_deref(),
            task.targets.as_deref(),
            post.as_ref(),
            &cfg.build,
            cfg.build_seed.wrapping_add(t as u64),
        )?;
        run_inference(&mut g, &cfg.engine, sink)?;
        post = Some(ParamPosterior::extract(&g, &mv, spec)?);
    }
    Ok(post.expect("tasks nonempty"))
}

/// Blend a posterior toward the original prior, per parameter and in moment
/// space: `μ ← α·μ_orig + (1−α)·μ_post`, `σ ← α·σ_orig + (1−α)·σ_post`.
/// `α = 0` keeps the posterior, `α = 1` restores the original prior.
pub fn interpolate_prior<T: Real>(
    posterior: &ParamPosterior<T>,
    original: &ParamPosterior<T>,
    alpha: f64,
) -> Result<ParamPosterior<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::InvalidParameter(format!("alpha must be in [0,1], got {alpha}")));
    }
    if posterior.fingerprint != original.fingerprint {
        return Err(CoreError::FingerprintMismatch {
            stored: posterior.fingerprint.clone(),
            actual: original.fingerprint.clone(),
        });
    }
    let a = real::<T>(alpha);
    let b = T::one() - a;
    let blend = |p: &GaussianInfo<T>, o: &GaussianInfo<T>| -> Result<GaussianInfo<T>> {
        let (pm, pv) = p.to_moments().ok_or_else(|| {
            CoreError::ModelMismatch("posterior marginal with non-positive precision".into())
        })?;
        let (om, ov) = o.to_moments().ok_or_else(|| {
            CoreError::ModelMismatch("original prior with non-positive precision".into())
        })?;
        let mu = a * om + b * pm;
        let sigma = a * ov.sqrt() + b * pv.sqrt();
        Ok(GaussianInfo::from_mean_sigma(mu, sigma))
    };
    let mut layers = Vec::with_capacity(posterior.layers.len());
    for (pl, ol) in posterior.layers.iter().zip(&original.layers) {
        if pl.layer_index != ol.layer_index
            || pl.weights.len() != ol.weights.len()
            || pl.biases.len() != ol.biases.len()
        {
            return Err(CoreError::ModelMismatch(
                "posterior/original prior layer layouts differ".into(),
            ));
        }
        let weights =
            pl.weights.iter().zip(&ol.weights).map(|(p, o)| blend(p, o)).collect::<Result<_>>()?;
        let biases =
            pl.biases.iter().zip(&ol.biases).map(|(p, o)| blend(p, o)).collect::<Result<_>>()?;
        layers.push(LayerPosterior { layer_index: pl.layer_index, weights, biases });
    }
    Ok(ParamPosterior { fingerprint: posterior.fingerprint.clone(), layers })
}

/// Prediction: inference with parameters pinned by their posterior.
///
/// Builds the graph without label/target observations, soft-pinning each
/// parameter with its posterior marginal (or hard-fixing at the mean with
/// precision 1e8 when `cfg.build.hard_fix_params`), runs GBP, and returns the
/// last-layer belief per example. Classification reads logits out of these
/// beliefs; [`argmax_class`] picks the predicted class.
pub fn predict<T: Real>(
    spec: &ModelSpec,
    posterior: &ParamPosterior<T>,
    inputs: &[Vec<T>],
    cfg: &DriverConfig,
) -> Result<Vec<Vec<GaussianInfo<T>>>> {
    posterior.check_fingerprint(spec)?;
    let (mut g, mv) =
        build_model(spec, inputs, None, None, Some(posterior), &cfg.build, cfg.build_seed)?;
    run_inference(&mut g, &cfg.engine, &mut NullSink)?;
    mv.examples
        .iter()
        .map(|ex| ex.output.iter().map(|&v| g.belief(v)).collect::<Result<Vec<_>>>())
        .collect()
}

/// [`predict`] over independent chunks of `chunk` examples, evaluated on the
/// rayon pool. The posterior is read-only, every chunk builds its own graph
/// with seed `build_seed + chunk_index`, and outputs keep input order, so the
/// result is independent of thread scheduling.
pub fn predict_chunked<T: Real>(
    spec: &ModelSpec,
    posterior: &ParamPosterior<T>,
    inputs: &[Vec<T>],
    chunk: usize,
    cfg: &DriverConfig,
) -> Result<Vec<Vec<GaussianInfo<T>>>> {
    if chunk == 0 {
        return Err(CoreError::InvalidParameter("chunk size must be ≥ 1".into()));
    }
    let chunks: Vec<&[Vec<T>]> = inputs.chunks(chunk).collect();
    let nested: Vec<Vec<Vec<GaussianInfo<T>>>> = chunks
        .into_par_iter()
        .enumerate()
        .map(|(ci, slice)| {
            let mut sub = cfg.clone();
            sub.build_seed = cfg.build_seed.wrapping_add(ci as u64);
            predict(spec, posterior, slice, &sub)
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Predicted class: argmax of the logit belief means (ties → lowest index).
pub fn argmax_class<T: Real>(logits: &[GaussianInfo<T>]) -> usize {
    let mut best = 0;
    let mut best_mean = T::neg_infinity();
    for (i, b) in logits.iter().enumerate() {
        let m = b.mean();
        if m > best_mean {
            best_mean = m;
            best = i;
        }
    }
    best
}

/// Parameter handling across video frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiseMode {
    /// Reset parameters to the spec prior for every frame.
    PerFrame,
    /// Carry the parameter posterior forward, blended toward the spec prior
    /// by `alpha` (α = 0 is pure filtering).
    Continual,
}

/// One denoised frame. PSNRs are `NaN` when no clean reference was given.
#[derive(Clone, Debug)]
pub struct FrameResult<T> {
    pub denoised: Vec<T>,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
    pub wall_ms: f64,
}

/// Joint denoising of a frame sequence (§5.2).
///
/// Per frame: build the generative denoising graph over the noisy pixels
/// (robust observation factors + reconstruction layers), run GBP jointly
/// over pixels/activations/parameters, and read the denoised image from the
/// pixel belief means. `Continual` mode filters the parameter posterior
/// through the frames; `PerFrame` resets it.
pub fn denoise_video<T: Real>(
    spec: &ModelSpec,
    noisy: &[Vec<T>],
    clean: Option<&[Vec<T>]>,
    mode: DenoiseMode,
    alpha: f64,
    cfg: &DriverConfig,
) -> Result<Vec<FrameResult<T>>> {
    if let Some(c) = clean {
        if c.len() != noisy.len() {
            return Err(CoreError::ShapeMismatch {
                context: "clean frame count",
                expected: noisy.len(),
                got: c.len(),
            });
        }
    }
    let original = ParamPosterior::<T>::from_spec(spec)?;
    let mut post: Option<ParamPosterior<T>> = None;
    let mut out = Vec::with_capacity(noisy.len());
    for (f, frame) in noisy.iter().enumerate() {
        let t0 = Instant::now();
        let (mut g, mv) = build_model(
            spec,
            std::slice::from_ref(frame),
            None,
            None,
            post.as_ref(),
            &cfg.build,
            cfg.build_seed.wrapping_add(f as u64),
        )?;
        run_inference(&mut g, &cfg.engine, &mut NullSink)?;
        let denoised: Vec<T> = mv.examples[0]
            .input
            .iter()
            .map(|&v| {
                let b = g.belief(v)?;
                if b.lam <= T::zero() {
                    return Err(CoreError::DegenerateBelief(v));
                }
                Ok(b.mean())
            })
            .collect::<Result<_>>()?;
        if mode == DenoiseMode::Continual && !mv.params.is_empty() {
            let p = ParamPosterior::extract(&g, &mv, spec)?;
            post = Some(interpolate_prior(&p, &original, alpha)?);
        }
        let (psnr_noisy, psnr_denoised) = match clean {
            Some(c) => (psnr(&c[f], frame)?, psnr(&c[f], &denoised)?),
            None => (f64::NAN, f64::NAN),
        };
        out.push(FrameResult {
            denoised,
            psnr_noisy,
            psnr_denoised,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(out)
}

/// Replace exactly `round(fraction·len)` pixels with `U(0,1)` draws
/// ("replacing their intensities with noise drawn from U(0,1)"). The choice
/// of pixels and the replacement values both come from `rng`, so a fixed
/// seed reproduces the corruption exactly.
pub fn corrupt_salt_pepper<T: Real>(
    image: &[T],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoreError::InvalidParameter(format!(
            "corruption fraction must be in [0,1], got {fraction}"
        )));
    }
    let k = (fraction * image.len() as f64).round() as usize;
    let mut out = image.to_vec();
    let picks = rand::seq::index::sample(rng, image.len(), k.min(image.len()));
    for idx in picks {
        out[idx] = real(rng.gen::<f64>());
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB with peak 1: `10·log₁₀(1/MSE)`.
/// A perfect estimate returns `+inf`.
pub fn psnr<T: Real>(clean: &[T], estimate: &[T]) -> Result<f64> {
    if clean.len() != estimate.len() {
        return Err(CoreError::ShapeMismatch {
            context: "psnr operands",
            expected: clean.len(),
            got: estimate.len(),
        });
    }
    if clean.is_empty() {
        return Err(CoreError::InvalidParameter("psnr of empty images".into()));
    }
    let mut sum = 0.0f64;
    for (&c, &e) in clean.iter().zip(estimate) {
        let d = c.to_f64_c() - e.to_f64_c();
        sum += d * d;
    }
    let mse = sum / clean.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
