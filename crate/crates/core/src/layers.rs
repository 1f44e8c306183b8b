//! Layer specifications and the batch model builder.
//!
//! A [`ModelSpec`] is an ordered list of [`LayerSpec`]s over an `H×W×C` input
//! grid. [`build_model`] expands a spec plus a batch of observations into one
//! [`FactorGraph`]: parameter variables are created once and shared by every
//! datapoint ("parameters are shared across all observations"), while input
//! and activation variables are replicated per datapoint. Every variable gets
//! a proper unary prior so beliefs are well-posed before any message arrives.
//!
//! Grid storage is channel-major ("CHW"): flat index `(c·H + h)·W + w`.
//!
//! Layer catalogue (reconstruction factors all have `M = 1` except upsample
//! and the softmax observation):
//! - `dense`: per-output factors `h = g(w_cᵀx + b_c) − out_c`, V = 2·D_in + 2.
//! - `conv`: stride-1 valid convolution, one factor per `(a,b,c_out)` over a
//!   `K·K·C_in` patch and the shared filter, V = 2·K²·C_in + 2.
//! - `conv_transpose`: one factor per *reconstructed* element; the covering
//!   coefficient window is summed inside `h` and truncated at borders.
//! - `maxpool` / `upsample`: resolution changes (`K` divides the extent).
//! - `softmax_obs`: class observation against a one-hot target, M = V = C.
//! - `input_obs` / `output_obs`: unary observation factors (soft or robust);
//!   `fixed` input observations pin variables at σ_obs = 1e-4 and their
//!   linearization points never move.
//! - `pairwise_smooth`: robust `x_a − x_b` factors on 4-neighborhood edges.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::factor::{Activation, FactorDef, FixedBias, Measurement, Robust};
use crate::gaussian::GaussianInfo;
use crate::graph::{FactorGraph, VarId, VarKind};
use crate::learning::ParamPosterior;
use crate::real::{real, Real};

/// Observation noise for `fixed` inputs: precision 1e8 ("pixel variables are
/// fixed at their observed values").
pub const FIXED_OBS_SIGMA: f64 = 1e-4;
/// Observation noise used when hard-fixing parameters at prediction time
/// (precision 1e8).
pub const HARD_FIX_SIGMA: f64 = 1e-4;

/// Extent of one boundary grid. Flat (channel-major) index: `(c·H + h)·W + w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn len(self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(self, h: usize, w: usize, c: usize) -> usize {
        debug_assert!(h < self.h && w < self.w && c < self.c);
        (c * self.h + h) * self.w + w
    }
}

/// Layer discriminant. `dense`/`conv`/`conv_transpose` carry parameters;
/// observation and smoothness kinds only attach factors to existing grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv,
    ConvTranspose,
    Maxpool,
    Upsample,
    SoftmaxObs,
    InputObs,
    OutputObs,
    PairwiseSmooth,
}

impl LayerKind {
    /// Does this layer create a new variable grid?
    fn creates_vars(self) -> bool {
        matches!(
            self,
            LayerKind::Dense
                | LayerKind::Conv
                | LayerKind::ConvTranspose
                | LayerKind::Maxpool
                | LayerKind::Upsample
        )
    }

    /// Does this layer carry weight/bias parameter variables?
    fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv | LayerKind::ConvTranspose)
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn identity_act() -> Activation<f64> {
    Activation::Identity
}

/// One layer of a [`ModelSpec`]. Fields are a union over kinds; `validate`
/// checks the combination actually used. σ values are stated in f64 and
/// converted to the build scalar type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Spatial kernel size K (conv / conv_transpose / maxpool / upsample).
    #[serde(default)]
    pub kernel: usize,
    /// Output channels C_out (conv / conv_transpose) or output units (dense).
    #[serde(default)]
    pub filters: usize,
    /// 1 in every paper config; conv_transpose additionally admits `K`
    /// (non-overlapping receptive fields).
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub include_bias: bool,
    /// Reconstruction / observation σ_l of this layer's factors.
    #[serde(default)]
    pub sigma_recon: f64,
    /// Prior σ for this layer's weights and biases.
    #[serde(default)]
    pub sigma_weight_prior: Option<f64>,
    /// Prior σ for the variables this layer creates.
    #[serde(default)]
    pub sigma_activation_prior: Option<f64>,
    #[serde(default = "identity_act")]
    pub activation: Activation<f64>,
    /// Robust (Huber) threshold N_rob in Mahalanobis units.
    #[serde(default)]
    pub n_rob: Option<f64>,
    /// `input_obs` only: pin inputs at their observed values.
    #[serde(default)]
    pub fixed: bool,
}

impl LayerSpec {
    fn base(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            kernel: 0,
            filters: 0,
            stride: 1,
            include_bias: true,
            sigma_recon: 0.0,
            sigma_weight_prior: None,
            sigma_activation_prior: None,
            activation: Activation::Identity,
            n_rob: None,
            fixed: false,
        }
    }

    pub fn dense(
        filters: usize,
        activation: Activation<f64>,
        sigma_recon: f64,
        sigma_weight: f64,
        sigma_activation: f64,
    ) -> Self {
        LayerSpec {
            filters,
            activation,
            sigma_recon,
            sigma_weight_prior: Some(sigma_weight),
            sigma_activation_prior: Some(sigma_activation),
            ..LayerSpec::base(LayerKind::Dense)
        }
    }

    pub fn conv(
        kernel: usize,
        filters: usize,
        activation: Activation<f64>,
        sigma_recon: f64,
        sigma_weight: f64,
        sigma_activation: f64,
    ) -> Self {
        LayerSpec {
            kernel,
            filters,
            activation,
            sigma_recon,
            sigma_weight_prior: Some(sigma_weight),
            sigma_activation_prior: Some(sigma_activation),
            ..LayerSpec::base(LayerKind::Conv)
        }
    }

    pub fn conv_transpose(
        kernel: usize,
        filters: usize,
        activation: Activation<f64>,
        sigma_recon: f64,
        sigma_weight: f64,
        sigma_activation: f64,
    ) -> Self {
        LayerSpec {
            kernel,
            filters,
            activation,
            sigma_recon,
            sigma_weight_prior: Some(sigma_weight),
            sigma_activation_prior: Some(sigma_activation),
            ..LayerSpec::base(LayerKind::ConvTranspose)
        }
    }

    pub fn maxpool(kernel: usize, sigma_recon: f64, sigma_activation: f64) -> Self {
        LayerSpec {
            kernel,
            sigma_recon,
            sigma_activation_prior: Some(sigma_activation),
            ..LayerSpec::base(LayerKind::Maxpool)
        }
    }

    pub fn upsample(kernel: usize, sigma_recon: f64, sigma_activation: f64) -> Self {
        LayerSpec {
            kernel,
            sigma_recon,
            sigma_activation_prior: Some(sigma_activation),
            ..LayerSpec::base(LayerKind::Upsample)
        }
    }

    pub fn softmax_obs(sigma: f64) -> Self {
        LayerSpec { sigma_recon: sigma, ..LayerSpec::base(LayerKind::SoftmaxObs) }
    }

    /// Soft input observation: unary factors with noise `sigma`.
    pub fn input_obs(sigma: f64) -> Self {
        LayerSpec { sigma_recon: sigma, ..LayerSpec::base(LayerKind::InputObs) }
    }

    /// Fixed input observation: inputs pinned at their observed values.
    pub fn input_obs_fixed() -> Self {
        LayerSpec { fixed: true, ..LayerSpec::base(LayerKind::InputObs) }
    }

    pub fn output_obs(sigma: f64) -> Self {
        LayerSpec { sigma_recon: sigma, ..LayerSpec::base(LayerKind::OutputObs) }
    }

    pub fn pairwise_smooth(sigma: f64, n_rob: f64) -> Self {
        LayerSpec {
            sigma_recon: sigma,
            n_rob: Some(n_rob),
            ..LayerSpec::base(LayerKind::PairwiseSmooth)
        }
    }

    pub fn with_robust(mut self, n_rob: f64) -> Self {
        self.n_rob = Some(n_rob);
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.include_bias = false;
        self
    }
}

/// A full model: input grid shape, default training batch size, and the
/// ordered layer list. Serializable (the CLI reads it from the config file);
/// [`ModelSpec::fingerprint`] hashes the canonical serialization so saved
/// posteriors can be matched to the spec that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Input grid `[H, W, C]`.
    pub input: [usize; 3],
    /// Default training batch size; `build_model` accepts any batch length.
    #[serde(default = "one")]
    pub batch_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn input_shape(&self) -> Shape {
        Shape { h: self.input[0], w: self.input[1], c: self.input[2] }
    }

    /// Grid shapes at every layer boundary: `shapes[i]` enters layer `i`,
    /// `shapes.last()` is the model output. Errors when kernel/stride do not
    /// yield integer extents (no padding anywhere).
    pub fn boundary_shapes(&self) -> Result<Vec<Shape>> {
        let mut sh = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(sh);
        for (i, l) in self.layers.iter().enumerate() {
            let need_kernel = matches!(
                l.kind,
                LayerKind::Conv | LayerKind::ConvTranspose | LayerKind::Maxpool | LayerKind::Upsample
            );
            if need_kernel && l.kernel == 0 {
                return Err(CoreError::InvalidParameter(format!("layer {i}: kernel must be ≥ 1")));
            }
            sh = match l.kind {
                LayerKind::Dense => {
                    if l.filters == 0 {
                        return Err(CoreError::InvalidParameter(format!("layer {i}: dense needs filters ≥ 1")));
                    }
                    Shape { h: 1, w: 1, c: l.filters }
                }
                LayerKind::Conv => {
                    if l.filters == 0 {
                        return Err(CoreError::InvalidParameter(format!("layer {i}: conv needs filters ≥ 1")));
                    }
                    if sh.h < l.kernel || sh.w < l.kernel {
                        return Err(CoreError::ModelMismatch(format!(
                            "layer {i}: {k}x{k} kernel exceeds {h}x{w} input",
                            k = l.kernel,
                            h = sh.h,
                            w = sh.w
                        )));
                    }
                    Shape { h: sh.h - l.kernel + 1, w: sh.w - l.kernel + 1, c: l.filters }
                }
                LayerKind::ConvTranspose => {
                    if l.filters == 0 {
                        return Err(CoreError::InvalidParameter(format!(
                            "layer {i}: conv_transpose needs filters ≥ 1"
                        )));
                    }
                    if l.stride == 1 {
                        Shape { h: sh.h, w: sh.w, c: l.filters }
                    } else {
                        // stride = K: non-overlapping receptive fields.
                        if sh.h % l.kernel != 0 || sh.w % l.kernel != 0 {
                            return Err(CoreError::ModelMismatch(format!(
                                "layer {i}: stride-{k} conv_transpose needs {k} | extent, got {h}x{w}",
                                k = l.kernel,
                                h = sh.h,
                                w = sh.w
                            )));
                        }
                        Shape { h: sh.h / l.kernel, w: sh.w / l.kernel, c: l.filters }
                    }
                }
                LayerKind::Maxpool | LayerKind::Upsample => {
                    if sh.h % l.kernel != 0 || sh.w % l.kernel != 0 {
                        return Err(CoreError::ModelMismatch(format!(
                            "layer {i}: {k}x{k} pooling does not divide {h}x{w}",
                            k = l.kernel,
                            h = sh.h,
                            w = sh.w
                        )));
                    }
                    Shape { h: sh.h / l.kernel, w: sh.w / l.kernel, c: sh.c }
                }
                LayerKind::SoftmaxObs
                | LayerKind::InputObs
                | LayerKind::OutputObs
                | LayerKind::PairwiseSmooth => sh,
            };
            out.push(sh);
        }
        Ok(out)
    }

    /// `(layer_index, weight_count, bias_count)` for every parameterized
    /// layer, in layer order. This fixes the storage layout of parameter
    /// posteriors: dense weights are output-major `(c, k)`, conv and
    /// conv_transpose weights are `(c_out, c_in, dh, dw)`; conv biases are
    /// per output channel, conv_transpose biases per *reconstructed* channel.
    pub fn param_counts(&self) -> Result<Vec<(usize, usize, usize)>> {
        let shapes = self.boundary_shapes()?;
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if !l.kind.has_params() {
                continue;
            }
            let sh = shapes[i];
            let (nw, nb) = match l.kind {
                LayerKind::Dense => (sh.len() * l.filters, l.filters),
                LayerKind::Conv => (l.kernel * l.kernel * sh.c * l.filters, l.filters),
                LayerKind::ConvTranspose => (l.kernel * l.kernel * sh.c * l.filters, sh.c),
                _ => unreachable!(),
            };
            out.push((i, nw, if l.include_bias { nb } else { 0 }));
        }
        Ok(out)
    }

    /// Class count when the model ends in a softmax observation.
    pub fn num_classes(&self) -> Option<usize> {
        let shapes = self.boundary_shapes().ok()?;
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::SoftmaxObs)
            .map(|i| shapes[i].len())
    }

    /// SHA-256 of the canonical (JSON) serialization, hex-encoded. Saved
    /// posteriors carry this and are rejected against a different spec.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("ModelSpec always serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hexed = String::with_capacity(64);
        for b in digest {
            use std::fmt::Write;
            let _ = write!(hexed, "{b:02x}");
        }
        hexed
    }

    /// Check the whole spec: shape walk, per-kind field requirements, and
    /// placement rules (`input_obs` first, terminal observations last).
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidParameter("input shape has a zero extent".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidParameter("batch_size must be ≥ 1".into()));
        }
        if self.layers.is_empty() {
            return Err(CoreError::InvalidParameter("model has no layers".into()));
        }
        let shapes = self.boundary_shapes()?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let err = |msg: String| Err(CoreError::InvalidParameter(format!("layer {i}: {msg}")));
            if l.fixed && l.kind != LayerKind::InputObs {
                return err("`fixed` only applies to input_obs".into());
            }
            if let Some(nr) = l.n_rob {
                if !(nr > 0.0) {
                    return err(format!("robust threshold must be > 0, got {nr}"));
                }
            }
            let sigma_ok = l.sigma_recon > 0.0 && l.sigma_recon.is_finite();
            match l.kind {
                LayerKind::InputObs => {
                    if i != 0 {
                        return err("input_obs must be the first layer".into());
                    }
                    if l.fixed {
                        if l.n_rob.is_some() {
                            return err("fixed observations cannot be robust".into());
                        }
                        // Folded inputs become factor coefficients; only dense
                        // and conv know how to consume constants.
                        if let Some(w) = self.layers.iter().find(|w| w.kind.creates_vars()) {
                            if !matches!(w.kind, LayerKind::Dense | LayerKind::Conv) {
                                return err(format!(
                                    "fixed inputs must feed dense or conv, not {:?}",
                                    w.kind
                                ));
                            }
                        }
                    } else if !sigma_ok {
                        return err("input_obs needs sigma_recon > 0 (or fixed)".into());
                    }
                }
                LayerKind::Dense | LayerKind::Conv | LayerKind::ConvTranspose => {
                    if !sigma_ok {
                        return err("needs sigma_recon > 0".into());
                    }
                    match l.sigma_weight_prior {
                        Some(s) if s > 0.0 && s.is_finite() => {}
                        _ => return err("needs sigma_weight_prior > 0".into()),
                    }
                    match l.sigma_activation_prior {
                        Some(s) if s > 0.0 && s.is_finite() => {}
                        _ => return err("needs sigma_activation_prior > 0".into()),
                    }
                    if l.kind == LayerKind::Conv && l.stride != 1 {
                        return err("conv supports stride 1 only".into());
                    }
                    if l.kind == LayerKind::ConvTranspose && l.stride != 1 && l.stride != l.kernel {
                        return err(format!(
                            "conv_transpose stride must be 1 or K={}, got {}",
                            l.kernel, l.stride
                        ));
                    }
                    if l.kind == LayerKind::Dense && l.stride != 1 {
                        return err("dense has no stride".into());
                    }
                }
                LayerKind::Maxpool | LayerKind::Upsample => {
                    if !sigma_ok {
                        return err("needs sigma_recon > 0".into());
                    }
                    if l.stride != 1 {
                        return err("pooling stride is the kernel; leave stride = 1".into());
                    }
                    match l.sigma_activation_prior {
                        Some(s) if s > 0.0 && s.is_finite() => {}
                        _ => return err("needs sigma_activation_prior > 0".into()),
                    }
                }
                LayerKind::SoftmaxObs => {
                    if i != last {
                        return err("softmax_obs must be the last layer".into());
                    }
                    if !sigma_ok {
                        return err("needs sigma_recon > 0".into());
                    }
                    if shapes[i].len() < 2 {
                        return err("softmax_obs needs ≥ 2 logits".into());
                    }
                }
                LayerKind::OutputObs => {
                    if i != last {
                        return err("output_obs must be the last layer".into());
                    }
                    if !sigma_ok {
                        return err("needs sigma_recon > 0".into());
                    }
                }
                LayerKind::PairwiseSmooth => {
                    if !sigma_ok {
                        return err("needs sigma_recon > 0".into());
                    }
                }
            }
        }
        if self.layers.iter().skip(1).any(|l| l.kind == LayerKind::InputObs) {
            return Err(CoreError::InvalidParameter("at most one input_obs layer".into()));
        }
        Ok(())
    }
}

/// Options controlling graph expansion.
#[derive(Clone, Copy, Debug)]
pub struct BuildOptions {
    /// Fold `fixed` input observations into factor coefficients (the pixels
    /// disappear as variables; conv factor arity roughly halves). Exact up to
    /// the 1e8 pin precision; `false` keeps near-pinned pixel variables.
    pub fold_observed: bool,
    /// Observe parameters at their posterior means with precision 1e8
    /// instead of soft-pinning with the posterior itself. Requires a
    /// posterior; used for deterministic classification prediction.
    pub hard_fix_params: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { fold_observed: true, hard_fix_params: false }
    }
}

/// Where each model quantity lives in the built graph.
#[derive(Clone, Debug, Default)]
pub struct ModelVars {
    /// Parameter variables per parameterized layer, in layer order; layouts
    /// per [`ModelSpec::param_counts`].
    pub params: Vec<LayerParamVars>,
    /// Per-datapoint variable ids.
    pub examples: Vec<ExampleVars>,
}

#[derive(Clone, Debug)]
pub struct LayerParamVars {
    pub layer_index: usize,
    pub weights: Vec<VarId>,
    pub biases: Vec<VarId>,
}

#[derive(Clone, Debug)]
pub struct ExampleVars {
    /// Input grid variables (empty when fixed inputs were folded away).
    pub input: Vec<VarId>,
    /// Final boundary grid: logits, regression outputs, or the deepest
    /// latent grid of a generative model.
    pub output: Vec<VarId>,
}

/// Per-example boundary state while walking the layer list: either live
/// variables or folded constants.
enum Bound<T> {
    Vars(Vec<VarId>),
    Consts(Vec<T>),
}

fn act_t<T: Real>(a: Activation<f64>) -> Activation<T> {
    match a {
        Activation::Identity => Activation::Identity,
        Activation::LeakyRelu { slope } => Activation::LeakyRelu { slope: real(slope) },
        Activation::Sigmoid => Activation::Sigmoid,
    }
}

/// Create one layer's parameter variables. Fresh parameters get the spec
/// prior `N(0, σ_w²)` and a linearization point *sampled* from it (symmetry
/// breaking); with a posterior, the posterior marginal becomes the prior and
/// the linearization point is its mean; with `hard_fix` the variable is
/// observed at the posterior mean with precision 1e8.
fn make_params<T: Real>(
    g: &mut FactorGraph<T>,
    rng: &mut ChaCha8Rng,
    n: usize,
    sigma_w: f64,
    center_on_draw: bool,
    post: Option<&[GaussianInfo<T>]>,
    hard_fix: bool,
) -> Result<Vec<VarId>> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let v = match post {
            Some(ms) => {
                let m = ms[k];
                if m.lam <= T::zero() || !m.is_finite() {
                    return Err(CoreError::ModelMismatch(
                        "posterior marginal with non-positive precision".into(),
                    ));
                }
                if hard_fix {
                    let v = g.add_variable(VarKind::Parameter, GaussianInfo::zero());
                    g.observe(v, m.mean(), real(HARD_FIX_SIGMA))?;
                    v
                } else {
                    let v = g.add_variable(VarKind::Parameter, m);
                    g.set_lin_point(v, m.mean());
                    v
                }
            }
            None if center_on_draw => {
                // Fresh weight: draw s ~ N(0, σ_w²) (seeded) and center the
                // prior factor on the draw, N(s, σ_w²), with x₀ = s. Centering
                // on the draw rather than on zero keeps the symmetry-breaking
                // random initialization alive through relinearization: with a
                // shared zero-mean prior, every weight in a layer relinearizes
                // onto the same prior-dominated belief mean after one sweep
                // and the solve locks into the symmetric saddle, where e.g.
                // XOR is unlearnable. The draw plays the role of a neural
                // net's random init, and the prior regularizes toward it.
                let z: f64 = rng.sample(StandardNormal);
                let s = real(sigma_w * z);
                let v = g.add_variable(
                    VarKind::Parameter,
                    GaussianInfo::from_mean_sigma(s, real(sigma_w)),
                );
                g.set_lin_point(v, s);
                v
            }
            None => {
                // Fresh bias: zero-centered prior and x₀ = 0 — the weight
                // draws already differentiate units, and biases far from zero
                // push activations off the data region.
                let prior = GaussianInfo::from_mean_sigma(T::zero(), real(sigma_w));
                let v = g.add_variable(VarKind::Parameter, prior);
                g.set_lin_point(v, T::zero());
                v
            }
        };
        out.push(v);
    }
    Ok(out)
}

struct Builder<T: Real> {
    shapes: Vec<Shape>,
    g: FactorGraph<T>,
    params: Vec<LayerParamVars>,
    /// `param_slot[i]` = index into `params` for layer `i`.
    param_slot: Vec<Option<usize>>,
    bounds: Vec<Bound<T>>,
    inputs_vars: Vec<Vec<VarId>>,
    /// Index of the last variable-creating layer (its grid gets `Output`).
    last_creator: Option<usize>,
    scratch: Vec<VarId>,
    wsel: Vec<VarId>,
}

impl<T: Real> Builder<T> {
    fn out_kind(&self, li: usize) -> VarKind {
        if Some(li) == self.last_creator {
            VarKind::Output
        } else {
            VarKind::Activation
        }
    }

    fn act_prior(l: &LayerSpec) -> GaussianInfo<T> {
        let s = l.sigma_activation_prior.expect("validated: activation prior present");
        GaussianInfo::from_mean_sigma(T::zero(), real(s))
    }

    fn add(&mut self, l: &LayerSpec, meas: Measurement<T>, y: Vec<T>) -> Result<()> {
        let mut def = FactorDef::new(meas, y, real(l.sigma_recon))?;
        if let Some(nr) = l.n_rob {
            def = def.with_robust(Robust::new(real(nr)));
        }
        self.g.add_factor(def, &self.scratch)?;
        Ok(())
    }

    fn require_vars(&self, b: usize, what: &'static str) -> Result<&[VarId]> {
        match &self.bounds[b] {
            Bound::Vars(vs) => Ok(vs),
            Bound::Consts(_) => Err(CoreError::ModelMismatch(format!(
                "{what} cannot consume folded constant inputs"
            ))),
        }
    }

    fn input_obs(&mut self, li: usize, l: &LayerSpec, inputs: &[Vec<T>]) -> Result<()> {
        // Fixed inputs were pinned (or folded) at variable creation.
        if l.fixed {
            return Ok(());
        }
        for b in 0..self.bounds.len() {
            let vs = match &self.bounds[b] {
                Bound::Vars(vs) => vs.clone(),
                Bound::Consts(_) => unreachable!("only fixed inputs fold"),
            };
            for (k, &v) in vs.iter().enumerate() {
                self.scratch.clear();
                self.scratch.push(v);
                self.add(l, Measurement::Identity, vec![inputs[b][k]])?;
            }
            let _ = li;
        }
        Ok(())
    }

    fn dense(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let d_in = self.shapes[li].len();
        let cl = l.filters;
        let act = act_t::<T>(l.activation);
        let kind = self.out_kind(li);
        let apr = Self::act_prior(l);
        let pslot = self.param_slot[li].expect("dense has params");
        for b in 0..self.bounds.len() {
            let outs: Vec<VarId> = (0..cl).map(|_| self.g.add_variable(kind, apr)).collect();
            for c in 0..cl {
                let lp = &self.params[pslot];
                let wc = &lp.weights[c * d_in..(c + 1) * d_in];
                self.scratch.clear();
                let meas = match &self.bounds[b] {
                    Bound::Vars(vs) => {
                        self.scratch.extend_from_slice(vs);
                        self.scratch.extend_from_slice(wc);
                        Measurement::AffineUnit { n: d_in, act, has_bias: l.include_bias }
                    }
                    Bound::Consts(cs) => {
                        self.scratch.extend_from_slice(wc);
                        let bias = if l.include_bias {
                            FixedBias::Variable
                        } else {
                            FixedBias::Constant(T::zero())
                        };
                        Measurement::AffineFixedCoeff { coeffs: cs.clone(), act, bias }
                    }
                };
                if l.include_bias {
                    self.scratch.push(self.params[pslot].biases[c]);
                }
                self.scratch.push(outs[c]);
                self.add(l, meas, vec![T::zero()])?;
            }
            self.bounds[b] = Bound::Vars(outs);
        }
        Ok(())
    }

    fn conv(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let (ish, osh) = (self.shapes[li], self.shapes[li + 1]);
        let (k, cin, co) = (l.kernel, ish.c, l.filters);
        let n = k * k * cin;
        let act = act_t::<T>(l.activation);
        let kind = self.out_kind(li);
        let apr = Self::act_prior(l);
        let pslot = self.param_slot[li].expect("conv has params");
        let mut coeffs: Vec<T> = Vec::with_capacity(n);
        for b in 0..self.bounds.len() {
            let outs: Vec<VarId> = (0..osh.len()).map(|_| self.g.add_variable(kind, apr)).collect();
            for a in 0..osh.h {
                for bb in 0..osh.w {
                    for cout in 0..co {
                        let lp = &self.params[pslot];
                        let wc = &lp.weights[cout * n..(cout + 1) * n];
                        self.scratch.clear();
                        let meas = match &self.bounds[b] {
                            Bound::Vars(vs) => {
                                for ci in 0..cin {
                                    for dh in 0..k {
                                        for dw in 0..k {
                                            self.scratch.push(vs[ish.idx(a + dh, bb + dw, ci)]);
                                        }
                                    }
                                }
                                self.scratch.extend_from_slice(wc);
                                Measurement::AffineUnit { n, act, has_bias: l.include_bias }
                            }
                            Bound::Consts(cs) => {
                                coeffs.clear();
                                for ci in 0..cin {
                                    for dh in 0..k {
                                        for dw in 0..k {
                                            coeffs.push(cs[ish.idx(a + dh, bb + dw, ci)]);
                                        }
                                    }
                                }
                                self.scratch.extend_from_slice(wc);
                                let bias = if l.include_bias {
                                    FixedBias::Variable
                                } else {
                                    FixedBias::Constant(T::zero())
                                };
                                Measurement::AffineFixedCoeff { coeffs: coeffs.clone(), act, bias }
                            }
                        };
                        if l.include_bias {
                            self.scratch.push(self.params[pslot].biases[cout]);
                        }
                        self.scratch.push(outs[osh.idx(a, bb, cout)]);
                        self.add(l, meas, vec![T::zero()])?;
                    }
                }
            }
            self.bounds[b] = Bound::Vars(outs);
        }
        Ok(())
    }

    fn conv_transpose(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let (ish, osh) = (self.shapes[li], self.shapes[li + 1]);
        let (k, s, cin, co) = (l.kernel, l.stride, ish.c, l.filters);
        let act = act_t::<T>(l.activation);
        let kind = self.out_kind(li);
        let apr = Self::act_prior(l);
        let pslot = self.param_slot[li].expect("conv_transpose has params");
        for b in 0..self.bounds.len() {
            self.require_vars(b, "conv_transpose")?;
            let coeff_vars: Vec<VarId> =
                (0..osh.len()).map(|_| self.g.add_variable(kind, apr)).collect();
            let Bound::Vars(pix) = &self.bounds[b] else { unreachable!() };
            let pix = pix.clone();
            // One factor per reconstructed element (a, bb, ci): the covering
            // coefficient window, the paired filter weights, the channel
            // bias, and the reconstruction target.
            for a in 0..ish.h {
                for bb in 0..ish.w {
                    for ci in 0..cin {
                        let lp = &self.params[pslot];
                        self.scratch.clear();
                        self.wsel.clear();
                        if s == 1 {
                            let ilo = a.saturating_sub(k - 1);
                            let jlo = bb.saturating_sub(k - 1);
                            for cout in 0..co {
                                for i in ilo..=a {
                                    for j in jlo..=bb {
                                        self.scratch.push(coeff_vars[osh.idx(i, j, cout)]);
                                        let widx = ((cout * cin + ci) * k + (a - i)) * k + (bb - j);
                                        self.wsel.push(lp.weights[widx]);
                                    }
                                }
                            }
                        } else {
                            // stride = K: exactly one covering coefficient
                            // per channel.
                            let (i, j) = (a / k, bb / k);
                            for cout in 0..co {
                                self.scratch.push(coeff_vars[osh.idx(i, j, cout)]);
                                let widx = ((cout * cin + ci) * k + (a % k)) * k + (bb % k);
                                self.wsel.push(lp.weights[widx]);
                            }
                        }
                        let nn = self.scratch.len();
                        let wsel = std::mem::take(&mut self.wsel);
                        self.scratch.extend_from_slice(&wsel);
                        self.wsel = wsel;
                        if l.include_bias {
                            self.scratch.push(self.params[pslot].biases[ci]);
                        }
                        self.scratch.push(pix[ish.idx(a, bb, ci)]);
                        self.add(
                            l,
                            Measurement::AffineUnit { n: nn, act, has_bias: l.include_bias },
                            vec![T::zero()],
                        )?;
                    }
                }
            }
            self.bounds[b] = Bound::Vars(coeff_vars);
        }
        Ok(())
    }

    fn maxpool(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let (ish, osh) = (self.shapes[li], self.shapes[li + 1]);
        let k = l.kernel;
        let kind = self.out_kind(li);
        let apr = Self::act_prior(l);
        for b in 0..self.bounds.len() {
            let vs = self.require_vars(b, "maxpool")?.to_vec();
            let outs: Vec<VarId> = (0..osh.len()).map(|_| self.g.add_variable(kind, apr)).collect();
            for ci in 0..osh.c {
                for a in 0..osh.h {
                    for bb in 0..osh.w {
                        self.scratch.clear();
                        for dh in 0..k {
                            for dw in 0..k {
                                self.scratch.push(vs[ish.idx(a * k + dh, bb * k + dw, ci)]);
                            }
                        }
                        self.scratch.push(outs[osh.idx(a, bb, ci)]);
                        self.add(l, Measurement::MaxPool { k2: k * k }, vec![T::zero()])?;
                    }
                }
            }
            self.bounds[b] = Bound::Vars(outs);
        }
        Ok(())
    }

    fn upsample(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let (ish, osh) = (self.shapes[li], self.shapes[li + 1]);
        let k = l.kernel;
        let kind = self.out_kind(li);
        let apr = Self::act_prior(l);
        for b in 0..self.bounds.len() {
            let vs = self.require_vars(b, "upsample")?.to_vec();
            let outs: Vec<VarId> = (0..osh.len()).map(|_| self.g.add_variable(kind, apr)).collect();
            for ci in 0..osh.c {
                for a in 0..osh.h {
                    for bb in 0..osh.w {
                        self.scratch.clear();
                        self.scratch.push(outs[osh.idx(a, bb, ci)]);
                        for dh in 0..k {
                            for dw in 0..k {
                                self.scratch.push(vs[ish.idx(a * k + dh, bb * k + dw, ci)]);
                            }
                        }
                        self.add(l, Measurement::Upsample { k2: k * k }, vec![T::zero(); k * k])?;
                    }
                }
            }
            self.bounds[b] = Bound::Vars(outs);
        }
        Ok(())
    }

    fn softmax_obs(&mut self, li: usize, l: &LayerSpec, labels: &[usize]) -> Result<()> {
        let c = self.shapes[li].len();
        for b in 0..self.bounds.len() {
            let vs = self.require_vars(b, "softmax_obs")?.to_vec();
            let label = labels[b];
            if label >= c {
                return Err(CoreError::LabelOutOfRange { label, classes: c });
            }
            let mut y = vec![T::zero(); c];
            y[label] = T::one();
            self.scratch.clear();
            self.scratch.extend_from_slice(&vs);
            self.add(l, Measurement::Softmax { c }, y)?;
        }
        Ok(())
    }

    fn output_obs(&mut self, li: usize, l: &LayerSpec, targets: &[Vec<T>]) -> Result<()> {
        let d = self.shapes[li].len();
        for b in 0..self.bounds.len() {
            let vs = self.require_vars(b, "output_obs")?.to_vec();
            if targets[b].len() != d {
                return Err(CoreError::ShapeMismatch {
                    context: "output_obs targets",
                    expected: d,
                    got: targets[b].len(),
                });
            }
            for (k, &v) in vs.iter().enumerate() {
                self.scratch.clear();
                self.scratch.push(v);
                self.add(l, Measurement::Identity, vec![targets[b][k]])?;
            }
        }
        Ok(())
    }

    fn pairwise_smooth(&mut self, li: usize, l: &LayerSpec) -> Result<()> {
        let sh = self.shapes[li];
        for b in 0..self.bounds.len() {
            let vs = self.require_vars(b, "pairwise_smooth")?.to_vec();
            for ci in 0..sh.c {
                for a in 0..sh.h {
                    for bb in 0..sh.w.saturating_sub(1) {
                        self.scratch.clear();
                        self.scratch.push(vs[sh.idx(a, bb, ci)]);
                        self.scratch.push(vs[sh.idx(a, bb + 1, ci)]);
                        self.add(l, Measurement::Difference, vec![T::zero()])?;
                    }
                }
                for a in 0..sh.h.saturating_sub(1) {
                    for bb in 0..sh.w {
                        self.scratch.clear();
                        self.scratch.push(vs[sh.idx(a, bb, ci)]);
                        self.scratch.push(vs[sh.idx(a + 1, bb, ci)]);
                        self.add(l, Measurement::Difference, vec![T::zero()])?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Expand `spec` plus a batch of observations into one factor graph.
///
/// - `inputs`: one flattened input grid per datapoint (channel-major).
/// - `labels`: class labels, consumed by a `softmax_obs` layer. `None` builds
///   a prediction graph (no class observation factors).
/// - `targets`: output observations (regression), consumed by `output_obs`.
/// - `prior`: parameter posterior from a previous batch; becomes the
///   parameter priors (Bayesian filtering). Fingerprint-checked.
/// - `seed`: fresh-parameter linearization points are sampled `N(0, σ_w²)`
///   with a ChaCha8 stream, so identical seeds give identical graphs.
///
/// Returns the finalized graph plus the variable map for reading results.
pub fn build_model<T: Real>(
    spec: &ModelSpec,
    inputs: &[Vec<T>],
    labels: Option<&[usize]>,
    targets: Option<&[Vec<T>]>,
    prior: Option<&ParamPosterior<T>>,
    opts: &BuildOptions,
    seed: u64,
) -> Result<(FactorGraph<T>, ModelVars)> {
    spec.validate()?;
    let shapes = spec.boundary_shapes()?;
    let b_count = inputs.len();
    if b_count == 0 {
        return Err(CoreError::InvalidParameter("empty batch".into()));
    }
    let in_len = shapes[0].len();
    for x in inputs {
        if x.len() != in_len {
            return Err(CoreError::ShapeMismatch {
                context: "model input",
                expected: in_len,
                got: x.len(),
            });
        }
    }
    if let Some(ls) = labels {
        if ls.len() != b_count {
            return Err(CoreError::ShapeMismatch {
                context: "label count",
                expected: b_count,
                got: ls.len(),
            });
        }
        if !spec.layers.iter().any(|l| l.kind == LayerKind::SoftmaxObs) {
            return Err(CoreError::InvalidParameter(
                "labels provided but the model has no softmax_obs layer".into(),
            ));
        }
    }
    if let Some(ts) = targets {
        if ts.len() != b_count {
            return Err(CoreError::ShapeMismatch {
                context: "target count",
                expected: b_count,
                got: ts.len(),
            });
        }
        if !spec.layers.iter().any(|l| l.kind == LayerKind::OutputObs) {
            return Err(CoreError::InvalidParameter(
                "targets provided but the model has no output_obs layer".into(),
            ));
        }
    }
    if let Some(p) = prior {
        p.check_fingerprint(spec)?;
    }
    if opts.hard_fix_params && prior.is_none() {
        return Err(CoreError::InvalidParameter(
            "hard_fix_params requires a parameter posterior".into(),
        ));
    }

    let mut g = FactorGraph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Parameters first: created once, shared across the whole batch.
    let mut params = Vec::new();
    let mut param_slot = vec![None; spec.layers.len()];
    for (li, nw, nb) in spec.param_counts()? {
        let l = &spec.layers[li];
        let post = match prior {
            Some(p) => {
                let lp = p.layers.iter().find(|lp| lp.layer_index == li).ok_or_else(|| {
                    CoreError::ModelMismatch(format!("posterior has no entry for layer {li}"))
                })?;
                if lp.weights.len() != nw || lp.biases.len() != nb {
                    return Err(CoreError::ModelMismatch(format!(
                        "posterior layer {li} holds {}+{} parameters, spec needs {nw}+{nb}",
                        lp.weights.len(),
                        lp.biases.len()
                    )));
                }
                Some(lp)
            }
            None => None,
        };
        let sigma_w = l.sigma_weight_prior.expect("validated");
        let weights = make_params(
            &mut g,
            &mut rng,
            nw,
            sigma_w,
            true,
            post.map(|lp| lp.weights.as_slice()),
            opts.hard_fix_params,
        )?;
        let biases = make_params(
            &mut g,
            &mut rng,
            nb,
            sigma_w,
            false,
            post.map(|lp| lp.biases.as_slice()),
            opts.hard_fix_params,
        )?;
        param_slot[li] = Some(params.len());
        params.push(LayerParamVars { layer_index: li, weights, biases });
    }

    // Input grids per datapoint.
    let obs0 = spec.layers.first().filter(|l| l.kind == LayerKind::InputObs);
    let mut bounds: Vec<Bound<T>> = Vec::with_capacity(b_count);
    let mut inputs_vars: Vec<Vec<VarId>> = Vec::with_capacity(b_count);
    for bx in inputs {
        match obs0 {
            Some(l) if l.fixed && opts.fold_observed => {
                bounds.push(Bound::Consts(bx.clone()));
                inputs_vars.push(Vec::new());
            }
            _ => {
                let apr = obs0
                    .and_then(|l| l.sigma_activation_prior)
                    .map(|s| GaussianInfo::from_mean_sigma(T::zero(), real(s)))
                    .unwrap_or_else(GaussianInfo::zero);
                let mut ids = Vec::with_capacity(bx.len());
                for &val in bx {
                    let v = g.add_variable(VarKind::Input, apr);
                    g.set_lin_point(v, val);
                    if let Some(l) = obs0 {
                        if l.fixed {
                            g.observe(v, val, real(FIXED_OBS_SIGMA))?;
                        }
                    }
                    ids.push(v);
                }
                bounds.push(Bound::Vars(ids.clone()));
                inputs_vars.push(ids);
            }
        }
    }

    let mut bld = Builder {
        shapes,
        g,
        params,
        param_slot,
        bounds,
        inputs_vars,
        last_creator: spec.layers.iter().rposition(|l| l.kind.creates_vars()),
        scratch: Vec::new(),
        wsel: Vec::new(),
    };

    for (li, l) in spec.layers.iter().enumerate() {
        bld.g.begin_layer(&format!("{li}:{:?}", l.kind));
        match l.kind {
            LayerKind::InputObs => bld.input_obs(li, l, inputs)?,
            LayerKind::Dense => bld.dense(li, l)?,
            LayerKind::Conv => bld.conv(li, l)?,
            LayerKind::ConvTranspose => bld.conv_transpose(li, l)?,
            LayerKind::Maxpool => bld.maxpool(li, l)?,
            LayerKind::Upsample => bld.upsample(li, l)?,
            LayerKind::SoftmaxObs => {
                if let Some(ls) = labels {
                    bld.softmax_obs(li, l, ls)?;
                }
            }
            LayerKind::OutputObs => {
                if let Some(ts) = targets {
                    bld.output_obs(li, l, ts)?;
                }
            }
            LayerKind::PairwiseSmooth => bld.pairwise_smooth(li, l)?,
        }
    }

    let Builder { mut g, params, bounds, inputs_vars, .. } = bld;
    let mut examples = Vec::with_capacity(b_count);
    for (input, bound) in inputs_vars.into_iter().zip(bounds) {
        let output = match bound {
            Bound::Vars(vs) => vs,
            Bound::Consts(_) => Vec::new(),
        };
        examples.push(ExampleVars { input, output });
    }
    g.finalize();
    Ok((g, ModelVars { params, examples }))
}
