//! Closed-form linear baselines that the experiments are compared against:
//! a one-vs-all least-squares classifier on raw pixels and a 1D linear
//! least-squares regression fit.

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::linalg::{solve_spd_mat, DenseMat};
use crate::real::{real, Real};

/// Train a one-vs-all linear least-squares classifier (bias column included)
/// on `train` and return its accuracy on `test`. Solves the normal equations
/// `XᵀX W = XᵀY` for one-hot targets `Y`, with a tiny Tikhonov term
/// (1e-6·mean diag) so rank-deficient pixel covariances stay solvable.
pub fn lsq_classifier_accuracy<T: Real>(train: &Dataset<T>, test: &Dataset<T>) -> Result<f64> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| CoreError::InvalidParameter("classifier baseline needs labels".into()))?;
    let test_labels = test
        .labels
        .as_ref()
        .ok_or_else(|| CoreError::InvalidParameter("classifier baseline needs test labels".into()))?;
    let classes = train
        .num_classes()
        .max(test.num_classes())
        .unwrap_or(0);
    if classes < 2 {
        return Err(CoreError::InvalidParameter("need at least two classes".into()));
    }
    let d = train.h * train.w * train.c;
    let cols = d + 1; // bias feature

    // Accumulate XᵀX and XᵀY without materializing X.
    let mut xtx = DenseMat::zeros(cols, cols);
    let mut xty = DenseMat::zeros(cols, classes);
    let mut feat = vec![T::zero(); cols];
    for (img, &l) in train.images.iter().zip(labels) {
        feat[..d].copy_from_slice(img);
        feat[d] = T::one();
        for a in 0..cols {
            let fa = feat[a];
            let row = xtx.row_mut(a);
            for (b, &fb) in feat.iter().enumerate() {
                row[b] += fa * fb;
            }
            xty.row_mut(a)[l] += fa;
        }
    }
    let trace_mean =
        (0..cols).map(|i| xtx.row(i)[i]).sum::<T>() / real::<T>(cols as f64);
    let ridge = trace_mean * real::<T>(1e-6);
    for i in 0..cols {
        xtx.row_mut(i)[i] += ridge;
    }
    let w = solve_spd_mat(&xtx, &xty)?;

    let mut hits = 0usize;
    for (img, &l) in test.images.iter().zip(test_labels) {
        feat[..d].copy_from_slice(img);
        feat[d] = T::one();
        let mut best = 0usize;
        let mut best_score = T::neg_infinity();
        for c in 0..classes {
            let score: T = (0..cols).map(|a| feat[a] * w.row(a)[c]).sum();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        hits += usize::from(best == l);
    }
    Ok(hits as f64 / test.images.len() as f64)
}

/// Ordinary least squares for `y ≈ slope·x + intercept` in one dimension.
pub fn linear_fit_1d<T: Real>(xs: &[T], ys: &[T]) -> Result<(T, T)> {
    if xs.len() != ys.len() {
        return Err(CoreError::ShapeMismatch {
            context: "linear fit operands",
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(CoreError::InvalidParameter("linear fit needs ≥ 2 points".into()));
    }
    let n = real::<T>(xs.len() as f64);
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == T::zero() {
        return Err(CoreError::InvalidParameter("degenerate design: all x equal".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Root-mean-square error between two equal-length sequences.
pub fn rmse<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch {
            context: "rmse operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(CoreError::InvalidParameter("rmse of empty sequences".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64_c() - y.to_f64_c();
            d * d
        })
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = vec![-1.0f64, -0.5, 0.0, 0.25, 1.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.7).collect();
        let (a, b) = linear_fit_1d(&xs, &ys).unwrap();
        assert!((a - 3.0).abs() < 1e-12 && (b + 0.7).abs() < 1e-12);
        assert!(linear_fit_1d(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn rmse_formula() {
        let a = vec![0.0f64, 1.0];
        let b = vec![3.0f64, 5.0];
        // mean of (9, 16) = 12.5
        assert!((rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn lsq_classifier_solves_separable_toy() {
        // Two Gaussian-ish blobs in 2 pixels: class by which pixel is hot.
        let mk = |n: usize, seed: u64| -> Dataset<f64> {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let l = i % 2;
                let hot = 0.8 + rng.gen_range(-0.1..0.1);
                let cold = 0.2 + rng.gen_range(-0.1..0.1);
                images.push(if l == 0 { vec![hot, cold] } else { vec![cold, hot] });
                labels.push(l);
            }
            Dataset { images, h: 1, w: 2, c: 1, labels: Some(labels), name: "toy".into() }
        };
        let acc = lsq_classifier_accuracy(&mk(80, 1), &mk(40, 2)).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn lsq_classifier_beats_chance_on_digit_corpus() {
        use crate::synth::digit_corpus;
        let train = digit_corpus::<f64>(300, 21);
        let test = digit_corpus::<f64>(100, 22);
        let acc = lsq_classifier_accuracy(&train, &test).unwrap();
        assert!(acc > 0.3, "digit-corpus LSQ accuracy {acc}");
    }
}
