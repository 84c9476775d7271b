use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::clddm::LatentImage;
use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::stencoder::ClassifierHead;
use crate::tensorcore::Tensor;

const ROW_SUM_TOL: f64 = 1e-6;
const NEG_EIG_TOL: f64 = 1e-8;

/// `exp(mean_i KL(p(y|x_i) || p(y)))` for class probabilities `[m, K]`.
pub fn inception_score(probs: &Tensor<f64>) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] == 0 {
        bail!(Input, "expected a non-empty [m, K] probability matrix");
    }
    let (m, k) = (probs.shape()[0], probs.shape()[1]);
    for (i, row) in probs.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > ROW_SUM_TOL {
            bail!(Input, "row {i} is not a distribution (sum {s})");
        }
    }
    let mut marginal = vec![0.0; k];
    for row in probs.rows() {
        for (mj, &p) in marginal.iter_mut().zip(row) {
            *mj += p / m as f64;
        }
    }
    let mean_kl = probs
        .rows()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / m as f64;
    Ok(mean_kl.exp())
}

/// Gaussian moments of a feature set `[m, D]` with the unbiased covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn of(features: &Tensor<f64>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] < 2 {
            bail!(Input, "moments need a [m, D] matrix with m >= 2");
        }
        let (m, d) = (features.shape()[0], features.shape()[1]);
        if m <= d {
            log::warn!("event=fid_few_samples m={m} dim={d}");
        }
        let x = DMatrix::from_row_slice(m, d, features.data());
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Eigenvalues of a symmetric matrix with small negatives clamped to zero.
/// Negatives below `-1e-8 * max(1, largest)` are a numeric error.
fn psd_eigen(a: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (a + a.transpose()) * 0.5;
    if sym.iter().any(|x| !x.is_finite()) {
        bail!(Numeric, "{what} has non-finite entries");
    }
    let mut e = SymmetricEigen::new(sym);
    let top = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let low = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if low < -NEG_EIG_TOL * top.max(1.0) {
        bail!(Numeric, "{what} is not positive semi-definite: eigenvalue {low:e} (largest {top:e})");
    }
    e.eigenvalues.apply(|l| *l = l.max(0.0));
    Ok(e)
}

/// `|mu_r - mu_g|² + tr(S_r + S_g - 2 (S_r S_g)^{1/2})`, with the trace of the
/// square root taken from the symmetric form `S_r^{1/2} S_g S_r^{1/2}`.
pub fn fid_from_moments(real: &Moments, gen: &Moments) -> Result<f64> {
    if real.mean.len() != gen.mean.len() {
        bail!(Dimension, "feature dims {} vs {}", real.mean.len(), gen.mean.len());
    }
    let er = psd_eigen(&real.cov, "real covariance")?;
    let root = &er.eigenvectors * DMatrix::from_diagonal(&er.eigenvalues.map(f64::sqrt)) * er.eigenvectors.transpose();
    let inner = &root * &gen.cov * &root;
    let ei = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = (&real.mean - &gen.mean).norm_squared();
    let value = diff + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt;
    let scale = 1.0 + real.cov.trace() + gen.cov.trace();
    if value < -1e-9 * scale {
        bail!(Numeric, "negative distance {value:e}");
    }
    Ok(value.max(0.0))
}

pub fn fid(real: &Tensor<f64>, gen: &Tensor<f64>) -> Result<f64> {
    fid_from_moments(&Moments::of(real)?, &Moments::of(gen)?)
}

/// Frozen map from latents to features and class probabilities.
pub trait FeatureExtractor {
    /// `[m, D]` features for `[m, latent_len]` inputs.
    fn features(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    /// `[m, K]` row-stochastic class probabilities.
    fn probabilities(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

/// Small classifier trained on real latents; the hidden layer gives features
/// and the softmax gives class probabilities.
#[derive(Clone, Debug)]
pub struct OracleClassifier {
    head: ClassifierHead<f64>,
    input_len: usize,
}

pub fn latents_matrix(latents: &[LatentImage]) -> Result<Tensor<f64>> {
    let Some(first) = latents.first() else {
        bail!(Input, "no latents");
    };
    if latents.iter().any(|l| l.len() != first.len()) {
        bail!(Dimension, "latents differ in size");
    }
    Tensor::new(&[latents.len(), first.len()], latents.iter().flat_map(|l| l.data.iter().copied()).collect())
}

impl OracleClassifier {
    pub fn train(latents: &[LatentImage], num_classes: usize, hidden: usize, epochs: usize, rng: &mut RngStream) -> Result<Self> {
        let x = latents_matrix(latents)?;
        let labels: Vec<usize> = latents.iter().map(|l| l.class as usize).collect();
        let input_len = x.shape()[1];
        let mut head = ClassifierHead::new(input_len, hidden, num_classes, rng)?;
        head.fit(&x, &labels, epochs, 1e-2, 32, rng)?;
        Ok(Self { head, input_len })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn predict(&self, x: &Tensor<f64>) -> Result<Vec<usize>> {
        self.check(x)?;
        self.head.predict(x)
    }

    fn check(&self, x: &Tensor<f64>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.input_len {
            bail!(Dimension, "oracle expects [m, {}], got {:?}", self.input_len, x.shape());
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<f64> {
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.rows() {
        let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(&[logits.shape()[0], k], out).expect("shape preserved")
}

impl FeatureExtractor for OracleClassifier {
    fn features(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check(x)?;
        self.head.hidden_features(x)
    }

    fn probabilities(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check(x)?;
        Ok(softmax_rows(&self.head.logits(x)?))
    }
}
