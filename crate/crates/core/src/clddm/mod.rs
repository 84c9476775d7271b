//! Conditional latent diffusion: forward noising, a patch-token denoiser
//! with cross-attention on token sequences, the noise-prediction objective,
//! and ancestral sampling.

mod denoiser;
mod latent;
mod schedule;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensorcore::{Adam, AdamConfig, Graph, Mode, Tensor, Var};

pub use denoiser::{cross_attention, timestep_embedding, Denoiser, DenoiserConfig, DENOISER_KIND};
pub use latent::LatentImage;
pub use schedule::{NoiseSchedule, ScheduleConfig};

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per row of `z0: [B, L]`, noises
/// the latents, and returns `mean((eps - predict(z_t, t))²)`.
pub fn ldm_loss_with<S: Scalar>(
    g: &mut Graph<S>,
    z0: &Tensor<S>,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
    predict: impl FnOnce(&mut Graph<S>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    if z0.rank() != 2 {
        bail!(Dimension, "expected latents [B, L], got {:?}", z0.shape());
    }
    let b = z0.shape()[0];
    let t: Vec<usize> = (0..b).map(|_| 1 + rng.below(schedule.len())).collect();
    let eps = Tensor::from_fn(z0.shape(), |_| S::of(rng.normal()));
    let zt = schedule.q_sample_rows(z0, &t, &eps)?;
    let zt = g.constant(zt)?;
    let pred = predict(g, zt, &t)?;
    if g.shape(pred) != z0.shape() {
        bail!(Dimension, "prediction {:?} vs latents {:?}", g.shape(pred), z0.shape());
    }
    let eps = g.constant(eps)?;
    let diff = g.sub(eps, pred)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// Noise-prediction loss of `den` on latents `[B, L]` with conditioning
/// tokens `cond: [B, n, d]`.
pub fn ldm_loss<S: Scalar>(
    g: &mut Graph<S>,
    p: &crate::tensorcore::Bound,
    den: &Denoiser<S>,
    z0: &Tensor<S>,
    cond: Var,
    schedule: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Var> {
    ldm_loss_with(g, z0, schedule, rng, |g, zt, t| den.forward(g, p, zt, t, cond))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
        }
    }
}

/// Adam on the noise-prediction loss over pairs `(latents[i], cond[i])`.
/// Only denoiser parameters change; `cond` holds precomputed tokens of a
/// frozen encoder. Returns the loss of every step.
pub fn train_denoiser<S: Scalar>(
    den: &mut Denoiser<S>,
    latents: &Tensor<S>,
    cond: &Tensor<S>,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if latents.rank() != 2 || cond.rank() != 3 || latents.shape()[0] != cond.shape()[0] {
        bail!(Dimension, "latents {:?} and conditioning {:?} must pair row by row", latents.shape(), cond.shape());
    }
    if cond.shape()[2] != den.config().token_dim {
        bail!(Config, "conditioning width {} but the denoiser expects {}", cond.shape()[2], den.config().token_dim);
    }
    if cfg.batch == 0 {
        bail!(Config, "batch must be positive");
    }
    let n = latents.shape()[0];
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), den.params())?;
    let mut order_rng = rng.split("order");
    let mut noise_rng = rng.split("noise");
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if order.len() < cfg.batch {
            let mut fresh: Vec<usize> = (0..n).collect();
            order_rng.shuffle(&mut fresh);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..cfg.batch.min(order.len())).collect();
        let z0 = latents.select(&idx)?;
        let c = cond.select(&idx)?;
        let mut g = Graph::new(Mode::Train);
        let p = g.bind(den.params(), true)?;
        let cv = g.constant(c)?;
        let loss = ldm_loss(&mut g, &p, den, &z0, cv, schedule, &mut noise_rng)?;
        g.backward(loss)?;
        losses.push(g.value(loss).data()[0].as_f64());
        let grads = g.gradients(&p);
        opt.step(den.params_mut(), &grads)?;
    }
    Ok(losses)
}

const SAMPLE_CHUNK: usize = 64;

/// Ancestral sampling from pure noise with the posterior variance, over
/// `steps` evenly respaced timesteps (`steps <= T`). Row `i` of `cond:
/// [B, n, d]` conditions sample `i`, whose noise comes from its own stream,
/// so results depend only on `seed` and the row index.
pub fn sample_batch<S: Scalar>(den: &Denoiser<S>, cond: &Tensor<S>, schedule: &NoiseSchedule, steps: usize, seed: u64) -> Result<Tensor<S>> {
    let plan = schedule.respaced(steps)?;
    if cond.rank() != 3 {
        bail!(Dimension, "conditioning must be [B, n, d], got {:?}", cond.shape());
    }
    let b = cond.shape()[0];
    let l = den.config().latent_len();
    let root = RngStream::new(seed);
    let chunks: Vec<Vec<usize>> = (0..b).collect::<Vec<_>>().chunks(SAMPLE_CHUNK).map(|c| c.to_vec()).collect();
    let parts = chunks
        .par_iter()
        .map(|idx| {
            let c = cond.select(idx)?;
            let mut rngs: Vec<RngStream> = idx.iter().map(|&i| root.split_index("sample", i as u64)).collect();
            let mut x: Vec<S> = rngs.iter_mut().flat_map(|r| (0..l).map(|_| S::of(r.normal())).collect::<Vec<_>>()).collect();
            for i in (0..plan.len()).rev() {
                let (t, ab) = plan[i];
                let ab_prev = if i == 0 { 1.0 } else { plan[i - 1].1 };
                let beta = 1.0 - ab / ab_prev;
                let xt = Tensor::new(&[idx.len(), l], x.clone())?;
                let eps = den.predict(&xt, &vec![t; idx.len()], &c)?;
                let coef = beta / (1.0 - ab).sqrt();
                let inv = 1.0 / (1.0 - beta).sqrt();
                let sigma = if i > 0 { ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt() } else { 0.0 };
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for j in 0..l {
                        let k = r * l + j;
                        let mean = inv * (x[k].as_f64() - coef * eps.data()[k].as_f64());
                        let noise = if i > 0 { sigma * rng.normal() } else { 0.0 };
                        x[k] = S::of(mean + noise);
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                bail!(Numeric, "sampling produced non-finite values");
            }
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[b, l], parts.concat())
}

/// Wraps sampled rows `[B, L]` as latent images tagged with `classes`.
pub fn to_latents<S: Scalar>(x: &Tensor<S>, dims: [usize; 3], classes: &[u32]) -> Result<Vec<LatentImage>> {
    if x.rank() != 2 || x.shape()[0] != classes.len() {
        bail!(Dimension, "{:?} samples for {} class tags", x.shape(), classes.len());
    }
    x.rows()
        .zip(classes)
        .map(|(r, &c)| LatentImage::new(dims[0], dims[1], dims[2], c, r.iter().map(|v| v.as_f64()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Denoiser<f64>, NoiseSchedule) {
        let cfg = DenoiserConfig {
            token_dim: 6,
            widths: [8, 8],
            heads: 2,
            ..Default::default()
        };
        (Denoiser::new(cfg, &mut RngStream::new(2)).unwrap(), NoiseSchedule::linear(50, 1e-4, 0.02).unwrap())
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let mut r = RngStream::new(5);
        let z0 = Tensor::from_fn(&[4, 16], |_| r.normal());
        let mut g = Graph::<f64>::eval();
        let mut noise = RngStream::new(6);
        let loss = ldm_loss_with(&mut g, &z0, &s, &mut noise, |g, zt, t| {
            // eps = (z_t - sqrt(abar) z0) / sqrt(1 - abar)
            let v = g.value(zt).clone();
            let e = Tensor::from_fn(&[4, 16], |k| {
                let ab = s.alpha_bar(t[k / 16]).unwrap();
                (v.data()[k] - ab.sqrt() * z0.data()[k]) / (1.0 - ab).sqrt()
            });
            g.constant(e)
        })
        .unwrap();
        assert!(g.value(loss).data()[0] < 1e-20);
    }

    #[test]
    fn zero_predictor_has_unit_loss() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let (b, l) = (200, 50);
        let z0 = Tensor::zeros(&[b, l]);
        let mut g = Graph::<f64>::eval();
        let loss = ldm_loss_with(&mut g, &z0, &s, &mut RngStream::new(8), |g, _, _| g.constant(Tensor::zeros(&[b, l]))).unwrap();
        // mean of n squared unit normals: sd sqrt(2/n)
        let sd = (2.0 / (b * l) as f64).sqrt();
        assert!((g.value(loss).data()[0] - 1.0).abs() < 3.0 * sd);
    }

    #[test]
    fn sampling_is_repeatable_and_rejects_too_many_steps() {
        let (den, s) = small();
        let cond = Tensor::from_fn(&[3, 2, 6], |i| (i as f64).sin());
        let a = sample_batch(&den, &cond, &s, 10, 4).unwrap();
        let b = sample_batch(&den, &cond, &s, 10, 4).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_batch(&den, &cond, &s, 51, 4), Err(crate::Error::Config(_))));
        // A sample depends only on its row index and seed, not on batch size.
        let one = sample_batch(&den, &cond.select(&[0]).unwrap(), &s, 10, 4).unwrap();
        assert_eq!(one.row(0), a.row(0));
    }

    #[test]
    fn training_lowers_loss_and_checkpoint_round_trips() {
        let (mut den, s) = small();
        let mut r = RngStream::new(9);
        let lat = Tensor::from_fn(&[16, 256], |k| if (k / 256) % 2 == 0 { 1.0 } else { -1.0 } + 0.1 * r.normal());
        let cond = Tensor::from_fn(&[16, 2, 6], |k| if (k / 12) % 2 == 0 { 1.0 } else { -1.0 } * (k % 6) as f64);
        let cfg = DiffusionTrainConfig { steps: 60, batch: 8, lr: 3e-3 };
        let losses = train_denoiser(&mut den, &lat, &cond, &s, &cfg, &RngStream::new(1)).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.bgk");
        den.save(&path).unwrap();
        let back = Denoiser::<f64>::load(&path).unwrap();
        assert_eq!(back.checksum(), den.checksum());
    }
}
