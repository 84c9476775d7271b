//! Cosine-distance triplet loss with semi-hard negative mining, and the
//! contrastive training loop for the encoder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::stencoder::StEncoder;
use crate::tensorcore::{Adam, AdamConfig, Graph, Mode, Tensor, Var};
use crate::windows::WindowSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub margin_beta: f64,
    pub semihard_alpha: f64,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin_beta: 0.05,
            semihard_alpha: 0.1,
            classes_per_batch: 8,
            samples_per_class: 4,
            epochs: 16,
            lr: 1e-3,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_beta > 0.0) || !(self.semihard_alpha > 0.0) {
            bail!(Config, "margin beta and semi-hard alpha must be positive");
        }
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            bail!(Config, "batches need at least 2 classes with 2 samples each");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Embeddings of one batch with their labels and mined triplets.
#[derive(Clone, Debug)]
pub struct TripletBatch<S> {
    pub embeddings: Tensor<S>,
    pub labels: Vec<u32>,
    pub triplets: Vec<Triplet>,
}

/// `1 - u·v / (|u| |v|)`, in `[0, 2]`.
pub fn cosine_distance<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        bail!(Dimension, "cosine distance of lengths {} and {}", u.len(), v.len());
    }
    let nu = u.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nv = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    if nu == S::zero() || nv == S::zero() {
        bail!(Numeric, "cosine distance of a zero-norm vector");
    }
    let dot = u.iter().zip(v).map(|(&a, &b)| a * b).sum::<S>();
    let cos = (dot / (nu * nv)).max(-S::one()).min(S::one());
    Ok(S::one() - cos)
}

/// `max(d_ap - d_an + beta, 0)`.
pub fn triplet_loss<S: Scalar>(d_ap: S, d_an: S, beta: S) -> S {
    (d_ap - d_an + beta).max(S::zero())
}

pub fn triplet_loss_embeddings<S: Scalar>(za: &[S], zp: &[S], zn: &[S], beta: S) -> Result<S> {
    Ok(triplet_loss(cosine_distance(za, zp)?, cosine_distance(za, zn)?, beta))
}

/// Pairwise cosine distances of the rows of `[B, d]`.
pub fn distance_matrix<S: Scalar>(emb: &Tensor<S>) -> Result<Tensor<S>> {
    if emb.rank() != 2 {
        bail!(Dimension, "expected [B, d] embeddings");
    }
    let b = emb.shape()[0];
    let rows: Vec<Vec<S>> = (0..b)
        .into_par_iter()
        .map(|i| (0..b).map(|j| cosine_distance(emb.row(i), emb.row(j))).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Tensor::new(&[b, b], rows.concat())
}

/// Semi-hard triplets from a distance matrix.
///
/// For every ordered same-class pair `(a, p)` the negative is the one with the
/// largest `d_an` strictly inside `(d_ap, d_ap + alpha)`; ties go to the lowest
/// index. Pairs with an empty band contribute nothing. Output is ordered by
/// `(anchor, positive)`.
pub fn mine_from_distances<S: Scalar>(dist: &Tensor<S>, labels: &[u32], alpha: S) -> Vec<Triplet> {
    let b = labels.len();
    (0..b)
        .into_par_iter()
        .flat_map_iter(|a| {
            // Negatives sorted by distance ascending, index descending, so the
            // last entry below the bound has the largest distance and, among
            // equals, the lowest index.
            let mut negs: Vec<(S, usize)> = (0..b)
                .filter(|&n| labels[n] != labels[a])
                .map(|n| (dist.at2(a, n), n))
                .collect();
            negs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(y.1.cmp(&x.1)));
            (0..b)
                .filter(move |&p| p != a && labels[p] == labels[a])
                .filter_map(move |p| {
                    let d_ap = dist.at2(a, p);
                    let hi = d_ap + alpha;
                    let below = negs.partition_point(|&(d, _)| d < hi);
                    let &(d_an, n) = negs[..below].last()?;
                    (d_an > d_ap).then_some(Triplet {
                        anchor: a,
                        positive: p,
                        negative: n,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Semi-hard triplets for `[B, d]` embeddings. A single-class batch yields none.
pub fn mine_semi_hard<S: Scalar>(emb: &Tensor<S>, labels: &[u32], alpha: S) -> Result<Vec<Triplet>> {
    if emb.rank() != 2 || emb.shape()[0] != labels.len() {
        bail!(Dimension, "embeddings {:?} vs {} labels", emb.shape(), labels.len());
    }
    Ok(mine_from_distances(&distance_matrix(emb)?, labels, alpha))
}

/// Mean hinge loss over `triplets`, differentiable with respect to `emb: [B, d]`.
pub fn batch_triplet_loss<S: Scalar>(g: &mut Graph<S>, emb: Var, triplets: &[Triplet], beta: f64) -> Result<Var> {
    if triplets.is_empty() {
        bail!(Input, "no triplets");
    }
    let b = g.shape(emb)[0];
    let zn = g.l2_normalize_rows(emb)?;
    let zt = g.permute(zn, &[1, 0])?;
    let sim = g.matmul(zn, zt)?;
    let m = triplets.len();
    let ap: Vec<usize> = triplets.iter().map(|t| t.anchor * b + t.positive).collect();
    let an: Vec<usize> = triplets.iter().map(|t| t.anchor * b + t.negative).collect();
    // d_ap - d_an = (1 - s_ap) - (1 - s_an) = s_an - s_ap
    let s_ap = g.gather(sim, &ap, &[m])?;
    let s_an = g.gather(sim, &an, &[m])?;
    let diff = g.sub(s_an, s_ap)?;
    let margin = g.constant(Tensor::full(&[m], S::of(beta)))?;
    let h = g.add(diff, margin)?;
    let h = g.relu(h)?;
    g.mean(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Triplet-weighted mean loss; `None` when no triplet was mined all epoch.
    pub mean_loss: Option<f64>,
    pub n_triplets: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    /// `epoch,mean_loss,n_triplets` rows, empty loss for triplet-free epochs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,n_triplets\n");
        for r in &self.curve {
            let loss = r.mean_loss.map(|l| format!("{l:.10e}")).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, loss, r.n_triplets));
        }
        s
    }
}

/// Class-balanced batch indices: `classes_per_batch` distinct classes (all of
/// them if fewer exist) times `samples_per_class` windows, cycling through a
/// per-class shuffled pool.
struct BalancedSampler {
    pools: Vec<Vec<usize>>,
    cursors: Vec<usize>,
}

impl BalancedSampler {
    fn new(labels: &[u32]) -> Self {
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let pools = classes
            .iter()
            .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
            .collect::<Vec<Vec<usize>>>();
        let cursors = vec![usize::MAX; pools.len()];
        Self { pools, cursors }
    }

    fn draw(&mut self, cfg: &ContrastiveConfig, rng: &mut RngStream) -> Vec<usize> {
        let mut classes: Vec<usize> = (0..self.pools.len()).collect();
        rng.shuffle(&mut classes);
        classes.truncate(cfg.classes_per_batch);
        classes.sort_unstable();
        let mut out = Vec::with_capacity(cfg.batch_size());
        for c in classes {
            for _ in 0..cfg.samples_per_class.min(self.pools[c].len()) {
                if self.cursors[c] >= self.pools[c].len() {
                    rng.shuffle(&mut self.pools[c]);
                    self.cursors[c] = 0;
                }
                out.push(self.pools[c][self.cursors[c]]);
                self.cursors[c] += 1;
            }
        }
        out
    }
}

/// Trains `encoder` in place with Adam on semi-hard triplets mined per batch.
/// One epoch is `len / batch_size` batches (at least one).
pub fn train_contrastive<S: Scalar>(
    train: &WindowSet<S>,
    encoder: &mut StEncoder<S>,
    cfg: &ContrastiveConfig,
    rng: &RngStream,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Input, "empty training set");
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), encoder.params())?;
    let mut sampler = BalancedSampler::new(&train.labels);
    let mut batch_rng = rng.split("batches");
    let mut dropout_rng = rng.split("dropout");
    let batches = (train.len() / cfg.batch_size()).max(1);
    let alpha = S::of(cfg.semihard_alpha);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..batches {
            let idx = sampler.draw(cfg, &mut batch_rng);
            let labels: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let x = train.gather(&idx)?;
            let mut g = Graph::new(Mode::Train);
            let p = g.bind(encoder.params(), true)?;
            let xv = g.constant(x)?;
            let z = encoder.forward(&mut g, &p, xv, &mut dropout_rng)?;
            let triplets = mine_from_distances(&distance_matrix(g.value(z))?, &labels, alpha);
            if triplets.is_empty() {
                continue;
            }
            let loss = batch_triplet_loss(&mut g, z, &triplets, cfg.margin_beta)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).data()[0].as_f64() * triplets.len() as f64;
            count += triplets.len();
            let grads = g.gradients(&p);
            opt.step(encoder.params_mut(), &grads)?;
        }
        let mean_loss = (count > 0).then(|| loss_sum / count as f64);
        if count == 0 {
            let w = format!("epoch {epoch}: no semi-hard triplets mined");
            log::warn!("event=empty_epoch epoch={epoch}");
            report.warnings.push(w);
        }
        log::debug!("event=epoch epoch={epoch} triplets={count} loss={mean_loss:?}");
        report.curve.push(EpochRecord {
            epoch,
            mean_loss,
            n_triplets: count,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(triplet_loss(0.2, 0.5, 0.05), 0.0);
        assert!((triplet_loss(0.4f64, 0.41, 0.05) - 0.04).abs() < 1e-12);
        assert!((triplet_loss(0.5f64, 0.3, 0.05) - 0.25).abs() < 1e-12);
        assert_eq!(triplet_loss(0.0, 0.0, 0.05), 0.05);
    }

    fn dist_from(anchor_row: &[f64]) -> Tensor<f64> {
        // Symmetric matrix whose row/column 0 is `anchor_row`; other entries 1.
        let b = anchor_row.len();
        Tensor::from_fn(&[b, b], |k| {
            let (i, j) = (k / b, k % b);
            if i == j {
                0.0
            } else if i == 0 {
                anchor_row[j]
            } else if j == 0 {
                anchor_row[i]
            } else {
                1.0
            }
        })
    }

    #[test]
    fn band_selects_only_interior_negative() {
        // 0 anchor, 1 positive (0.30), negatives at 0.25, 0.35, 0.50.
        let d = dist_from(&[0.0, 0.30, 0.25, 0.35, 0.50]);
        let labels = [0, 0, 1, 1, 1];
        let t: Vec<_> = mine_from_distances(&d, &labels, 0.1).into_iter().filter(|t| t.anchor == 0).collect();
        assert_eq!(t, vec![Triplet { anchor: 0, positive: 1, negative: 3 }]);

        let d = dist_from(&[0.0, 0.30, 0.10, 0.20]);
        let t: Vec<_> = mine_from_distances(&d, &[0, 0, 1, 1], 0.1).into_iter().filter(|t| t.anchor == 0).collect();
        assert!(t.is_empty());
    }

    #[test]
    fn single_class_batch_is_empty_not_error() {
        let e = Tensor::from_fn(&[4, 3], |i| (i as f64 + 1.0).sin());
        assert!(mine_semi_hard(&e, &[2, 2, 2, 2], 0.1).unwrap().is_empty());
    }

    #[test]
    fn constant_embeddings_mine_nothing() {
        let e = Tensor::full(&[6, 3], 1.0);
        assert!(mine_semi_hard(&e, &[0, 0, 0, 1, 1, 1], 0.1).unwrap().is_empty());
    }

    #[test]
    fn batch_loss_matches_scalar_formula() {
        let mut r = RngStream::new(3);
        let e = Tensor::from_fn(&[4, 5], |_| r.normal());
        let trip = vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 3, positive: 2, negative: 1 },
        ];
        let mut g = Graph::<f64>::eval();
        let v = g.constant(e.clone()).unwrap();
        let l = batch_triplet_loss(&mut g, v, &trip, 0.05).unwrap();
        let want = trip
            .iter()
            .map(|t| triplet_loss_embeddings(e.row(t.anchor), e.row(t.positive), e.row(t.negative), 0.05).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }
}
