//! Embedding and generation metrics: k-means accuracy with Hungarian
//! matching, cosine KNN, classification accuracy, Inception Score, FID, and
//! the held-out-class protocol.

mod generative;
mod hungarian;
mod kmeans;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, Split};
use crate::error::{bail, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::stencoder::{EncoderConfig, StEncoder};
use crate::tensorcore::Tensor;
use crate::triplet::{self, ContrastiveConfig, TrainReport};
use crate::windows::{windows_for_indices, WindowSpec};

pub use generative::{fid, fid_from_moments, inception_score, latents_matrix, FeatureExtractor, Moments, OracleClassifier};
pub use hungarian::{max_count_assignment, min_cost_assignment};
pub use kmeans::{kmeans, KMeansConfig, KMeansFit};

/// Default neighbor count for KNN accuracy.
pub const DEFAULT_KNN_K: usize = 5;

/// Rows scaled to unit length, in f64. A zero row is a numeric error.
pub fn normalized_rows<S: Scalar>(x: &Tensor<S>) -> Result<Vec<Vec<f64>>> {
    if x.rank() != 2 {
        bail!(Dimension, "expected [m, d] embeddings, got {:?}", x.shape());
    }
    x.rows()
        .enumerate()
        .map(|(i, r)| {
            let v: Vec<f64> = r.iter().map(|s| s.as_f64()).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                bail!(Numeric, "embedding row {i} has norm {n}");
            }
            Ok(v.into_iter().map(|a| a / n).collect())
        })
        .collect()
}

fn distinct(labels: &[u32]) -> Vec<u32> {
    let mut d = labels.to_vec();
    d.sort_unstable();
    d.dedup();
    d
}

/// Accuracy of `assignment` after the optimal one-to-one cluster→label map.
pub fn matched_accuracy(assignment: &[usize], labels: &[u32], k: usize) -> f64 {
    let classes = distinct(labels);
    let col: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut table = vec![vec![0usize; classes.len()]; k];
    for (&a, l) in assignment.iter().zip(labels) {
        table[a][col[l]] += 1;
    }
    let map = max_count_assignment(&table);
    let hit: usize = map
        .iter()
        .enumerate()
        .filter(|(_, &j)| j != usize::MAX)
        .map(|(i, &j)| table[i][j])
        .sum();
    hit as f64 / labels.len() as f64
}

/// k-means on L2-normalized embeddings, scored by Hungarian-matched accuracy.
/// `k` must equal the number of distinct labels.
pub fn kmeans_accuracy<S: Scalar>(emb: &Tensor<S>, labels: &[u32], k: usize, seed: u64) -> Result<f64> {
    let pts = normalized_rows(emb)?;
    if pts.len() != labels.len() {
        bail!(Dimension, "{} embeddings vs {} labels", pts.len(), labels.len());
    }
    if k > pts.len() {
        bail!(Input, "k = {k} exceeds {} samples", pts.len());
    }
    let classes = distinct(labels).len();
    if k != classes {
        bail!(Input, "k = {k} but the labels contain {classes} classes");
    }
    let fit = kmeans(&pts, k, seed, &KMeansConfig::default())?;
    Ok(matched_accuracy(&fit.assignment, labels, k))
}

/// Majority vote over the `k` nearest training rows by cosine distance.
/// Neighbors are ordered by (distance, index); a vote tie goes to the tied
/// label that appears first in that order.
pub fn knn_predict<S: Scalar>(train: &Tensor<S>, train_labels: &[u32], test: &Tensor<S>, k: usize) -> Result<Vec<u32>> {
    let tr = normalized_rows(train)?;
    let te = normalized_rows(test)?;
    if tr.is_empty() || te.is_empty() {
        bail!(Input, "KNN needs non-empty train and test sets");
    }
    if tr.len() != train_labels.len() {
        bail!(Dimension, "{} train rows vs {} labels", tr.len(), train_labels.len());
    }
    if tr[0].len() != te[0].len() {
        bail!(Dimension, "train dim {} vs test dim {}", tr[0].len(), te[0].len());
    }
    if k == 0 || k > tr.len() {
        bail!(Input, "k = {k} neighbors for {} train rows", tr.len());
    }
    Ok(te
        .par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = tr
                .iter()
                .enumerate()
                .map(|(i, r)| (1.0 - q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let near = &d[..k];
            let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
            for &(_, i) in near {
                *votes.entry(train_labels[i]).or_default() += 1;
            }
            let top = *votes.values().max().unwrap();
            near.iter()
                .map(|&(_, i)| train_labels[i])
                .find(|l| votes[l] == top)
                .unwrap()
        })
        .collect())
}

pub fn knn_accuracy<S: Scalar>(train: &Tensor<S>, train_labels: &[u32], test: &Tensor<S>, test_labels: &[u32], k: usize) -> Result<f64> {
    if test.rank() != 2 || test.shape()[0] != test_labels.len() {
        bail!(Dimension, "test rows vs {} labels", test_labels.len());
    }
    let pred = knn_predict(train, train_labels, test, k)?;
    Ok(accuracy(&pred, test_labels))
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    let hit = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hit as f64 / truth.len().max(1) as f64
}

/// Short content hash used to tie reports to configurations.
pub fn fingerprint(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    /// Cluster count, neighbor count or class count, depending on the metric.
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub checkpoint_hash: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "metric,value,k,m,seed,config_fingerprint,checkpoint_hash";

    pub fn new(metric: &str, value: f64, k: usize, m: usize, seed: u64, config_fingerprint: &str) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            k,
            m,
            seed,
            config_fingerprint: config_fingerprint.to_string(),
            checkpoint_hash: String::new(),
        }
    }

    pub fn with_checkpoint(mut self, hash: &str) -> Self {
        self.checkpoint_hash = hash.to_string();
        self
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.10},{},{},{},{},{}",
            self.metric, self.value, self.k, self.m, self.seed, self.config_fingerprint, self.checkpoint_hash
        )
    }
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Appends rows to a CSV ledger, writing the header when the file is new.
pub fn append_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", MetricReport::CSV_HEADER)?;
    }
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Everything the held-out-class protocol depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSetup {
    pub seen: Vec<u32>,
    pub held_out: Vec<u32>,
    pub encoder: EncoderConfig,
    pub training: ContrastiveConfig,
    pub window: WindowSpec,
    pub knn_k: usize,
    pub seed: u64,
}

impl ZeroShotSetup {
    pub fn fingerprint(&self) -> String {
        fingerprint(&toml::to_string(self).unwrap_or_default())
    }
}

#[derive(Clone, Debug)]
pub struct ZeroShotOutcome<S> {
    pub kmeans: MetricReport,
    pub knn: MetricReport,
    pub training: TrainReport,
    pub encoder: StEncoder<S>,
}

/// Trains an encoder on the seen classes only, then scores held-out-class
/// windows: k-means over all of them (k = number of held-out classes) and
/// KNN with half of each held-out class's recordings as reference.
pub fn zero_shot_protocol<S: Scalar>(ds: &Dataset, setup: &ZeroShotSetup) -> Result<ZeroShotOutcome<S>> {
    if setup.held_out.is_empty() {
        bail!(Protocol, "held-out class set is empty");
    }
    if setup.seen.len() < 2 {
        bail!(Protocol, "training needs at least 2 seen classes");
    }
    let present = ds.class_counts();
    for c in setup.seen.iter().chain(&setup.held_out) {
        if !present.contains_key(c) {
            bail!(Protocol, "class {c} does not occur in the dataset");
        }
    }
    if let Some(c) = setup.held_out.iter().find(|c| setup.seen.contains(c)) {
        bail!(Protocol, "class {c} is both seen and held out");
    }
    if distinct(&setup.held_out).len() != setup.held_out.len() {
        bail!(Protocol, "held-out classes contain duplicates");
    }
    let root = RngStream::new(setup.seed);
    let seen_idx: Vec<usize> = (0..ds.len()).filter(|&i| setup.seen.contains(&ds.recordings[i].label)).collect();
    let train = windows_for_indices::<S>(ds, &seen_idx, &setup.window)?;
    let mut encoder = StEncoder::new(setup.encoder.clone(), &mut root.split("encoder-init"))?;
    let training = triplet::train_contrastive(&train, &mut encoder, &setup.training, &root.split("contrastive"))?;

    let held = data::split(&ds.filter_classes(&setup.held_out), &[0.5, 0.0, 0.5], setup.seed)?;
    let all: Vec<usize> = (0..held.len()).collect();
    let ref_set = windows_for_indices::<S>(&held, &held.indices(Split::Train), &setup.window)?;
    let query_set = windows_for_indices::<S>(&held, &held.indices(Split::Test), &setup.window)?;
    let all_set = windows_for_indices::<S>(&held, &all, &setup.window)?;
    let fp = setup.fingerprint();
    let k = setup.held_out.len();
    let z_all = encoder.embed(&all_set.windows)?;
    let km = kmeans_accuracy(&z_all, &all_set.labels, k, setup.seed)?;
    let z_ref = encoder.embed(&ref_set.windows)?;
    let z_query = encoder.embed(&query_set.windows)?;
    let kn = knn_accuracy(&z_ref, &ref_set.labels, &z_query, &query_set.labels, setup.knn_k)?;
    Ok(ZeroShotOutcome {
        kmeans: MetricReport::new("zero_shot_kmeans_accuracy", km, k, all_set.len(), setup.seed, &fp),
        knn: MetricReport::new("zero_shot_knn_accuracy", kn, setup.knn_k, query_set.len(), setup.seed, &fp),
        training,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn square_corners_separate() {
        let x = t2(&[[1.0, 1.0], [1.0, 0.9], [-1.0, -1.0], [-1.0, -0.9]]);
        assert_eq!(kmeans_accuracy(&x, &[0, 0, 1, 1], 2, 0).unwrap(), 1.0);
    }

    #[test]
    fn wrong_k_is_input_error() {
        let x = t2(&[[1.0, 1.0], [1.0, 0.9], [-1.0, -1.0], [-1.0, -0.9]]);
        assert!(matches!(kmeans_accuracy(&x, &[0, 0, 1, 1], 3, 0), Err(crate::Error::Input(_))));
        assert!(matches!(kmeans_accuracy(&x, &[0, 0, 1, 1], 5, 0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn matched_accuracy_ignores_cluster_ids() {
        let labels = [0, 0, 1, 1, 2, 2, 2];
        let a = [2, 2, 0, 1, 1, 1, 0];
        let perm = [1, 1, 2, 0, 0, 0, 2];
        assert_eq!(matched_accuracy(&a, &labels, 3), matched_accuracy(&perm, &labels, 3));
    }

    fn greedy_accuracy(table: &[Vec<usize>], m: usize) -> f64 {
        let mut used = vec![false; table[0].len()];
        let mut hit = 0;
        for row in table {
            if let Some((j, &c)) = row.iter().enumerate().filter(|(j, _)| !used[*j]).max_by_key(|(_, &c)| c) {
                used[j] = true;
                hit += c;
            }
        }
        hit as f64 / m as f64
    }

    proptest! {
        #[test]
        fn hungarian_beats_greedy(k in 2usize..6, seed in any::<u64>()) {
            let mut r = RngStream::new(seed);
            let m = 60;
            let labels: Vec<u32> = (0..m).map(|i| (i % k) as u32).collect();
            let assign: Vec<usize> = (0..m).map(|_| r.below(k)).collect();
            let mut table = vec![vec![0usize; k]; k];
            for (a, l) in assign.iter().zip(&labels) {
                table[*a][*l as usize] += 1;
            }
            prop_assert!(matched_accuracy(&assign, &labels, k) >= greedy_accuracy(&table, m) - 1e-12);
        }
    }

    #[test]
    fn knn_duplicate_point() {
        let tr = t2(&[[1.0, 0.0], [0.0, 1.0]]);
        let te = t2(&[[0.0, 2.0]]);
        assert_eq!(knn_predict(&tr, &[4, 7], &te, 1).unwrap(), vec![7]);
    }

    #[test]
    fn knn_tie_goes_to_lowest_index_nearest() {
        let tr = t2(&[[1.0, 0.0], [0.0, 1.0]]);
        let te = t2(&[[1.0, 1.0]]);
        assert_eq!(knn_predict(&tr, &[3, 1], &te, 2).unwrap(), vec![3]);
        assert_eq!(knn_predict(&tr, &[3, 1], &te, 1).unwrap(), vec![3]);
        let nudged = t2(&[[1.0, 1.0001]]);
        assert_eq!(knn_predict(&tr, &[3, 1], &nudged, 2).unwrap(), vec![1]);
    }

    #[test]
    fn knn_k_too_large() {
        let tr = t2(&[[1.0, 0.0]]);
        assert!(matches!(knn_predict(&tr, &[0], &tr, 2), Err(crate::Error::Input(_))));
    }

    #[test]
    fn report_csv_shape() {
        let r = MetricReport::new("kmeans_accuracy", 0.5, 10, 100, 3, "abc");
        let csv = reports_csv(&[r]);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 7);
    }
}
