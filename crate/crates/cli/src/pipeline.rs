//! Experiment stages shared by the subcommands, the sweep harness and the
//! acceptance suite. Every stage draws its randomness from `cfg.seed` through
//! named substreams, so a stage's output depends only on its inputs.

use eeg2img::clddm::{self, Denoiser, LatentImage};
use eeg2img::data::{self, Dataset, Split};
use eeg2img::evalsuite::{self, accuracy, fid, inception_score, FeatureExtractor, MetricReport, OracleClassifier, ZeroShotOutcome, ZeroShotSetup};
use eeg2img::stencoder::{ClassifierHead, StEncoder};
use eeg2img::triplet::{self, TrainReport};
use eeg2img::windows::{self, stride_for_tokens, TokenSequence, WindowSpec};
use eeg2img::{Error, Result, RngStream, Scalar, Tensor};

use crate::config::RunConfig;

fn root(cfg: &RunConfig) -> RngStream {
    RngStream::new(cfg.seed)
}

/// Loads or generates the dataset, normalizes it when configured and assigns
/// splits unless the file already carries them.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.data.path {
        Some(p) => Dataset::load(p)?,
        None => data::generate_synthetic(&cfg.data.synth, cfg.seed)?,
    };
    let ds = if cfg.data.normalize { ds.normalized() } else { ds };
    if ds.channels != cfg.encoder.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels but encoder.channels is {}",
            ds.channels, cfg.encoder.channels
        )));
    }
    if ds.splits.is_some() {
        return Ok(ds);
    }
    data::split(&ds, &cfg.data.split, cfg.seed)
}

/// Contrastive training on the train-split windows.
pub fn train_encoder<S: Scalar>(cfg: &RunConfig, ds: &Dataset) -> Result<(StEncoder<S>, TrainReport)> {
    let spec = cfg.window_spec(ds.length)?;
    let train = windows::windows_for_split::<S>(ds, Split::Train, &spec)?;
    let r = root(cfg);
    let mut enc = StEncoder::new(cfg.encoder.clone(), &mut r.split("encoder-init"))?;
    log::info!("event=train_encoder windows={} module_set={}", train.len(), cfg.encoder.module_set());
    let report = triplet::train_contrastive(&train, &mut enc, &cfg.training, &r.split("contrastive"))?;
    Ok((enc, report))
}

/// Checks that a loaded encoder fits the configured data.
pub fn check_encoder<S: Scalar>(cfg: &RunConfig, enc: &StEncoder<S>) -> Result<()> {
    let e = enc.config();
    if e.window_len != cfg.encoder.window_len || e.channels != cfg.encoder.channels || e.latent_dim != cfg.encoder.latent_dim {
        return Err(Error::Config(format!(
            "checkpoint encoder (t={}, c={}, d={}) does not match the config (t={}, c={}, d={})",
            e.window_len, e.channels, e.latent_dim, cfg.encoder.window_len, cfg.encoder.channels, cfg.encoder.latent_dim
        )));
    }
    Ok(())
}

/// One test-split embedding with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub source: u32,
    pub offset: usize,
    pub label: u32,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub embeddings: Vec<EmbeddingRow>,
}

/// k-means and KNN on frozen test-window embeddings, plus a classification
/// head trained on train-window embeddings.
pub fn evaluate<S: Scalar>(cfg: &RunConfig, ds: &Dataset, enc: &StEncoder<S>, fp: &str) -> Result<EvalOutcome> {
    check_encoder(cfg, enc)?;
    let spec = cfg.window_spec(ds.length)?;
    let train = windows::windows_for_split::<S>(ds, Split::Train, &spec)?;
    let test = windows::windows_for_split::<S>(ds, Split::Test, &spec)?;
    let z_train = enc.embed(&train.windows)?;
    let z_test = enc.embed(&test.windows)?;
    let k = distinct(&test.labels);
    let km = evalsuite::kmeans_accuracy(&z_test, &test.labels, k, cfg.seed)?;
    let kn = evalsuite::knn_accuracy(&z_train, &train.labels, &z_test, &test.labels, cfg.eval.knn_k)?;
    let mut rng = root(cfg).split("head");
    let e = &cfg.eval;
    let mut head = ClassifierHead::<S>::new(cfg.encoder.latent_dim, e.head_hidden, ds.num_classes, &mut rng)?;
    let train_labels: Vec<usize> = train.labels.iter().map(|&l| l as usize).collect();
    head.fit(&z_train, &train_labels, e.head_epochs, e.head_lr, e.head_batch, &mut rng)?;
    let pred = head.predict(&z_test)?;
    let truth: Vec<usize> = test.labels.iter().map(|&l| l as usize).collect();
    let cls = accuracy(&pred, &truth);
    let m = test.len();
    let reports = vec![
        MetricReport::new("kmeans_accuracy", km, k, m, cfg.seed, fp),
        MetricReport::new("knn_accuracy", kn, e.knn_k, m, cfg.seed, fp),
        MetricReport::new("classification_accuracy", cls, ds.num_classes, m, cfg.seed, fp),
    ];
    let embeddings = z_test
        .rows()
        .enumerate()
        .map(|(i, row)| EmbeddingRow {
            source: test.sources[i],
            offset: test.offsets[i],
            label: test.labels[i],
            vector: row.iter().map(|v| v.as_f64()).collect(),
        })
        .collect();
    Ok(EvalOutcome { reports, embeddings })
}

fn distinct(labels: &[u32]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Trains on every class outside `zero_shot.held_out` and scores the
/// held-out classes.
pub fn zero_shot<S: Scalar>(cfg: &RunConfig, ds: &Dataset) -> Result<ZeroShotOutcome<S>> {
    let held = &cfg.zero_shot.held_out;
    if let Some(c) = held.iter().find(|&&c| c as usize >= ds.num_classes) {
        return Err(Error::Config(format!("held-out class {c} but the dataset has {} classes", ds.num_classes)));
    }
    let seen = (0..ds.num_classes as u32).filter(|c| !held.contains(c)).collect();
    let setup = ZeroShotSetup {
        seen,
        held_out: held.clone(),
        encoder: cfg.encoder.clone(),
        training: cfg.training.clone(),
        window: cfg.window_spec(ds.length)?,
        knn_k: cfg.eval.knn_k,
        seed: cfg.seed,
    };
    evalsuite::zero_shot_protocol(ds, &setup)
}

/// Token windows: the encoder's window length, strided to give exactly
/// `diffusion.tokens` windows per recording.
pub fn token_spec(cfg: &RunConfig, ds: &Dataset) -> Result<WindowSpec> {
    let l = cfg.encoder.window_len;
    WindowSpec::new(l, stride_for_tokens(ds.length, l, cfg.diffusion.tokens)?)
}

pub fn token_sequences<S: Scalar>(cfg: &RunConfig, ds: &Dataset, enc: &StEncoder<S>, idx: &[usize]) -> Result<Vec<TokenSequence<S>>> {
    check_encoder(cfg, enc)?;
    let spec = token_spec(cfg, ds)?;
    idx.iter()
        .map(|&i| {
            let rec = &ds.recordings[i];
            windows::tokenize(&rec.signal.cast(), &spec, enc, rec.id)
        })
        .collect()
}

/// `[N, n, d]` conditioning for the given recordings.
pub fn conditioning<S: Scalar>(seqs: &[TokenSequence<S>]) -> Result<Tensor<S>> {
    Tensor::stack(&seqs.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>())
}

fn paired_latents(ds: &Dataset) -> Result<&[LatentImage]> {
    ds.latents
        .as_deref()
        .ok_or_else(|| Error::Protocol("dataset has no paired latents (set data.synth.with_latents = true)".into()))
}

fn latent_rows<S: Scalar>(lat: &[LatentImage], idx: &[usize]) -> Result<Tensor<S>> {
    let rows: Vec<Vec<S>> = idx.iter().map(|&i| lat[i].data.iter().map(|&v| S::of(v)).collect()).collect();
    Tensor::from_rows(&rows)
}

pub struct DiffusionOutcome<S> {
    pub denoiser: Denoiser<S>,
    pub losses: Vec<f64>,
    pub tokens: Vec<TokenSequence<S>>,
}

/// Trains the denoiser on train-split latents paired with frozen-encoder
/// tokens of the same recordings, or of a random other recording when
/// `diffusion.shuffle_conditioning` is set.
pub fn train_diffusion<S: Scalar>(cfg: &RunConfig, ds: &Dataset, enc: &StEncoder<S>) -> Result<DiffusionOutcome<S>> {
    let lat = paired_latents(ds)?;
    let d = &cfg.diffusion;
    if d.denoiser.latent_len() != lat[0].len() {
        return Err(Error::Config(format!(
            "denoiser latent {:?} does not match the dataset latents ({} values)",
            d.denoiser.latent_dims,
            lat[0].len()
        )));
    }
    let idx = ds.indices(Split::Train);
    let tokens = token_sequences(cfg, ds, enc, &idx)?;
    let mut cond = conditioning(&tokens)?;
    if d.shuffle_conditioning {
        let mut perm: Vec<usize> = (0..idx.len()).collect();
        root(cfg).split("shuffle").shuffle(&mut perm);
        cond = cond.select(&perm)?;
    }
    let z0 = latent_rows::<S>(lat, &idx)?;
    let r = root(cfg);
    let mut denoiser = Denoiser::new(d.denoiser.clone(), &mut r.split("denoiser-init"))?;
    log::info!("event=train_diffusion pairs={} steps={} shuffled={}", idx.len(), d.train.steps, d.shuffle_conditioning);
    let losses = clddm::train_denoiser(&mut denoiser, &z0, &cond, &d.schedule.build()?, &d.train, &r.split("diffusion"))?;
    Ok(DiffusionOutcome { denoiser, losses, tokens })
}

pub struct GenerationOutcome {
    pub reports: Vec<MetricReport>,
    pub samples: Vec<LatentImage>,
    /// Recording id whose tokens conditioned each sample.
    pub sources: Vec<u32>,
    pub predicted: Vec<usize>,
}

/// Samples one latent per test recording from its own tokens and scores the
/// samples with an oracle trained on real train-split latents: class match,
/// IS, and FID against the real test latents.
pub fn generate<S: Scalar>(cfg: &RunConfig, ds: &Dataset, enc: &StEncoder<S>, den: &Denoiser<S>, fp: &str) -> Result<GenerationOutcome> {
    let lat = paired_latents(ds)?;
    let d = &cfg.diffusion;
    if den.config().token_dim != enc.config().latent_dim {
        return Err(Error::Config(format!(
            "denoiser expects {}-wide tokens but the encoder produces {}",
            den.config().token_dim,
            enc.config().latent_dim
        )));
    }
    let train_idx = ds.indices(Split::Train);
    let test_idx = ds.indices(Split::Test);
    let cond = conditioning(&token_sequences(cfg, ds, enc, &test_idx)?)?;
    let x = clddm::sample_batch(den, &cond, &d.schedule.build()?, d.sample_steps, root(cfg).split("sampling").seed())?;
    let classes: Vec<u32> = test_idx.iter().map(|&i| ds.recordings[i].label).collect();
    let samples = clddm::to_latents(&x, den.config().latent_dims, &classes)?;

    let train_lat: Vec<LatentImage> = train_idx.iter().map(|&i| lat[i].clone()).collect();
    let oracle = OracleClassifier::train(&train_lat, ds.num_classes, d.oracle_hidden, d.oracle_epochs, &mut root(cfg).split("oracle"))?;
    let gen = evalsuite::latents_matrix(&samples)?;
    let real = latent_rows::<f64>(lat, &test_idx)?;
    let predicted = oracle.predict(&gen)?;
    let truth: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
    let m = samples.len();
    let k = ds.num_classes;
    let reports = vec![
        MetricReport::new("class_match", accuracy(&predicted, &truth), k, m, cfg.seed, fp),
        MetricReport::new("oracle_real_accuracy", accuracy(&oracle.predict(&real)?, &truth), k, m, cfg.seed, fp),
        MetricReport::new("inception_score", inception_score(&oracle.probabilities(&gen)?)?, k, m, cfg.seed, fp),
        MetricReport::new("fid", fid(&oracle.features(&real)?, &oracle.features(&gen)?)?, k, m, cfg.seed, fp),
    ];
    let sources = test_idx.iter().map(|&i| ds.recordings[i].id).collect();
    Ok(GenerationOutcome { reports, samples, sources, predicted })
}
