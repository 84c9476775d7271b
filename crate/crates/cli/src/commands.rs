//! Subcommand drivers: run a pipeline stage and write its files.

use std::fmt::Write as _;
use std::path::Path;

use eeg2img::clddm::Denoiser;
use eeg2img::container::file_sha256;
use eeg2img::evalsuite::MetricReport;
use eeg2img::gradsuite::{self, SuiteConfig};
use eeg2img::stencoder::StEncoder;
use eeg2img::triplet::TrainReport;
use eeg2img::windows::save_tokens;
use eeg2img::{Error, Result, Scalar};

use crate::config::{Harness, Precision, RunConfig};
use crate::output::{embeddings_csv, losses_csv, RunDir};
use crate::pipeline;

/// Calls a generic function with the configured scalar type.
macro_rules! dispatch {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Names the file in I/O errors from checkpoint loading.
fn load<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    f(path).map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("{}: {io}", path.display())),
        e => e,
    })
}

fn log_training(rep: &TrainReport) {
    for w in &rep.warnings {
        log::warn!("event=training_warning msg={w:?}");
    }
    if let Some(last) = rep.curve.last() {
        log::info!("event=encoder_trained epochs={} final_loss={:?}", rep.curve.len(), last.mean_loss);
    }
}

fn log_reports(reports: &[MetricReport]) {
    for r in reports {
        log::info!("event=metric name={} value={:.6} k={} m={}", r.metric, r.value, r.k, r.m);
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    ds.save(&dir.file("dataset.bgn"))?;
    let mut counts = std::collections::BTreeMap::new();
    for i in 0..ds.len() {
        let split = ds.split_of(i).map_or("none", |s| s.name());
        *counts.entry((ds.recordings[i].label, split)).or_insert(0usize) += 1;
    }
    let mut csv = String::from("class,split,count\n");
    for ((class, split), n) in counts {
        let _ = writeln!(csv, "{class},{split},{n}");
    }
    dir.write("class_counts.csv", csv)?;
    log::info!("event=dataset recordings={} classes={} path={}", ds.len(), ds.num_classes, dir.file("dataset.bgn").display());
    Ok(())
}

fn train_encoder_s<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    let (enc, rep) = pipeline::train_encoder::<S>(cfg, &ds)?;
    log_training(&rep);
    enc.save(&dir.file("encoder.bgk"))?;
    dir.write("loss_curve.csv", rep.to_csv())
}

pub fn train_encoder(cfg: &RunConfig, out: &Path) -> Result<()> {
    dispatch!(cfg, train_encoder_s(cfg, out))
}

fn eval_s<S: Scalar>(cfg: &RunConfig, out: &Path, encoder: &Path) -> Result<()> {
    let enc = load(encoder, StEncoder::<S>::load)?;
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    let hash = file_sha256(encoder)?;
    let outcome = pipeline::evaluate(cfg, &ds, &enc, &cfg.fingerprint())?;
    let reports: Vec<_> = outcome.reports.into_iter().map(|r| r.with_checkpoint(&hash)).collect();
    log_reports(&reports);
    dir.write_metrics(&reports)?;
    if cfg.eval.export_embeddings {
        dir.write("embeddings.csv", embeddings_csv(&outcome.embeddings))?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, encoder: &Path) -> Result<()> {
    dispatch!(cfg, eval_s(cfg, out, encoder))
}

fn zero_shot_s<S: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    let outcome = pipeline::zero_shot::<S>(cfg, &ds)?;
    log_training(&outcome.training);
    let path = dir.file("encoder.bgk");
    outcome.encoder.save(&path)?;
    let hash = file_sha256(&path)?;
    let fp = cfg.fingerprint();
    let reports: Vec<_> = [outcome.kmeans, outcome.knn]
        .into_iter()
        .map(|r| MetricReport {
            config_fingerprint: fp.clone(),
            ..r
        }
        .with_checkpoint(&hash))
        .collect();
    log_reports(&reports);
    dir.write("loss_curve.csv", outcome.training.to_csv())?;
    dir.write_metrics(&reports)
}

pub fn zero_shot(cfg: &RunConfig, out: &Path) -> Result<()> {
    dispatch!(cfg, zero_shot_s(cfg, out))
}

fn train_diffusion_s<S: Scalar>(cfg: &RunConfig, out: &Path, encoder: &Path) -> Result<()> {
    let enc = load(encoder, StEncoder::<S>::load)?;
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    let outcome = pipeline::train_diffusion(cfg, &ds, &enc)?;
    outcome.denoiser.save(&dir.file("denoiser.bgk"))?;
    save_tokens(&outcome.tokens, &pipeline::token_spec(cfg, &ds)?, &dir.file("tokens.bgk"))?;
    dir.write("diffusion_loss.csv", losses_csv(&outcome.losses))
}

pub fn train_diffusion(cfg: &RunConfig, out: &Path, encoder: &Path) -> Result<()> {
    dispatch!(cfg, train_diffusion_s(cfg, out, encoder))
}

fn write_generation(dir: &RunDir, outcome: &pipeline::GenerationOutcome) -> Result<()> {
    let mut csv = String::from("index,source,class,predicted");
    let len = outcome.samples.first().map_or(0, |s| s.len());
    for j in 0..len {
        let _ = write!(csv, ",v{j}");
    }
    csv.push('\n');
    for (i, s) in outcome.samples.iter().enumerate() {
        let _ = write!(csv, "{i},{},{},{}", outcome.sources[i], s.class, outcome.predicted[i]);
        for v in &s.data {
            let _ = write!(csv, ",{v:.8e}");
        }
        csv.push('\n');
        dir.write(&format!("samples/class-{}/{i:04}.pgm", s.class), s.to_pgm(0))?;
    }
    dir.write("generated.csv", csv)
}

fn generate_s<S: Scalar>(cfg: &RunConfig, out: &Path, encoder: &Path, denoiser: &Path) -> Result<()> {
    let enc = load(encoder, StEncoder::<S>::load)?;
    let den = load(denoiser, Denoiser::<S>::load)?;
    let dir = RunDir::create(out, cfg)?;
    let ds = pipeline::build_dataset(cfg)?;
    let hash = file_sha256(denoiser)?;
    let outcome = pipeline::generate(cfg, &ds, &enc, &den, &cfg.fingerprint())?;
    let reports: Vec<_> = outcome.reports.iter().cloned().map(|r| r.with_checkpoint(&hash)).collect();
    log_reports(&reports);
    dir.write_metrics(&reports)?;
    write_generation(&dir, &outcome)
}

pub fn generate(cfg: &RunConfig, out: &Path, encoder: &Path, denoiser: &Path) -> Result<()> {
    dispatch!(cfg, generate_s(cfg, out, encoder, denoiser))
}

fn harness_s<S: Scalar>(cfg: &RunConfig, harness: Harness, dir: &RunDir) -> Result<Vec<MetricReport>> {
    let ds = pipeline::build_dataset(cfg)?;
    let (enc, rep) = pipeline::train_encoder::<S>(cfg, &ds)?;
    enc.save(&dir.file("encoder.bgk"))?;
    dir.write("loss_curve.csv", rep.to_csv())?;
    let fp = cfg.fingerprint();
    let enc_hash = file_sha256(&dir.file("encoder.bgk"))?;
    let mut reports: Vec<_> = pipeline::evaluate(cfg, &ds, &enc, &fp)?
        .reports
        .into_iter()
        .map(|r| r.with_checkpoint(&enc_hash))
        .collect();
    if harness == Harness::Generation {
        let trained = pipeline::train_diffusion(cfg, &ds, &enc)?;
        trained.denoiser.save(&dir.file("denoiser.bgk"))?;
        dir.write("diffusion_loss.csv", losses_csv(&trained.losses))?;
        let den_hash = file_sha256(&dir.file("denoiser.bgk"))?;
        let outcome = pipeline::generate(cfg, &ds, &enc, &trained.denoiser, &fp)?;
        reports.extend(outcome.reports.iter().cloned().map(|r| r.with_checkpoint(&den_hash)));
        write_generation(dir, &outcome)?;
    }
    dir.write_metrics(&reports)?;
    Ok(reports)
}

/// Runs one sweep cell end to end in `dir`.
pub fn run_harness(cfg: &RunConfig, harness: Harness, dir: &RunDir) -> Result<Vec<MetricReport>> {
    dispatch!(cfg, harness_s(cfg, harness, dir))
}

/// Runs the finite-difference suite; fails with a numeric error when any case
/// exceeds the tolerance.
pub fn gradcheck(cfg: &RunConfig, out: &Path, suite: &SuiteConfig) -> Result<()> {
    let dir = RunDir::create(out, cfg)?;
    let results = gradsuite::run(suite)?;
    let mut csv = String::from("case,trials,max_rel_err,worst_trial,worst_input,worst_index,analytic,numeric,pass\n");
    let mut failed = Vec::new();
    for r in &results {
        let pass = r.max_rel_err < GRADCHECK_TOLERANCE;
        if !pass {
            failed.push(r.name);
        }
        let w = &r.worst;
        let _ = writeln!(
            csv,
            "{},{},{:.6e},{},{},{},{:.10e},{:.10e},{}",
            r.name, r.trials, r.max_rel_err, r.worst_trial, w.input, w.index, w.analytic, w.numeric, pass
        );
        log::info!("event=gradcheck case={} max_rel_err={:.3e} seconds={:.2} pass={pass}", r.name, r.max_rel_err, r.seconds);
    }
    dir.write("gradcheck.csv", csv)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
