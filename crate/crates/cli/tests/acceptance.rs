//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. An optional argument runs only the criteria
//! whose name contains it.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use eeg2img::evalsuite::{fid, inception_score, MetricReport};
use eeg2img::gradsuite::{self, SuiteConfig};
use eeg2img::tensorcore::Tensor;
use eeg2img::triplet::{mine_semi_hard, Triplet};
use eeg2img::windows::WindowSpec;
use eeg2img::RngStream;
use eeg2img_cli::ablate::{self, CellStatus};
use eeg2img_cli::config::parse_override;
use eeg2img_cli::{pipeline, RunConfig};
use toml::Table;

type Check = fn() -> Result<(bool, String), String>;

const CRITERIA: [(&str, Check); 9] = [
    ("gradient_suite", gradient_suite),
    ("tokenizer_counts", tokenizer_counts),
    ("mining_oracle", mining_oracle),
    ("metric_closed_forms", metric_closed_forms),
    ("representation", representation),
    ("zero_shot", zero_shot),
    ("sequence_length_sweep", sequence_length_sweep),
    ("conditional_generation", conditional_generation),
    ("cli_determinism", cli_determinism),
];

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("{} {name} ({secs:.1}s): {detail}", if pass { "PASS" } else { "FAIL" });
        failed += !pass as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn config(overrides: &[&str]) -> Result<RunConfig, String> {
    let ov = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    RunConfig::resolve(&Table::new(), &ov).map_err(err)
}

fn metric(reports: &[MetricReport], name: &str) -> Result<f64, String> {
    reports.iter().find(|r| r.metric == name).map(|r| r.value).ok_or_else(|| format!("no {name} report"))
}

fn gradient_suite() -> Result<(bool, String), String> {
    let start = Instant::now();
    let results = gradsuite::run(&SuiteConfig::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).ok_or("empty suite")?;
    let failing: Vec<_> = results.iter().filter(|r| r.max_rel_err >= 1e-4).map(|r| r.name).collect();
    let pass = failing.is_empty() && secs < 60.0;
    Ok((
        pass,
        format!(
            "{} cases, worst {} at {:.2e} (< 1e-4), {secs:.1}s (< 60s){}",
            results.len(),
            worst.name,
            worst.max_rel_err,
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    ))
}

fn tokenizer_counts() -> Result<(bool, String), String> {
    let mut checked = 0u64;
    for t in 1..=512usize {
        for l in 1..=t {
            for s in 1..=64usize {
                let spec = WindowSpec::new(l, s).map_err(err)?;
                let got = spec.offsets(t).map_err(err)?;
                // Walk every start position and keep those on the stride grid.
                let mut k = 0;
                for o in 0..=t - l {
                    if o % s == 0 {
                        if got.get(k) != Some(&o) {
                            return Ok((false, format!("t={t} l={l} s={s}: offsets {got:?}")));
                        }
                        k += 1;
                    }
                }
                if k != got.len() || spec.count(t).map_err(err)? != k {
                    return Ok((false, format!("t={t} l={l} s={s}: count {} vs {k}", got.len())));
                }
                checked += 1;
            }
        }
    }
    let spot = WindowSpec::new(64, 47).map_err(err)?.count(440).map_err(err)?;
    Ok((spot == 9, format!("{checked} (t, l, s) triples match enumeration; t=440 l=64 s=47 gives {spot} (want 9)")))
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// For each ordered same-class pair, the hardest negative inside the band.
fn brute_force(emb: &Tensor<f64>, labels: &[u32], alpha: f64) -> Vec<Triplet> {
    let b = labels.len();
    let mut out = Vec::new();
    for a in 0..b {
        for p in (0..b).filter(|&p| p != a && labels[p] == labels[a]) {
            let d_ap = cosine(emb.row(a), emb.row(p));
            let mut best: Option<(f64, usize)> = None;
            for n in (0..b).filter(|&n| labels[n] != labels[a]) {
                let d_an = cosine(emb.row(a), emb.row(n));
                if d_ap < d_an && d_an < d_ap + alpha && best.is_none_or(|(d, _)| d_an > d) {
                    best = Some((d_an, n));
                }
            }
            if let Some((_, n)) = best {
                out.push(Triplet { anchor: a, positive: p, negative: n });
            }
        }
    }
    out
}

fn mining_oracle() -> Result<(bool, String), String> {
    let root = RngStream::new(2024);
    let (mut triplets, mut max_b) = (0, 0);
    for i in 0..200 {
        let mut r = root.split_index("batch", i);
        let b = 2 + r.below(63);
        let d = 2 + r.below(31);
        let classes = 1 + r.below(10);
        let labels: Vec<u32> = (0..b).map(|_| r.below(classes) as u32).collect();
        let emb = Tensor::from_fn(&[b, d], |_| r.normal());
        let alpha = r.uniform_range(0.01, 0.5);
        let got = mine_semi_hard(&emb, &labels, alpha).map_err(err)?;
        if got != brute_force(&emb, &labels, alpha) {
            return Ok((false, format!("batch {i} (B={b}) differs from brute force")));
        }
        triplets += got.len();
        max_b = max_b.max(b);
    }
    Ok((true, format!("200 batches (B <= {max_b}) identical, {triplets} triplets")))
}

fn metric_closed_forms() -> Result<(bool, String), String> {
    let col = |v: &[f64]| Tensor::new(&[v.len(), 1], v.to_vec()).map_err(err);
    let mut r = RngStream::new(11);
    let x = Tensor::from_fn(&[64, 4], |_| r.normal());
    let same = fid(&x, &x).map_err(err)?;
    // Two points at ±1/√2 have mean 0 and unbiased variance 1.
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let shift = fid(&col(&[-a, a])?, &col(&[1.0 - a, 1.0 + a])?).map_err(err)?;
    let scale = fid(&col(&[-a, a])?, &col(&[-2.0 * a, 2.0 * a])?).map_err(err)?;
    let uniform = inception_score(&Tensor::full(&[10, 10], 0.1)).map_err(err)?;
    let onehot = inception_score(&Tensor::from_fn(&[30, 10], |i| if (i / 10) % 10 == i % 10 { 1.0 } else { 0.0 })).map_err(err)?;
    let pass = same.abs() <= 1e-6
        && (shift - 1.0).abs() <= 1e-6
        && (scale - 1.0).abs() <= 1e-6
        && (uniform - 1.0).abs() <= 1e-9
        && (onehot - 10.0).abs() <= 1e-9;
    Ok((
        pass,
        format!("FID same={same:.1e} shift={shift:.9} scale={scale:.9}; IS uniform={uniform:.12} one-hot={onehot:.12}"),
    ))
}

fn representation() -> Result<(bool, String), String> {
    // Default config: 10-class synthetic set at SNR 4, temporal-only encoder
    // with 2 layers, 2 heads, d = 128, t = 32.
    let start = Instant::now();
    let cfg = config(&[])?;
    let e = &cfg.encoder;
    let setting = (e.n_layers_temporal, e.n_heads_temporal, e.n_layers_spatial, e.latent_dim, e.window_len, cfg.data.synth.snr, cfg.data.synth.num_classes);
    if setting != (2, 2, 0, 128, 32, 4.0, 10) {
        return Err(format!("default config drifted: {setting:?}"));
    }
    let ds = pipeline::build_dataset(&cfg).map_err(err)?;
    let (enc, _) = pipeline::train_encoder::<f32>(&cfg, &ds).map_err(err)?;
    let out = pipeline::evaluate(&cfg, &ds, &enc, &cfg.fingerprint()).map_err(err)?;
    let km = metric(&out.reports, "kmeans_accuracy")?;
    let cls = metric(&out.reports, "classification_accuracy")?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        km >= 0.95 && cls >= 0.95 && secs < 900.0,
        format!("k-means {km:.3} (>= 0.95), classification {cls:.3} (>= 0.95), {secs:.0}s (< 900s)"),
    ))
}

fn zero_shot() -> Result<(bool, String), String> {
    let start = Instant::now();
    let cfg = config(&["zero_shot.held_out=[7,8,9]"])?;
    let ds = pipeline::build_dataset(&cfg).map_err(err)?;
    let out = pipeline::zero_shot::<f32>(&cfg, &ds).map_err(err)?;
    let (km, kn) = (out.kmeans.value, out.knn.value);
    let secs = start.elapsed().as_secs_f64();
    Ok((
        km >= 0.8 && kn >= 0.9 && secs < 900.0,
        format!("7 seen / 3 held out: k-means {km:.3} (>= 0.80), KNN {kn:.3} (>= 0.90), {secs:.0}s (< 900s)"),
    ))
}

/// The encoder flattens each window into its projection, so longer windows
/// carry more parameters. Every length therefore sees the same data: 8
/// windows per 512-sample recording, strided to fit.
const SWEEP: &str = r#"
[data]
split = [0.7, 0.0, 0.3]

[data.synth]
length = 512
per_class = 30

[window]
per_recording = 8

[training]
epochs = 12

[ablate]
workers = 1

[ablate.grid]
"encoder.window_len" = [32, 64, 96, 128, 160, 192, 224, 256]
"#;

fn sequence_length_sweep() -> Result<(bool, String), String> {
    let base: Table = toml::from_str(SWEEP).map_err(err)?;
    let cfg = RunConfig::resolve(&base, &[]).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let cells = ablate::run(&base, &Vec::new(), &cfg, dir.path()).map_err(err)?;
    let mut rows = Vec::new();
    for c in &cells {
        let CellStatus::Ok(reports) = &c.status else {
            return Ok((false, format!("cell {} did not run: {:?}", c.index, c.status)));
        };
        let t = c.config.as_ref().map(|c| c.encoder.window_len).unwrap_or(0);
        rows.push((t, metric(reports, "kmeans_accuracy")?, metric(reports, "classification_accuracy")?));
    }
    let spread = |f: fn(&(usize, f64, f64)) -> f64| {
        let v: Vec<f64> = rows.iter().map(f).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let (km, cls) = (spread(|r| r.1), spread(|r| r.2));
    let table: Vec<String> = rows.iter().map(|(t, k, c)| format!("{t}:{k:.3}/{c:.3}")).collect();
    Ok((
        rows.len() == 8 && km <= 0.05 && cls <= 0.05,
        format!("spread k-means {km:.3}, classification {cls:.3} (<= 0.05); t:kmeans/cls {}", table.join(" ")),
    ))
}

/// Two-class toy task on the 128-channel preset with paired latents.
const GENERATION: [&str; 10] = [
    "data.preset=\"cvpr40-like\"",
    "data.synth.num_classes=2",
    "data.synth.per_class=60",
    "data.synth.with_latents=true",
    "data.split=[0.5,0.0,0.5]",
    "training.epochs=3",
    "training.classes_per_batch=2",
    "training.samples_per_class=16",
    "diffusion.schedule.steps=50",
    "diffusion.train.steps=4000",
];

/// Temporal module only: 2 layers, 4 heads, t = 32.
const SIMPLE: [&str; 3] = ["encoder.n_layers_temporal=2", "encoder.n_heads_temporal=4", "encoder.n_layers_spatial=0"];

/// Temporal and spatial modules: 6 layers and 8 heads each, t = 64.
const COMPLEX: [&str; 5] = [
    "encoder.window_len=64",
    "encoder.n_layers_temporal=6",
    "encoder.n_heads_temporal=8",
    "encoder.n_layers_spatial=6",
    "encoder.n_heads_spatial=8",
];

fn generation_run(extra: &[&str]) -> Result<Vec<MetricReport>, String> {
    let overrides: Vec<&str> = GENERATION.iter().chain(extra).copied().collect();
    let cfg = config(&overrides)?;
    let ds = pipeline::build_dataset(&cfg).map_err(err)?;
    let (enc, _) = pipeline::train_encoder::<f32>(&cfg, &ds).map_err(err)?;
    let trained = pipeline::train_diffusion(&cfg, &ds, &enc).map_err(err)?;
    let out = pipeline::generate(&cfg, &ds, &enc, &trained.denoiser, &cfg.fingerprint()).map_err(err)?;
    Ok(out.reports)
}

fn conditional_generation() -> Result<(bool, String), String> {
    let simple = generation_run(&SIMPLE)?;
    let shuffled: Vec<&str> = SIMPLE.iter().copied().chain(["diffusion.shuffle_conditioning=true"]).collect();
    let shuffled = generation_run(&shuffled)?;
    let complex = generation_run(&COMPLEX)?;
    let matched = metric(&simple, "class_match")?;
    let control = metric(&shuffled, "class_match")?;
    let (fid_c, fid_s) = (metric(&complex, "fid")?, metric(&simple, "fid")?);
    let gap = matched - control;
    Ok((
        matched >= 0.9 && gap >= 0.4 && fid_c <= fid_s,
        format!(
            "class match {matched:.3} (>= 0.90), shuffled control {control:.3} (gap {gap:.3} >= 0.40), FID complex {fid_c:.3} <= simple {fid_s:.3}"
        ),
    ))
}

const TINY: [&str; 12] = [
    "data.synth.num_classes=3",
    "data.synth.per_class=12",
    "data.synth.with_latents=true",
    "encoder.latent_dim=16",
    "training.epochs=2",
    "eval.head_epochs=3",
    "zero_shot.held_out=[2]",
    "diffusion.schedule.steps=40",
    "diffusion.train.steps=10",
    "diffusion.sample_steps=10",
    "diffusion.denoiser.widths=[8,16]",
    "diffusion.oracle_epochs=3",
];

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eeg2img"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    let status = cmd.output().map_err(err)?;
    if !status.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn csv_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            csv_files(&p, out)?;
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
    Ok(())
}

/// Runs every subcommand into `root` and returns every CSV written, relative
/// to `root`, with its bytes.
fn run_all(root: &Path, sweep: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let p = |s: &str| root.join(s);
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    run_cli(&p("data"), &["gen-data"])?;
    run_cli(&p("encoder"), &["train-encoder"])?;
    let enc = s(p("encoder/encoder.bgk"));
    run_cli(&p("eval"), &["eval", "--encoder", &enc])?;
    run_cli(&p("zero-shot"), &["zero-shot"])?;
    run_cli(&p("diffusion"), &["train-diffusion", "--encoder", &enc])?;
    let den = s(p("diffusion/denoiser.bgk"));
    run_cli(&p("generate"), &["generate", "--encoder", &enc, "--denoiser", &den])?;
    run_cli(&p("ablate"), &["ablate", "--config", &s(sweep.to_path_buf())])?;
    run_cli(&p("gradcheck"), &["gradcheck", "--op-trials", "2", "--model-trials", "1"])?;
    let mut files = Vec::new();
    csv_files(root, &mut files).map_err(err)?;
    files.sort();
    files
        .into_iter()
        .map(|f| Ok((f.strip_prefix(root).map_err(err)?.to_path_buf(), std::fs::read(&f).map_err(err)?)))
        .collect()
}

fn cli_determinism() -> Result<(bool, String), String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let sweep = tmp.path().join("sweep.toml");
    std::fs::write(
        &sweep,
        "[ablate]\nworkers = 2\n[ablate.grid]\n\"encoder.n_heads_temporal\" = [1, 2, 3]\n\"encoder.n_layers_temporal\" = [1]\n",
    )
    .map_err(err)?;
    let a = run_all(&tmp.path().join("a"), &sweep)?;
    let b = run_all(&tmp.path().join("b"), &sweep)?;
    let names: Vec<_> = a.iter().map(|(p, _)| p.clone()).collect();
    if names != b.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>() {
        return Ok((false, "runs wrote different CSV files".into()));
    }
    let differing: Vec<String> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
    Ok((
        differing.is_empty() && names.len() >= 8,
        if differing.is_empty() {
            format!("8 subcommands run twice, {} CSV files byte-identical", names.len())
        } else {
            format!("differing: {differing:?}")
        },
    ))
}
