//! Finite-difference verification of every differentiable path.
//!
//! Each case wraps an op (or a whole model loss) in a scalar function
//! `sum(w ⊙ op(x))` with a fixed random weight `w ~ N(0, 1/n)`, then compares autodiff
//! against central differences with [`grad_check_many`]. Shapes are drawn at
//! random per trial. Model cases perturb every parameter away from its
//! initialization so zero-initialized layers still carry gradient.

use std::time::Instant;

use crate::clddm::{cross_attention, ldm_loss, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::Result;
use crate::nn::attention;
use crate::rng::RngStream;
use crate::stencoder::{EncoderConfig, StEncoder};
use crate::tensorcore::{grad_check_report, Bound, GradCheckReport, Stencil, Graph, Mode, Tensor, Var};
use crate::triplet::{batch_triplet_loss, Triplet};

/// Finite-difference step, paired with the fourth-order stencil.
pub const STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    /// Worst element over all trials, with the trial it came from.
    pub worst: GradCheckReport,
    pub worst_trial: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Random trials per elementary op.
    pub op_trials: usize,
    /// Random trials per model path.
    pub model_trials: usize,
    /// Upper bound on each randomized dimension.
    pub max_dim: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            op_trials: 100,
            model_trials: 6,
            max_dim: 16,
            seed: 0,
        }
    }
}

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// `sum(w ⊙ y)` for a weight tensor held as a graph constant.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone().reshape(g.shape(y))?)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Builder = fn(&mut RngStream, usize) -> Result<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)>;

fn projected(
    inputs: Vec<Tensor<f64>>,
    out_len: usize,
    rng: &mut RngStream,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>) {
    let scale = 1.0 / (out_len as f64).sqrt();
    let w = randn(&[out_len], rng).map(|v| v * scale);
    (
        inputs,
        Box::new(move |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, &w)
        }),
    )
}

fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |r, n| {
            let (m, k, p) = (dim(r, 1, n), dim(r, 1, n), dim(r, 1, n));
            let ins = vec![randn(&[m, k], r), randn(&[k, p], r)];
            Ok(projected(ins, m * p, r, |g, v| g.matmul(v[0], v[1])))
        }),
        ("bmm", |r, n| {
            let (b, m, k, p) = (dim(r, 1, 3), dim(r, 1, n), dim(r, 1, n), dim(r, 1, n));
            let ins = vec![randn(&[b, m, k], r), randn(&[b, k, p], r)];
            Ok(projected(ins, b * m * p, r, |g, v| g.bmm(v[0], v[1])))
        }),
        ("add", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let ins = vec![randn(&s, r), randn(&s, r)];
            Ok(projected(ins, s[0] * s[1], r, |g, v| g.add(v[0], v[1])))
        }),
        ("sub", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let ins = vec![randn(&s, r), randn(&s, r)];
            Ok(projected(ins, s[0] * s[1], r, |g, v| g.sub(v[0], v[1])))
        }),
        ("mul", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let ins = vec![randn(&s, r), randn(&s, r)];
            Ok(projected(ins, s[0] * s[1], r, |g, v| g.mul(v[0], v[1])))
        }),
        ("add_bcast", |r, n| {
            let (a, b) = (dim(r, 1, n), dim(r, 1, n));
            let ins = vec![randn(&[a, b], r), randn(&[b], r)];
            Ok(projected(ins, a * b, r, |g, v| g.add_bcast(v[0], v[1])))
        }),
        ("scale", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let c = r.normal();
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, move |g, v| g.scale(v[0], c)))
        }),
        ("permute", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, 4), dim(r, 1, n)];
            let mut perm = [0usize, 1, 2];
            r.shuffle(&mut perm);
            Ok(projected(vec![randn(&s, r)], s.iter().product(), r, move |g, v| g.permute(v[0], &perm)))
        }),
        ("reshape", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, move |g, v| g.reshape(v[0], &[s[1], s[0]])))
        }),
        ("softmax", |r, n| {
            let s = [dim(r, 1, 4), dim(r, 1, n), dim(r, 1, n)];
            let axis = r.below(3);
            Ok(projected(vec![randn(&s, r)], s.iter().product(), r, move |g, v| g.softmax(v[0], axis)))
        }),
        ("log_softmax", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, |g, v| g.log_softmax(v[0])))
        }),
        ("layer_norm", |r, n| {
            let (a, b) = (dim(r, 1, n), dim(r, 2, n));
            let ins = vec![randn(&[a, b], r), randn(&[b], r), randn(&[b], r)];
            Ok(projected(ins, a * b, r, |g, v| g.layer_norm(v[0], v[1], v[2])))
        }),
        ("gelu", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, |g, v| g.gelu(v[0])))
        }),
        ("relu", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            // Keep every input clear of the kink at 0 by more than the step.
            let x = randn(&s, r).map(|v| v + 0.01_f64.copysign(v));
            Ok(projected(vec![x], s[0] * s[1], r, |g, v| g.relu(v[0])))
        }),
        ("dropout", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let seed = r.below(1 << 30) as u64;
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, move |g, v| g.dropout(v[0], 0.3, &mut RngStream::new(seed))))
        }),
        ("sum", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], 1, r, |g, v| g.sum(v[0])))
        }),
        ("mean", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], 1, r, |g, v| g.mean(v[0])))
        }),
        ("square", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, |g, v| g.square(v[0])))
        }),
        ("gather", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            let len = s[0] * s[1];
            let k = dim(r, 1, 2 * n);
            let idx: Vec<usize> = (0..k).map(|_| r.below(len)).collect();
            Ok(projected(vec![randn(&s, r)], k, r, move |g, v| g.gather(v[0], &idx, &[k])))
        }),
        ("l2_normalize_rows", |r, n| {
            let s = [dim(r, 1, n), dim(r, 1, n)];
            Ok(projected(vec![randn(&s, r)], s[0] * s[1], r, |g, v| g.l2_normalize_rows(v[0])))
        }),
        ("linear", |r, n| {
            let (b, t, i, o) = (dim(r, 1, 3), dim(r, 1, n), dim(r, 1, n), dim(r, 1, n));
            let ins = vec![randn(&[b, t, i], r), randn(&[i, o], r), randn(&[o], r)];
            Ok(projected(ins, b * t * o, r, |g, v| g.linear(v[0], v[1], Some(v[2]))))
        }),
        ("attention", |r, n| {
            let heads = dim(r, 1, 4);
            let h = heads * dim(r, 1, (n / heads).max(1));
            let (b, nq, nk) = (dim(r, 1, 2), dim(r, 1, n), dim(r, 1, n));
            let ins = vec![randn(&[b, nq, h], r), randn(&[b, nk, h], r), randn(&[b, nk, h], r)];
            Ok(projected(ins, b * nq * h, r, move |g, v| attention(g, v[0], v[1], v[2], heads)))
        }),
        ("cross_attention", |r, n| {
            let heads = dim(r, 1, 4);
            let w = heads * dim(r, 1, (n / heads).max(1));
            let (b, np, nt, d) = (dim(r, 1, 2), dim(r, 1, n), dim(r, 1, 8), dim(r, 1, n));
            let fan_in = |t: Tensor<f64>, n: usize| t.map(|v| v / (n as f64).sqrt());
            let ins = vec![
                randn(&[b, np, w], r),
                randn(&[b, nt, d], r),
                fan_in(randn(&[w, w], r), w),
                fan_in(randn(&[d, w], r), d),
                fan_in(randn(&[d, w], r), d),
            ];
            Ok(projected(ins, b * np * w, r, move |g, v| {
                Ok(cross_attention(g, v[0], v[1], v[2], v[3], v[4], heads)?.0)
            }))
        }),
    ]
}

/// Parameter tensors perturbed by N(0, 0.3²).
fn perturbed(params: impl Iterator<Item = Tensor<f64>>, rng: &mut RngStream) -> Vec<Tensor<f64>> {
    params
        .map(|t| {
            let mut t = t;
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
            t
        })
        .collect()
}

fn encoder_case(rng: &mut RngStream, trial: usize) -> Result<GradCheckReport> {
    let (n_lt, n_ls) = [(1, 0), (0, 1), (1, 1)][trial % 3];
    let cfg = EncoderConfig {
        n_layers_temporal: n_lt,
        n_heads_temporal: 2,
        n_layers_spatial: n_ls,
        n_heads_spatial: 2,
        latent_dim: 6,
        window_len: 6,
        channels: 4,
        dropout_rate: 0.1,
        ff_multiplier: 2,
    };
    let enc = StEncoder::<f64>::new(cfg, &mut rng.split("init"))?;
    // Two classes of three; class 1 is shifted so some triplets always exist.
    let x = Tensor::from_fn(&[6, 6, 4], |i| rng.normal() + if i >= 72 { 1.5 } else { 0.0 });
    let labels = [0u32, 0, 0, 1, 1, 1];
    let mut inputs = vec![x.clone()];
    inputs.extend(perturbed(enc.params().tensors().cloned(), rng));
    let triplets = all_triplets(&labels);
    let drop_seed = rng.below(1 << 30) as u64;
    grad_check_report(&inputs, STEP, Stencil::Central4, Mode::Train, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let z = enc.forward(g, &p, v[0], &mut RngStream::new(drop_seed))?;
        batch_triplet_loss(g, z, &triplets, 0.5)
    })
}

fn all_triplets(labels: &[u32]) -> Vec<Triplet> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if a != p && labels[a] == labels[p] && labels[a] != labels[q] {
                    out.push(Triplet { anchor: a, positive: p, negative: q });
                }
            }
        }
    }
    out
}

fn denoiser_case(rng: &mut RngStream, _trial: usize) -> Result<GradCheckReport> {
    let cfg = DenoiserConfig {
        latent_dims: [4, 4, 2],
        patch: 2,
        widths: [4, 8],
        heads: 2,
        token_dim: 6,
        ff_multiplier: 2,
    };
    let den = Denoiser::<f64>::new(cfg, &mut rng.split("init"))?;
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02)?;
    let z0 = randn(&[2, 32], rng);
    let mut inputs = vec![randn(&[2, 3, 6], rng)];
    inputs.extend(perturbed(den.params().tensors().cloned(), rng));
    let seed = rng.below(1 << 30) as u64;
    grad_check_report(&inputs, STEP, Stencil::Central4, Mode::Train, |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        ldm_loss(g, &p, &den, &z0, v[0], &schedule, &mut RngStream::new(seed))
    })
}

fn collect(name: &'static str, trials: usize, mut trial: impl FnMut(usize) -> Result<GradCheckReport>) -> Result<CaseResult> {
    let start = Instant::now();
    let mut worst = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut worst_trial = 0;
    for i in 0..trials {
        let r = trial(i)?;
        if r.max_rel_err > worst.max_rel_err {
            worst = r;
            worst_trial = i;
        }
    }
    Ok(CaseResult {
        name,
        trials,
        max_rel_err: worst.max_rel_err,
        worst,
        worst_trial,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every case and reports the worst relative error of each.
pub fn run(cfg: &SuiteConfig) -> Result<Vec<CaseResult>> {
    let root = RngStream::new(cfg.seed);
    let mut out = Vec::new();
    for (name, build) in op_cases() {
        out.push(collect(name, cfg.op_trials, |trial| {
            let mut r = root.split(name).split_index("trial", trial as u64);
            let (inputs, f) = build(&mut r, cfg.max_dim)?;
            grad_check_report(&inputs, STEP, Stencil::Central4, Mode::Train, |g, v| f(g, v))
        })?);
    }
    type ModelCase = fn(&mut RngStream, usize) -> Result<GradCheckReport>;
    let models: [(&'static str, ModelCase); 2] = [("encoder+triplet_loss", encoder_case), ("denoiser+ldm_loss", denoiser_case)];
    for (name, case) in models {
        out.push(collect(name, cfg.model_trials, |trial| {
            let mut r = root.split(name).split_index("trial", trial as u64);
            case(&mut r, trial)
        })?);
    }
    Ok(out)
}
