use serde::{Deserialize, Serialize};

use crate::container::BlobFile;
use crate::error::{bail, Error, Result};
use crate::nn::{attention_with_weights, LayerNorm, Linear};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensorcore::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Latent grid `[height, width, channels]`.
    pub latent_dims: [usize; 3],
    /// Side of the square patches that form the fine-resolution tokens.
    pub patch: usize,
    /// Token widths at the fine and coarse resolution; each is also the
    /// attention width of that resolution's cross-attention block.
    pub widths: [usize; 2],
    pub heads: usize,
    /// Width of the conditioning tokens.
    pub token_dim: usize,
    pub ff_multiplier: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dims: [8, 8, 4],
            patch: 2,
            widths: [64, 128],
            heads: 4,
            token_dim: 128,
            ff_multiplier: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w, ch] = self.latent_dims;
        if h == 0 || w == 0 || ch == 0 || self.patch == 0 || self.token_dim == 0 || self.ff_multiplier == 0 {
            bail!(Config, "denoiser dimensions must be positive");
        }
        if h % (2 * self.patch) != 0 || w % (2 * self.patch) != 0 {
            bail!(Config, "latent {h}x{w} must be divisible by twice the patch size {}", self.patch);
        }
        for &wd in &self.widths {
            if wd == 0 || self.heads == 0 || wd % self.heads != 0 {
                bail!(Config, "{} heads do not divide width {wd}", self.heads);
            }
        }
        Ok(())
    }

    pub fn latent_len(&self) -> usize {
        self.latent_dims.iter().product()
    }

    fn fine_grid(&self) -> (usize, usize) {
        (self.latent_dims[0] / self.patch, self.latent_dims[1] / self.patch)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.latent_dims[2]
    }
}

/// `softmax(Q K^T / sqrt(d_head)) V` with `Q = phi W_q`, `K = S W_k`,
/// `V = S W_v`. `phi: [B, N, h]`, `s: [B, n, d]`, `w_q: [h, h]`,
/// `w_k, w_v: [d, h]` → `[B, N, h]`, plus the attention weights.
pub fn cross_attention<S: Scalar>(g: &mut Graph<S>, phi: Var, s: Var, w_q: Var, w_k: Var, w_v: Var, heads: usize) -> Result<(Var, Var)> {
    let d = g.shape(w_k)[0];
    let (sp, ss) = (g.shape(phi).to_vec(), g.shape(s).to_vec());
    if ss.len() != 3 || ss[2] != d {
        bail!(Config, "conditioning tokens {:?} do not match token dim {d}", ss);
    }
    if sp.len() != 3 || sp[0] != ss[0] || g.shape(w_q) != [sp[2], sp[2]] || g.shape(w_v) != g.shape(w_k) || g.shape(w_k)[1] != sp[2] {
        bail!(Config, "cross-attention shapes phi {:?}, W_q {:?}, W_k {:?}", sp, g.shape(w_q), g.shape(w_k));
    }
    let q = g.linear(phi, w_q, None)?;
    let k = g.linear(s, w_k, None)?;
    let v = g.linear(s, w_v, None)?;
    attention_with_weights(g, q, k, v, heads)
}

/// Sinusoidal embedding of integer timesteps, `[t.len(), dim]`.
pub fn timestep_embedding<S: Scalar>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len().max(1), dim], |k| {
        let (row, j) = (k / dim, k % dim);
        let i = j % half.max(1);
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let x = t.get(row).copied().unwrap_or(0) as f64 * freq;
        S::of(if j < half { x.sin() } else if j < 2 * half { x.cos() } else { 0.0 })
    })
}

#[derive(Clone, Debug)]
struct Level {
    pos: ParamId,
    time: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    attn_norm: LayerNorm,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

impl Level {
    fn new<S: Scalar>(p: &mut ParamStore<S>, name: &str, tokens: usize, width: usize, cfg: &DenoiserConfig, rng: &mut RngStream) -> Self {
        let d = cfg.token_dim;
        Self {
            pos: p.zeros(format!("{name}.pos"), &[tokens, width]),
            time: Linear::new(p, &format!("{name}.time"), cfg.widths[0], width, rng),
            ff_norm: LayerNorm::new(p, &format!("{name}.ff_norm"), width),
            ff_in: Linear::new(p, &format!("{name}.ff_in"), width, cfg.ff_multiplier * width, rng),
            ff_out: Linear::new(p, &format!("{name}.ff_out"), cfg.ff_multiplier * width, width, rng),
            attn_norm: LayerNorm::new(p, &format!("{name}.attn_norm"), width),
            w_q: p.fan_in_uniform(format!("{name}.w_q"), &[width, width], rng),
            w_k: p.fan_in_uniform(format!("{name}.w_k"), &[d, width], rng),
            w_v: p.fan_in_uniform(format!("{name}.w_v"), &[d, width], rng),
        }
    }

    /// Adds position and time embeddings, then a feed-forward and a
    /// cross-attention residual branch.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, temb: Var, cond: Var, heads: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n, w) = (s[0], s[1], s[2]);
        let x = g.add_bcast(x, p[self.pos])?;
        let te = self.time.forward(g, p, temb)?;
        let expand: Vec<usize> = (0..b * n * w).map(|k| (k / (n * w)) * w + k % w).collect();
        let te = g.gather(te, &expand, &[b, n, w])?;
        let x = g.add(x, te)?;
        let h = self.ff_norm.forward(g, p, x)?;
        let h = self.ff_in.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.ff_out.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let h = self.attn_norm.forward(g, p, x)?;
        let (a, _) = cross_attention(g, h, cond, p[self.w_q], p[self.w_k], p[self.w_v], heads)?;
        g.add(x, a)
    }
}

/// Noise predictor on latent patches at two resolutions: fine tokens are
/// `patch × patch` blocks, coarse tokens merge 2×2 fine tokens. Each
/// resolution has one cross-attention block reading the conditioning tokens.
#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    cfg: DenoiserConfig,
    params: ParamStore<S>,
    embed: Linear,
    cond_norm: LayerNorm,
    fine: Level,
    down: Linear,
    coarse: Level,
    up: Linear,
    out_norm: LayerNorm,
    out: Linear,
    patchify: Vec<usize>,
    merge: Vec<usize>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: DenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2] = cfg.widths;
        let (gh, gw) = cfg.fine_grid();
        let (n1, n2) = (gh * gw, gh * gw / 4);
        let mut p = ParamStore::new();
        let embed = Linear::new(&mut p, "embed", cfg.patch_len(), w1, rng);
        let cond_norm = LayerNorm::new(&mut p, "cond_norm", cfg.token_dim);
        let fine = Level::new(&mut p, "fine", n1, w1, &cfg, rng);
        let down = Linear::new(&mut p, "down", 4 * w1, w2, rng);
        let coarse = Level::new(&mut p, "coarse", n2, w2, &cfg, rng);
        let up = Linear::new(&mut p, "up", w2, 4 * w1, rng);
        let out_norm = LayerNorm::new(&mut p, "out_norm", w1);
        let out = Linear::zeroed(&mut p, "out", w1, cfg.patch_len());
        let patchify = patch_map(&cfg);
        let merge = merge_map(gh, gw, w1);
        Ok(Self {
            cfg,
            params: p,
            embed,
            cond_norm,
            fine,
            down,
            coarse,
            up,
            out_norm,
            out,
            patchify,
            merge,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Predicted noise `[B, L]` for `z_t: [B, L]` at timesteps `t` (one per
    /// row) conditioned on `cond: [B, n, d]`.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, z_t: Var, t: &[usize], cond: Var) -> Result<Var> {
        let l = self.cfg.latent_len();
        let [w1, _] = self.cfg.widths;
        let b = match g.shape(z_t) {
            [b, ll] if *ll == l => *b,
            s => bail!(Dimension, "denoiser expects [B, {l}], got {:?}", s),
        };
        if t.len() != b || g.shape(cond)[0] != b {
            bail!(Dimension, "batch of {b} latents with {} timesteps and {} conditionings", t.len(), g.shape(cond)[0]);
        }
        let (gh, gw) = self.cfg.fine_grid();
        let (n1, n2, pl) = (gh * gw, gh * gw / 4, self.cfg.patch_len());
        let cond = self.cond_norm.forward(g, p, cond)?;
        let temb = g.constant(timestep_embedding(t, w1))?;

        let idx = batch_map(&self.patchify, b, l);
        let x = g.gather(z_t, &idx, &[b, n1, pl])?;
        let x = self.embed.forward(g, p, x)?;
        let x1 = self.fine.forward(g, p, x, temb, cond, self.cfg.heads)?;

        let idx = batch_map(&self.merge, b, n1 * w1);
        let x = g.gather(x1, &idx, &[b, n2, 4 * w1])?;
        let x = self.down.forward(g, p, x)?;
        let x2 = self.coarse.forward(g, p, x, temb, cond, self.cfg.heads)?;

        let u = self.up.forward(g, p, x2)?;
        let idx = batch_map(&invert(&self.merge), b, n2 * 4 * w1);
        let u = g.gather(u, &idx, &[b, n1, w1])?;
        let x = g.add(x1, u)?;
        let x = self.out_norm.forward(g, p, x)?;
        let x = self.out.forward(g, p, x)?;
        let idx = batch_map(&invert(&self.patchify), b, n1 * pl);
        g.gather(x, &idx, &[b, l])
    }

    /// Eval-mode prediction on plain tensors.
    pub fn predict(&self, z_t: &Tensor<S>, t: &[usize], cond: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::eval();
        let p = g.bind(&self.params, false)?;
        let z = g.constant(z_t.clone())?;
        let c = g.constant(cond.clone())?;
        let e = self.forward(&mut g, &p, z, t, c)?;
        Ok(g.value(e).clone())
    }

    pub fn to_blob_file(&self) -> Result<BlobFile> {
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut f = BlobFile::new(DENOISER_KIND, cfg);
        for (name, t) in self.params.named() {
            f.push(name, t);
        }
        Ok(f)
    }

    pub fn from_blob_file(f: &BlobFile) -> Result<Self> {
        f.expect_kind(DENOISER_KIND)?;
        let cfg: DenoiserConfig = toml::from_str(&f.config).map_err(|e| Error::Data(format!("denoiser config block: {e}")))?;
        let mut den = Self::new(cfg, &mut RngStream::new(0))?;
        let blobs: Vec<(String, Tensor<S>)> = f.blobs.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        den.params.load_named(&blobs)?;
        Ok(den)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_blob_file()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_blob_file(&BlobFile::load(path)?)
    }
}

/// For each `(token, position)` of the patch layout, the flat latent index
/// (`height × width × channels`, row-major).
fn patch_map(cfg: &DenoiserConfig) -> Vec<usize> {
    let [_, w, ch] = cfg.latent_dims;
    let p = cfg.patch;
    let (gh, gw) = cfg.fine_grid();
    let mut out = Vec::with_capacity(cfg.latent_len());
    for ty in 0..gh {
        for tx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    for c in 0..ch {
                        out.push(((ty * p + dy) * w + tx * p + dx) * ch + c);
                    }
                }
            }
        }
    }
    out
}

/// Fine `[gh*gw, w1]` → coarse `[gh*gw/4, 4*w1]`, concatenating each 2×2
/// block of fine tokens.
fn merge_map(gh: usize, gw: usize, w1: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(gh * gw * w1);
    for cy in 0..gh / 2 {
        for cx in 0..gw / 2 {
            for sy in 0..2 {
                for sx in 0..2 {
                    let fine = (2 * cy + sy) * gw + 2 * cx + sx;
                    out.extend((0..w1).map(|f| fine * w1 + f));
                }
            }
        }
    }
    out
}

fn invert(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &m) in map.iter().enumerate() {
        inv[m] = i;
    }
    inv
}

/// Repeats a per-item index map over a batch whose items are `stride` apart.
fn batch_map(map: &[usize], b: usize, stride: usize) -> Vec<usize> {
    (0..b).flat_map(|i| map.iter().map(move |&m| i * stride + m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_and_merge_maps_are_permutations() {
        let cfg = DenoiserConfig::default();
        let mut m = patch_map(&cfg);
        m.sort_unstable();
        assert_eq!(m, (0..cfg.latent_len()).collect::<Vec<_>>());
        let mut m = merge_map(4, 4, 3);
        m.sort_unstable();
        assert_eq!(m, (0..48).collect::<Vec<_>>());
        let p = patch_map(&cfg);
        assert_eq!(invert(&invert(&p)), p);
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::default();
        c.latent_dims = [6, 8, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn initial_prediction_is_zero_and_shaped() {
        let cfg = DenoiserConfig {
            token_dim: 8,
            widths: [8, 16],
            heads: 2,
            ..Default::default()
        };
        let den = Denoiser::<f64>::new(cfg, &mut RngStream::new(1)).unwrap();
        let z = Tensor::from_fn(&[3, 256], |i| (i as f64 * 0.1).sin());
        let c = Tensor::from_fn(&[3, 5, 8], |i| (i as f64 * 0.3).cos());
        let e = den.predict(&z, &[1, 2, 3], &c).unwrap();
        assert_eq!(e.shape(), &[3, 256]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_dim_mismatch_is_config_error() {
        let cfg = DenoiserConfig {
            token_dim: 8,
            widths: [8, 16],
            heads: 2,
            ..Default::default()
        };
        let den = Denoiser::<f64>::new(cfg, &mut RngStream::new(1)).unwrap();
        let mut g = Graph::eval();
        let p = g.bind(den.params(), false).unwrap();
        let phi = g.constant(Tensor::full(&[1, 4, 8], 0.5)).unwrap();
        let s = g.constant(Tensor::full(&[1, 3, 7], 0.5)).unwrap();
        let r = cross_attention(&mut g, phi, s, p[den.fine.w_q], p[den.fine.w_k], p[den.fine.w_v], 2);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
