//! Spatio-temporal transformer encoder: a self-attention stack over time, a
//! second one over channels after transposition, then a fully connected
//! projection to a `d`-dimensional latent. Either stack may be disabled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::BlobFile;
use crate::error::{bail, Error, Result};
use crate::nn::{attention, LayerNorm, Linear};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensorcore::{Adam, AdamConfig, Bound, Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub const ENCODER_KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers_temporal: usize,
    pub n_heads_temporal: usize,
    pub n_layers_spatial: usize,
    pub n_heads_spatial: usize,
    pub latent_dim: usize,
    pub window_len: usize,
    pub channels: usize,
    pub dropout_rate: f64,
    pub ff_multiplier: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers_temporal: 2,
            n_heads_temporal: 2,
            n_layers_spatial: 0,
            n_heads_spatial: 1,
            latent_dim: 128,
            window_len: 32,
            channels: 14,
            dropout_rate: 0.1,
            ff_multiplier: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers_temporal + self.n_layers_spatial == 0 {
            bail!(Config, "at least one of the temporal and spatial modules must be enabled");
        }
        // A disabled module may list 0 heads, as in the ablation tables.
        if (self.n_layers_temporal > 0 && self.n_heads_temporal == 0) || (self.n_layers_spatial > 0 && self.n_heads_spatial == 0) {
            bail!(Config, "an enabled module needs at least 1 head");
        }
        if self.latent_dim == 0 || self.window_len == 0 || self.channels == 0 || self.ff_multiplier == 0 {
            bail!(Config, "latent_dim, window_len, channels and ff_multiplier must be positive");
        }
        if self.n_layers_temporal > 0 && self.channels % self.n_heads_temporal != 0 {
            bail!(
                Config,
                "temporal heads ({}) must divide the channel count ({})",
                self.n_heads_temporal,
                self.channels
            );
        }
        if self.n_layers_spatial > 0 && self.window_len % self.n_heads_spatial != 0 {
            bail!(
                Config,
                "spatial heads ({}) must divide the window length ({})",
                self.n_heads_spatial,
                self.window_len
            );
        }
        if self.n_layers_temporal > 0 || self.n_layers_spatial > 0 {
            let width = if self.n_layers_temporal > 0 { self.channels } else { self.window_len };
            if width < 2 || (self.n_layers_spatial > 0 && self.window_len < 2) {
                bail!(Config, "layer norm needs model widths of at least 2");
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout_rate {} outside [0,1)", self.dropout_rate);
        }
        Ok(())
    }

    pub fn uses_temporal(&self) -> bool {
        self.n_layers_temporal > 0
    }

    pub fn uses_spatial(&self) -> bool {
        self.n_layers_spatial > 0
    }

    /// "Temporal", "Spatial" or "Both".
    pub fn module_set(&self) -> &'static str {
        match (self.uses_temporal(), self.uses_spatial()) {
            (true, false) => "Temporal",
            (false, true) => "Spatial",
            _ => "Both",
        }
    }
}

/// The `1 × d` latent of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<S> {
    pub vector: Vec<S>,
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer stack over a `[B, seq, width]` input.
#[derive(Clone, Debug)]
struct Stack {
    seq: usize,
    width: usize,
    heads: usize,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
}

impl Stack {
    fn new<S: Scalar>(
        p: &mut ParamStore<S>,
        name: &str,
        seq: usize,
        width: usize,
        heads: usize,
        layers: usize,
        ff_mult: usize,
        rng: &mut RngStream,
    ) -> Self {
        let pos = p.zeros(format!("{name}.pos"), &[seq, width]);
        let blocks = (0..layers)
            .map(|l| {
                let n = format!("{name}.{l}");
                Block {
                    ln_attn: LayerNorm::new(p, &format!("{n}.ln_attn"), width),
                    q: Linear::new(p, &format!("{n}.q"), width, width, rng),
                    k: Linear::new(p, &format!("{n}.k"), width, width, rng),
                    v: Linear::new(p, &format!("{n}.v"), width, width, rng),
                    o: Linear::new(p, &format!("{n}.o"), width, width, rng),
                    ln_ff: LayerNorm::new(p, &format!("{n}.ln_ff"), width),
                    ff_in: Linear::new(p, &format!("{n}.ff_in"), width, width * ff_mult, rng),
                    ff_out: Linear::new(p, &format!("{n}.ff_out"), width * ff_mult, width, rng),
                }
            })
            .collect();
        Self {
            seq,
            width,
            heads,
            pos,
            blocks,
            ln_final: LayerNorm::new(p, &format!("{name}.ln_final"), width),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        debug_assert_eq!(&g.shape(x)[1..], &[self.seq, self.width]);
        let mut h = g.add_bcast(x, p[self.pos])?;
        for b in &self.blocks {
            let a = b.ln_attn.forward(g, p, h)?;
            let q = b.q.forward(g, p, a)?;
            let k = b.k.forward(g, p, a)?;
            let v = b.v.forward(g, p, a)?;
            let att = attention(g, q, k, v, self.heads)?;
            let o = b.o.forward(g, p, att)?;
            h = g.add(h, o)?;
            let f = b.ln_ff.forward(g, p, h)?;
            let f = b.ff_in.forward(g, p, f)?;
            let f = g.gelu(f)?;
            let f = b.ff_out.forward(g, p, f)?;
            h = g.add(h, f)?;
        }
        self.ln_final.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct StEncoder<S> {
    cfg: EncoderConfig,
    params: ParamStore<S>,
    temporal: Option<Stack>,
    spatial: Option<Stack>,
    proj_hidden: Linear,
    proj_out: Linear,
}

const EMBED_CHUNK: usize = 64;

impl<S: Scalar> StEncoder<S> {
    pub fn new(cfg: EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (t, c, d) = (cfg.window_len, cfg.channels, cfg.latent_dim);
        let mut p = ParamStore::new();
        let temporal = cfg.uses_temporal().then(|| {
            Stack::new(&mut p, "temporal", t, c, cfg.n_heads_temporal, cfg.n_layers_temporal, cfg.ff_multiplier, rng)
        });
        let spatial = cfg.uses_spatial().then(|| {
            Stack::new(&mut p, "spatial", c, t, cfg.n_heads_spatial, cfg.n_layers_spatial, cfg.ff_multiplier, rng)
        });
        let proj_hidden = Linear::new(&mut p, "proj.hidden", t * c, 2 * d, rng);
        let proj_out = Linear::new(&mut p, "proj.out", 2 * d, d, rng);
        Ok(Self {
            cfg,
            params: p,
            temporal,
            spatial,
            proj_hidden,
            proj_out,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
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

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let (t, c) = (self.cfg.window_len, self.cfg.channels);
        match shape {
            [b, tt, cc] if *tt == t && *cc == c => Ok(*b),
            _ => bail!(Dimension, "encoder expects [B, {t}, {c}], got {:?}", shape),
        }
    }

    /// `x: [B, t, c]` → temporal features `[B, t, c]` (identity when disabled).
    pub fn temporal_graph(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        match &self.temporal {
            Some(s) => s.forward(g, p, x),
            None => Ok(x),
        }
    }

    /// `x_t: [B, t, c]` → spatial features `[B, c, t]`. When the spatial module
    /// is disabled the input is returned untouched, without transposition.
    pub fn spatial_graph(&self, g: &mut Graph<S>, p: &Bound, x_t: Var) -> Result<Var> {
        self.check_input(g.shape(x_t))?;
        match &self.spatial {
            Some(s) => {
                let xs = g.permute(x_t, &[0, 2, 1])?;
                s.forward(g, p, xs)
            }
            None => Ok(x_t),
        }
    }

    /// Full encoder on `x: [B, t, c]`, returning `[B, d]`. Dropout in the
    /// projection is active only when `g` is in training mode.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, x: Var, rng: &mut RngStream) -> Result<Var> {
        let b = self.check_input(g.shape(x))?;
        let xt = self.temporal_graph(g, p, x)?;
        let xs = self.spatial_graph(g, p, xt)?;
        let (t, c) = (self.cfg.window_len, self.cfg.channels);
        let flat = g.reshape(xs, &[b, t * c])?;
        let h = self.proj_hidden.forward(g, p, flat)?;
        let h = g.gelu(h)?;
        let h = g.dropout(h, self.cfg.dropout_rate, rng)?;
        self.proj_out.forward(g, p, h)
    }

    fn batched(&self, x: &Tensor<S>) -> Result<(Tensor<S>, bool)> {
        match x.shape() {
            [_, _] => Ok((x.clone().reshape(&[1, x.shape()[0], x.shape()[1]])?, true)),
            [_, _, _] => Ok((x.clone(), false)),
            s => bail!(Dimension, "expected [t, c] or [B, t, c], got {:?}", s),
        }
    }

    fn finite_input(x: &Tensor<S>) -> Result<()> {
        if !x.all_finite() {
            return Err(Error::Data("non-finite value in encoder input".into()));
        }
        Ok(())
    }

    fn eval_with(&self, x: &Tensor<S>, f: impl Fn(&mut Graph<S>, &Bound, Var) -> Result<Var>) -> Result<Tensor<S>> {
        Self::finite_input(x)?;
        let (xb, single) = self.batched(x)?;
        let mut g = Graph::eval();
        let p = g.bind(&self.params, false)?;
        let xv = g.constant(xb)?;
        let out = f(&mut g, &p, xv)?;
        let v = g.value(out).clone();
        if single {
            let s = v.shape()[1..].to_vec();
            v.reshape(&s)
        } else {
            Ok(v)
        }
    }

    /// Eval-mode temporal module on `[t, c]` or `[B, t, c]`.
    pub fn temporal_forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if !self.cfg.uses_temporal() {
            bail!(Config, "temporal module is disabled (n_layers_temporal = 0)");
        }
        self.eval_with(x, |g, p, v| self.temporal_graph(g, p, v))
    }

    /// Eval-mode spatial module; input is the temporal output `[.., t, c]`,
    /// output `[.., c, t]`. Identity when the module is disabled.
    pub fn spatial_forward(&self, x_t: &Tensor<S>) -> Result<Tensor<S>> {
        self.eval_with(x_t, |g, p, v| self.spatial_graph(g, p, v))
    }

    /// Eval-mode embedding of one `[t, c]` window.
    pub fn encode(&self, x: &Tensor<S>) -> Result<Embedding<S>> {
        if x.rank() != 2 {
            bail!(Dimension, "encode expects one [t, c] window, got {:?}", x.shape());
        }
        let z = self.eval_with(x, |g, p, v| self.forward(g, p, v, &mut RngStream::new(0)))?;
        Ok(Embedding {
            vector: z.into_data(),
        })
    }

    /// Eval-mode embeddings `[N, d]` of `[N, t, c]` windows, computed in
    /// independent chunks (parallel, order preserving).
    pub fn embed(&self, windows: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.check_input(windows.shape())?;
        Self::finite_input(windows)?;
        let per = self.cfg.window_len * self.cfg.channels;
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(EMBED_CHUNK)
            .map(|s| (s, (s + EMBED_CHUNK).min(n)))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| {
                let x = Tensor::new(
                    &[e - s, self.cfg.window_len, self.cfg.channels],
                    windows.data()[s * per..e * per].to_vec(),
                )?;
                let mut g = Graph::eval();
                let p = g.bind(&self.params, false)?;
                let xv = g.constant(x)?;
                let z = self.forward(&mut g, &p, xv, &mut RngStream::new(0))?;
                Ok(g.value(z).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(&[n, self.cfg.latent_dim], parts.concat())
    }

    pub fn to_blob_file(&self) -> Result<BlobFile> {
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut f = BlobFile::new(ENCODER_KIND, cfg);
        for (name, t) in self.params.named() {
            f.push(name, t);
        }
        Ok(f)
    }

    /// Rebuilds the architecture from the stored config and loads every blob,
    /// validating names and shapes.
    pub fn from_blob_file(f: &BlobFile) -> Result<Self> {
        f.expect_kind(ENCODER_KIND)?;
        let cfg: EncoderConfig = toml::from_str(&f.config).map_err(|e| Error::Data(format!("encoder config block: {e}")))?;
        let mut enc = Self::new(cfg, &mut RngStream::new(0))?;
        let blobs: Vec<(String, Tensor<S>)> = f.blobs.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        enc.params.load_named(&blobs)?;
        Ok(enc)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_blob_file()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_blob_file(&BlobFile::load(path)?)
    }
}

/// Fully connected classifier trained on frozen embeddings.
#[derive(Clone, Debug)]
pub struct ClassifierHead<S> {
    params: ParamStore<S>,
    hidden: Linear,
    out: Linear,
    latent_dim: usize,
    num_classes: usize,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn new(latent_dim: usize, hidden: usize, num_classes: usize, rng: &mut RngStream) -> Result<Self> {
        if latent_dim == 0 || hidden == 0 || num_classes < 2 {
            bail!(Config, "classifier head needs positive dims and at least 2 classes");
        }
        let mut p = ParamStore::new();
        let h = Linear::new(&mut p, "head.hidden", latent_dim, hidden, rng);
        let o = Linear::new(&mut p, "head.out", hidden, num_classes, rng);
        Ok(Self {
            params: p,
            hidden: h,
            out: o,
            latent_dim,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn logits_graph(&self, g: &mut Graph<S>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, z)?;
        let h = g.gelu(h)?;
        self.out.forward(g, p, h)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.latent_dim {
            bail!(Config, "head expects latent dim {}, got {d}", self.latent_dim);
        }
        Ok(())
    }

    /// Logits for one embedding.
    pub fn classify(&self, z: &Embedding<S>) -> Result<Vec<S>> {
        self.check_dim(z.vector.len())?;
        let x = Tensor::new(&[1, z.vector.len()], z.vector.clone())?;
        Ok(self.logits(&x)?.into_data())
    }

    /// Logits `[N, K]` for embeddings `[N, d]`.
    pub fn logits(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.rank() != 2 {
            bail!(Dimension, "head expects [N, d]");
        }
        self.check_dim(z.shape()[1])?;
        let mut g = Graph::eval();
        let p = g.bind(&self.params, false)?;
        let zv = g.constant(z.clone())?;
        let l = self.logits_graph(&mut g, &p, zv)?;
        Ok(g.value(l).clone())
    }

    /// Post-activation hidden layer `[N, hidden]` for embeddings `[N, d]`.
    pub fn hidden_features(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        if z.rank() != 2 {
            bail!(Dimension, "head expects [N, d]");
        }
        self.check_dim(z.shape()[1])?;
        let mut g = Graph::eval();
        let p = g.bind(&self.params, false)?;
        let zv = g.constant(z.clone())?;
        let h = self.hidden.forward(&mut g, &p, zv)?;
        let h = g.gelu(h)?;
        Ok(g.value(h).clone())
    }

    pub fn predict(&self, z: &Tensor<S>) -> Result<Vec<usize>> {
        let l = self.logits(z)?;
        Ok(l.rows().map(argmax).collect())
    }

    /// Cross-entropy training on fixed embeddings. The encoder that produced
    /// them is not touched. Returns the mean loss per epoch.
    pub fn fit(&mut self, z: &Tensor<S>, labels: &[usize], epochs: usize, lr: f64, batch: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        self.check_dim(z.shape()[1])?;
        if labels.len() != z.shape()[0] || labels.iter().any(|&l| l >= self.num_classes) {
            bail!(Input, "labels must have one entry per row and be < {}", self.num_classes);
        }
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &self.params)?;
        let d = self.latent_dim;
        let k = self.num_classes;
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(batch.max(1)) {
                let xs: Vec<S> = chunk.iter().flat_map(|&i| z.row(i).iter().copied()).collect();
                let mut g = Graph::new(Mode::Train);
                let p = g.bind(&self.params, true)?;
                let x = g.constant(Tensor::new(&[chunk.len(), d], xs)?)?;
                let logits = self.logits_graph(&mut g, &p, x)?;
                let lsm = g.log_softmax(logits)?;
                let idx: Vec<usize> = chunk.iter().enumerate().map(|(r, &i)| r * k + labels[i]).collect();
                let picked = g.gather(lsm, &idx, &[chunk.len()])?;
                let nll = g.mean(picked)?;
                let loss = g.scale(nll, -S::one())?;
                g.backward(loss)?;
                total += g.value(loss).data()[0].as_f64();
                batches += 1;
                let grads = g.gradients(&p);
                opt.step(&mut self.params, &grads)?;
            }
            curve.push(total / batches.max(1) as f64);
        }
        Ok(curve)
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(lt: usize, ls: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers_temporal: lt,
            n_heads_temporal: 2,
            n_layers_spatial: ls,
            n_heads_spatial: 2,
            latent_dim: 5,
            window_len: 6,
            channels: 4,
            dropout_rate: 0.1,
            ff_multiplier: 2,
        }
    }

    fn signal(t: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngStream::new(seed);
        Tensor::from_fn(&[t, c], |_| r.normal())
    }

    #[test]
    fn config_validation() {
        assert!(micro(0, 0).validate().is_err());
        let mut c = micro(1, 0);
        c.n_heads_temporal = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = micro(0, 1);
        c.n_heads_spatial = 4;
        assert!(c.validate().is_err());
        assert!(micro(1, 1).validate().is_ok());
    }

    #[test]
    fn shapes_through_each_module() {
        let enc = StEncoder::<f64>::new(micro(1, 1), &mut RngStream::new(1)).unwrap();
        let x = signal(6, 4, 2);
        assert_eq!(enc.temporal_forward(&x).unwrap().shape(), &[6, 4]);
        assert_eq!(enc.spatial_forward(&x).unwrap().shape(), &[4, 6]);
        assert_eq!(enc.encode(&x).unwrap().vector.len(), 5);
        let bad = signal(5, 4, 2);
        assert!(matches!(enc.encode(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn disabled_spatial_is_identity() {
        let enc = StEncoder::<f64>::new(micro(1, 0), &mut RngStream::new(1)).unwrap();
        let x = signal(6, 4, 3);
        assert_eq!(enc.spatial_forward(&x).unwrap(), x);
        let enc = StEncoder::<f64>::new(micro(0, 1), &mut RngStream::new(1)).unwrap();
        assert!(enc.temporal_forward(&x).is_err());
    }

    #[test]
    fn eval_mode_is_bitwise_deterministic() {
        let enc = StEncoder::<f64>::new(micro(1, 1), &mut RngStream::new(4)).unwrap();
        let x = signal(6, 4, 5);
        assert_eq!(enc.encode(&x).unwrap(), enc.encode(&x).unwrap());
        let zero = Tensor::zeros(&[6, 4]);
        let z = enc.encode(&zero).unwrap();
        assert!(z.vector.iter().all(|v| v.is_finite()));
        assert_eq!(z, enc.encode(&zero).unwrap());
    }

    #[test]
    fn non_finite_input_is_a_data_error() {
        let enc = StEncoder::<f64>::new(micro(1, 0), &mut RngStream::new(4)).unwrap();
        let mut x = signal(6, 4, 5);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(enc.encode(&x), Err(Error::Data(_))));
    }

    #[test]
    fn spatial_module_is_channel_equivariant_at_init() {
        let enc = StEncoder::<f64>::new(micro(0, 2), &mut RngStream::new(8)).unwrap();
        let x = signal(6, 4, 9);
        let perm = [2, 0, 3, 1];
        let xp = Tensor::from_fn(&[6, 4], |i| x.at2(i / 4, perm[i % 4]));
        let y = enc.spatial_forward(&x).unwrap();
        let yp = enc.spatial_forward(&xp).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                assert!((yp.at2(r, j) - y.at2(src, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_matches_single_encode() {
        let enc = StEncoder::<f64>::new(micro(1, 1), &mut RngStream::new(4)).unwrap();
        let xs: Vec<_> = (0..70).map(|s| signal(6, 4, s)).collect();
        let batch = Tensor::stack(&xs).unwrap();
        let z = enc.embed(&batch).unwrap();
        assert_eq!(z.shape(), &[70, 5]);
        let single = enc.encode(&xs[67]).unwrap();
        for (a, b) in z.row(67).iter().zip(&single.vector) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = StEncoder::<f64>::new(micro(1, 1), &mut RngStream::new(4)).unwrap();
        let f = enc.to_blob_file().unwrap();
        let back = StEncoder::<f64>::from_blob_file(&BlobFile::from_bytes(&f.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.checksum(), enc.checksum());

        let mut broken = f.clone();
        broken.blobs[0].1 = Tensor::zeros(&[1, 1]);
        assert!(StEncoder::<f64>::from_blob_file(&broken).is_err());
    }

    #[test]
    fn head_logits_and_frozen_encoder() {
        let enc = StEncoder::<f64>::new(micro(1, 0), &mut RngStream::new(4)).unwrap();
        let before = enc.checksum();
        let xs: Vec<_> = (0..20).map(|s| signal(6, 4, s)).collect();
        let z = enc.embed(&Tensor::stack(&xs).unwrap()).unwrap();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let mut head = ClassifierHead::new(5, 8, 3, &mut RngStream::new(1)).unwrap();
        let curve = head.fit(&z, &labels, 30, 1e-2, 8, &mut RngStream::new(2)).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(enc.checksum(), before);

        let logits = head.classify(&Embedding { vector: z.row(0).to_vec() }).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(head.classify(&Embedding { vector: vec![0.0; 4] }).is_err());
    }
}
