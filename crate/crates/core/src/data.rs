//! Synthetic class-conditioned EEG recordings with paired toy latents, the
//! `BGN1` dataset container, stratified splitting and per-channel
//! normalization.
//!
//! `BGN1` layout (little-endian):
//!
//! ```text
//! "BGN1" | u32 version=1
//! header: u32 K | u32 m (recordings per class, 0 if unequal) | u32 c | u32 t
//!         | u32 flags (bit0 latents, bit1 split tags) | u32 n recordings
//! if latents: u32 h | u32 w | u32 ch
//! n × recording block: u32 id | u32 label | u32 subject | u8 split (255 = none)
//!                      | f64 sampling rate | f64 payload[t*c] (row-major t×c)
//! if latents: n × latent block: u32 class | f64 payload[h*w*ch]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::clddm::LatentImage;
use crate::container::{put_f64s, ByteReader};
use crate::error::{bail, Error, Result};
use crate::rng::RngStream;
use crate::tensorcore::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"BGN1";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

/// One `t × c` recording and its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct EegRecording {
    pub id: u32,
    pub label: u32,
    pub subject: u32,
    pub sampling_rate: f64,
    pub signal: Tensor<f64>,
}

impl EegRecording {
    pub fn len(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.signal.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    pub recordings: Vec<EegRecording>,
    /// Paired with `recordings` by index when present.
    pub latents: Option<Vec<LatentImage>>,
    pub splits: Option<Vec<Split>>,
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub length: usize,
    /// Signal power over noise power. `f64::INFINITY` disables noise.
    pub snr: f64,
    pub template_seed: u64,
    /// Sinusoid components per class template.
    pub components: usize,
    /// Std-dev (radians) of the per-recording phase draw of each component.
    pub phase_jitter: f64,
    /// When positive, component frequencies are drawn from this many shared
    /// bands instead of the continuous range.
    pub frequency_bands: usize,
    pub subjects: usize,
    pub sampling_rate: f64,
    pub with_latents: bool,
    pub latent_dims: [usize; 3],
    pub latent_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::thoughtviz_like()
    }
}

impl SynthConfig {
    /// 10 classes, 14 channels.
    pub fn thoughtviz_like() -> Self {
        Self {
            num_classes: 10,
            per_class: 50,
            channels: 14,
            length: 128,
            snr: 4.0,
            template_seed: 1,
            components: 3,
            phase_jitter: std::f64::consts::PI,
            frequency_bands: 6,
            subjects: 1,
            sampling_rate: 128.0,
            with_latents: false,
            latent_dims: [8, 8, 4],
            latent_noise: 0.25,
        }
    }

    /// 40 classes, 128 channels, 440 samples, with paired latents.
    pub fn cvpr40_like() -> Self {
        Self {
            num_classes: 40,
            per_class: 50,
            channels: 128,
            length: 440,
            sampling_rate: 1000.0,
            subjects: 6,
            with_latents: true,
            ..Self::thoughtviz_like()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "thoughtviz-like" => Ok(Self::thoughtviz_like()),
            "cvpr40-like" => Ok(Self::cvpr40_like()),
            other => bail!(Config, "unknown preset {other:?} (expected thoughtviz-like or cvpr40-like)"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least 2 classes, got {}", self.num_classes);
        }
        if self.per_class < 4 {
            bail!(Config, "need at least 4 recordings per class, got {}", self.per_class);
        }
        if !(self.snr > 0.0) {
            bail!(Config, "snr must be positive, got {}", self.snr);
        }
        if self.channels == 0 || self.length == 0 || self.components == 0 || self.subjects == 0 {
            bail!(Config, "channels, length, components and subjects must be positive");
        }
        if self.latent_dims.iter().any(|&d| d == 0) {
            bail!(Config, "latent dims must be positive");
        }
        Ok(())
    }
}

/// Component frequency range, cycles per sample.
const F_LO: f64 = 0.02;
const F_HI: f64 = 0.2;

struct ClassTemplate {
    freqs: Vec<f64>,
    phases: Vec<f64>,
    /// components × channels
    amps: Vec<Vec<f64>>,
    power: f64,
    latent_mean: Vec<f64>,
}

fn class_templates(cfg: &SynthConfig) -> Vec<ClassTemplate> {
    let root = RngStream::new(cfg.template_seed);
    let latent_len: usize = cfg.latent_dims.iter().product();
    let mut band_rng = root.split("bands");
    let bands: Vec<f64> = (0..cfg.frequency_bands).map(|_| band_rng.uniform_range(F_LO, F_HI)).collect();
    (0..cfg.num_classes)
        .map(|k| {
            let mut r = root.split_index("class-template", k as u64);
            let freqs: Vec<f64> = (0..cfg.components)
                .map(|_| match cfg.frequency_bands {
                    0 => r.uniform_range(F_LO, F_HI),
                    n => bands[r.below(n)],
                })
                .collect();
            let phases: Vec<f64> = (0..cfg.components)
                .map(|_| r.uniform_range(0.0, std::f64::consts::TAU))
                .collect();
            let amps: Vec<Vec<f64>> = (0..cfg.components)
                .map(|_| (0..cfg.channels).map(|_| r.normal()).collect())
                .collect();
            let power = amps.iter().flatten().map(|a| a * a / 2.0).sum::<f64>() / cfg.channels as f64;
            let mut lr = root.split_index("class-latent", k as u64);
            let latent_mean = (0..latent_len).map(|_| lr.normal()).collect();
            ClassTemplate {
                freqs,
                phases,
                amps,
                power,
                latent_mean,
            }
        })
        .collect()
}

/// Sinusoid-mixture recordings, `per_class` per class, plus optional paired
/// latents. Signal, noise and latent draws use separate streams, so the same
/// seed with `snr = ∞` yields the clean signal of the noisy dataset.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let templates = class_templates(cfg);
    let root = RngStream::new(seed);
    let (t, c) = (cfg.length, cfg.channels);
    let mut recordings = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    let mut latents = Vec::new();
    for (k, tpl) in templates.iter().enumerate() {
        for i in 0..cfg.per_class {
            let id = (k * cfg.per_class + i) as u32;
            let mut phase_rng = root.split_index("phase", id as u64);
            let mut noise_rng = root.split_index("noise", id as u64);
            let jitter: Vec<f64> = (0..cfg.components)
                .map(|_| cfg.phase_jitter * phase_rng.normal())
                .collect();
            let sigma = if cfg.snr.is_finite() { (tpl.power / cfg.snr).sqrt() } else { 0.0 };
            let mut data = vec![0.0; t * c];
            for tau in 0..t {
                for j in 0..cfg.components {
                    let s = (std::f64::consts::TAU * tpl.freqs[j] * tau as f64 + tpl.phases[j] + jitter[j]).sin();
                    for ch in 0..c {
                        data[tau * c + ch] += tpl.amps[j][ch] * s;
                    }
                }
            }
            if sigma > 0.0 {
                data.iter_mut().for_each(|v| *v += sigma * noise_rng.normal());
            }
            recordings.push(EegRecording {
                id,
                label: k as u32,
                subject: (i % cfg.subjects) as u32,
                sampling_rate: cfg.sampling_rate,
                signal: Tensor::new(&[t, c], data)?,
            });
            if cfg.with_latents {
                let mut lr = root.split_index("latent", id as u64);
                let [h, w, ch] = cfg.latent_dims;
                let vals = tpl
                    .latent_mean
                    .iter()
                    .map(|m| m + cfg.latent_noise * lr.normal())
                    .collect();
                latents.push(LatentImage::new(h, w, ch, k as u32, vals)?);
            }
        }
    }
    Ok(Dataset {
        num_classes: cfg.num_classes,
        channels: c,
        length: t,
        recordings,
        latents: cfg.with_latents.then_some(latents),
        splits: None,
    })
}

/// Per-channel z-normalization (population variance). Constant channels are
/// set to zero and reported in the returned list of channel indices.
pub fn normalize(rec: &EegRecording) -> (EegRecording, Vec<usize>) {
    let (t, c) = (rec.len(), rec.channels());
    let mut out = rec.signal.data().to_vec();
    let mut constant = Vec::new();
    for ch in 0..c {
        let mean = (0..t).map(|i| out[i * c + ch]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (out[i * c + ch] - mean).powi(2)).sum::<f64>() / t as f64;
        if var <= 1e-20 * mean.abs().max(1.0).powi(2) {
            constant.push(ch);
            (0..t).for_each(|i| out[i * c + ch] = 0.0);
            continue;
        }
        let sd = var.sqrt();
        (0..t).for_each(|i| out[i * c + ch] = (out[i * c + ch] - mean) / sd);
    }
    if !constant.is_empty() {
        log::warn!("event=constant_channels recording={} channels={:?}", rec.id, constant);
    }
    let signal = Tensor::new(&[t, c], out).expect("same shape");
    (EegRecording { signal, ..rec.clone() }, constant)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recordings.is_empty()
    }

    /// Recordings per class when every class has the same count, else 0.
    pub fn per_class(&self) -> usize {
        let counts = self.class_counts();
        let first = counts.values().next().copied().unwrap_or(0);
        if counts.len() == self.num_classes && counts.values().all(|&v| v == first) {
            first
        } else {
            0
        }
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for r in &self.recordings {
            *m.entry(r.label).or_insert(0) += 1;
        }
        m
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        self.splits.as_ref().map(|s| s[index])
    }

    /// Indices of recordings tagged `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(s) => (0..self.len()).filter(|&i| s[i] == split).collect(),
            None => Vec::new(),
        }
    }

    pub fn normalized(&self) -> Dataset {
        Dataset {
            recordings: self.recordings.iter().map(|r| normalize(r).0).collect(),
            ..self.clone()
        }
    }

    /// Keeps only the recordings whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[u32]) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.recordings[i].label))
            .collect();
        Dataset {
            num_classes: classes.len(),
            channels: self.channels,
            length: self.length,
            recordings: keep.iter().map(|&i| self.recordings[i].clone()).collect(),
            latents: self.latents.as_ref().map(|l| keep.iter().map(|&i| l[i].clone()).collect()),
            splits: self.splits.as_ref().map(|s| keep.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let w = |out: &mut Vec<u8>, v: u32| out.write_u32::<LittleEndian>(v).unwrap();
        w(&mut out, DATASET_VERSION);
        w(&mut out, self.num_classes as u32);
        w(&mut out, self.per_class() as u32);
        w(&mut out, self.channels as u32);
        w(&mut out, self.length as u32);
        let flags = self.latents.is_some() as u32 | (self.splits.is_some() as u32) << 1;
        w(&mut out, flags);
        w(&mut out, self.recordings.len() as u32);
        if let Some(l) = self.latents.as_ref().and_then(|l| l.first()) {
            w(&mut out, l.height as u32);
            w(&mut out, l.width as u32);
            w(&mut out, l.channels as u32);
        }
        for (i, r) in self.recordings.iter().enumerate() {
            w(&mut out, r.id);
            w(&mut out, r.label);
            w(&mut out, r.subject);
            out.push(self.split_of(i).map_or(255, Split::code));
            put_f64s(&mut out, [r.sampling_rate]);
            put_f64s(&mut out, r.signal.data().iter().copied());
        }
        if let Some(ls) = &self.latents {
            for l in ls {
                w(&mut out, l.class);
                put_f64s(&mut out, l.data.iter().copied());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(buf);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return r.fail(format!("unsupported dataset version {version}"));
        }
        let k = r.u32("K")? as usize;
        let _m = r.u32("m")?;
        let c = r.u32("c")? as usize;
        let t = r.u32("t")? as usize;
        let flags = r.u32("flags")?;
        if flags & !3 != 0 {
            return r.fail(format!("unknown flag bits {flags:#x}"));
        }
        let n = r.u32("recording count")? as usize;
        if c == 0 || t == 0 {
            return r.fail("zero channels or length");
        }
        let latent_dims = if flags & 1 != 0 {
            let d = [r.u32("latent h")?, r.u32("latent w")?, r.u32("latent ch")?].map(|v| v as usize);
            if d.contains(&0) {
                return r.fail("zero latent dimension");
            }
            Some(d)
        } else {
            None
        };
        let mut recordings = Vec::with_capacity(n.min(1 << 20));
        let mut splits = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.u32("recording id")?;
            let label = r.u32("label")?;
            if label as usize >= k {
                return r.fail(format!("label {label} >= K={k}"));
            }
            let subject = r.u32("subject")?;
            let code = r.u8("split tag")?;
            let split = match (code, Split::from_code(code)) {
                (255, _) => None,
                (_, Some(s)) => Some(s),
                _ => return r.fail(format!("bad split tag {code}")),
            };
            splits.push(split);
            let sampling_rate = r.f64s(1, "sampling rate")?[0];
            let payload = r.f64s(t * c, "recording payload")?;
            recordings.push(EegRecording {
                id,
                label,
                subject,
                sampling_rate,
                signal: Tensor::new(&[t, c], payload)?,
            });
        }
        let latents = match latent_dims {
            Some([h, w, ch]) => {
                let mut ls = Vec::with_capacity(n);
                for _ in 0..n {
                    let class = r.u32("latent class")?;
                    let vals = r.f64s(h * w * ch, "latent payload")?;
                    ls.push(LatentImage::new(h, w, ch, class, vals)?);
                }
                Some(ls)
            }
            None => None,
        };
        r.finish()?;
        let splits = if flags & 2 != 0 {
            match splits.into_iter().collect::<Option<Vec<_>>>() {
                Some(s) => Some(s),
                None => return r.fail("split flag set but some recordings are untagged"),
            }
        } else {
            None
        };
        Ok(Dataset {
            num_classes: k,
            channels: c,
            length: t,
            recordings,
            latents,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks `(K, c, t)` against an expectation.
    pub fn load_expecting(path: &Path, classes: usize, channels: usize, length: usize) -> Result<Dataset> {
        let ds = Dataset::load(path)?;
        let got = (ds.num_classes, ds.channels, ds.length);
        let want = (classes, channels, length);
        if got != want {
            return Err(Error::Data(format!(
                "shape mismatch: file has (K, c, t) = {got:?}, expected {want:?}"
            )));
        }
        Ok(ds)
    }
}

/// Stratified split. `fractions` (train, val, test prefix) must sum to one;
/// per-class counts use largest-remainder rounding.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Dataset> {
    if fractions.is_empty() || fractions.len() > 3 {
        bail!(Protocol, "expected 1 to 3 split fractions, got {}", fractions.len());
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!(Protocol, "split fractions {fractions:?} must be in [0,1] and sum to 1");
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.recordings.iter().enumerate() {
        by_class.entry(r.label).or_default().push(i);
    }
    let root = RngStream::new(seed);
    let mut tags = vec![Split::Train; ds.len()];
    for (label, mut idx) in by_class {
        if idx.len() < active {
            bail!(Protocol, "class {label} has {} recordings for {active} splits", idx.len());
        }
        root.split_index("split", label as u64).shuffle(&mut idx);
        let n = idx.len();
        let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..fractions.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .partial_cmp(&(exact[a] - exact[a].floor()))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &o in order.iter().cycle() {
            if left == 0 {
                break;
            }
            if fractions[o] > 0.0 {
                counts[o] += 1;
                left -= 1;
            }
        }
        let mut at = 0;
        for (s, &cnt) in counts.iter().enumerate() {
            for &i in &idx[at..at + cnt] {
                tags[i] = Split::ALL[s];
            }
            at += cnt;
        }
    }
    Ok(Dataset {
        splits: Some(tags),
        ..ds.clone()
    })
}
