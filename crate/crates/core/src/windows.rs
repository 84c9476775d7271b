//! Sliding-window segmentation and token sequences.
//!
//! A `t × c` recording split with window length `l` and stride `s` yields
//! `n = (t - l) / s + 1` segments (integer division) starting at `i * s`.
//! Samples past the last full window are dropped.

use serde::{Deserialize, Serialize};

use crate::container::BlobFile;
use crate::data::{Dataset, Split};
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;
use crate::stencoder::StEncoder;
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(len: usize, stride: usize) -> Result<Self> {
        if len == 0 || stride == 0 {
            bail!(Config, "window length and stride must be positive (got l={len}, s={stride})");
        }
        Ok(Self { len, stride })
    }

    /// Half-overlapping windows.
    pub fn half_overlap(len: usize) -> Result<Self> {
        Self::new(len, (len / 2).max(1))
    }

    /// Number of full windows in a recording of length `t`.
    pub fn count(&self, t: usize) -> Result<usize> {
        if self.len == 0 || self.stride == 0 {
            bail!(Config, "window length and stride must be positive");
        }
        if self.len > t {
            bail!(Config, "window length {} exceeds recording length {t}", self.len);
        }
        Ok((t - self.len) / self.stride + 1)
    }

    pub fn offsets(&self, t: usize) -> Result<Vec<usize>> {
        Ok((0..self.count(t)?).map(|i| i * self.stride).collect())
    }
}

/// Stride giving exactly `n` windows of length `l` over `t` samples. The
/// largest such stride is chosen, so windows spread over the recording.
pub fn stride_for_tokens(t: usize, l: usize, n: usize) -> Result<usize> {
    if n == 0 || l == 0 || l > t {
        bail!(Config, "cannot place {n} windows of length {l} in {t} samples");
    }
    if n == 1 {
        return Ok((t - l + 1).max(1));
    }
    let hi = (t - l) / (n - 1);
    (1..=hi)
        .rev()
        .find(|&s| (t - l) / s + 1 == n)
        .ok_or_else(|| Error::Config(format!("no stride yields exactly {n} windows of length {l} in {t} samples")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment<S> {
    pub offset: usize,
    /// `l × c`
    pub data: Tensor<S>,
}

/// Cuts `x: [t, c]` into windows.
pub fn segment<S: Scalar>(x: &Tensor<S>, spec: &WindowSpec) -> Result<Vec<Segment<S>>> {
    let [t, c] = *x.shape() else {
        bail!(Dimension, "segment expects [t, c], got {:?}", x.shape());
    };
    spec.offsets(t)?
        .into_iter()
        .map(|off| {
            let data = x.data()[off * c..(off + spec.len) * c].to_vec();
            Ok(Segment {
                offset: off,
                data: Tensor::new(&[spec.len, c], data)?,
            })
        })
        .collect()
}

/// `n × d` token embeddings of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<S> {
    pub tokens: Tensor<S>,
    pub source_id: u32,
    pub offsets: Vec<usize>,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Encodes every window of `x` independently with a frozen encoder (eval mode).
pub fn tokenize<S: Scalar>(x: &Tensor<S>, spec: &WindowSpec, encoder: &StEncoder<S>, source_id: u32) -> Result<TokenSequence<S>> {
    if encoder.config().window_len != spec.len {
        bail!(
            Config,
            "encoder window length {} does not match window spec length {}",
            encoder.config().window_len,
            spec.len
        );
    }
    let segs = segment(x, spec)?;
    let offsets = segs.iter().map(|s| s.offset).collect();
    let stacked = Tensor::stack(&segs.into_iter().map(|s| s.data).collect::<Vec<_>>())?;
    Ok(TokenSequence {
        tokens: encoder.embed(&stacked)?,
        source_id,
        offsets,
    })
}

/// Writes token sequences to a `BGK1` container (`tokens/<id>`, `offsets/<id>`).
pub fn save_tokens<S: Scalar>(seqs: &[TokenSequence<S>], spec: &WindowSpec, path: &std::path::Path) -> Result<()> {
    let cfg = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    let mut f = BlobFile::new("tokens", cfg);
    for s in seqs {
        f.push(format!("tokens/{}", s.source_id), &s.tokens);
        let offs: Vec<f64> = s.offsets.iter().map(|&o| o as f64).collect();
        f.push(format!("offsets/{}", s.source_id), &Tensor::new(&[offs.len()], offs)?);
    }
    f.save(path)
}

pub fn load_tokens<S: Scalar>(path: &std::path::Path) -> Result<(WindowSpec, Vec<TokenSequence<S>>)> {
    let f = BlobFile::load(path)?;
    f.expect_kind("tokens")?;
    let spec: WindowSpec = toml::from_str(&f.config).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::new();
    for (name, t) in &f.blobs {
        let Some(id) = name.strip_prefix("tokens/") else { continue };
        let offs = f
            .get(&format!("offsets/{id}"))
            .ok_or_else(|| Error::Data(format!("missing offsets for {id}")))?;
        out.push(TokenSequence {
            tokens: t.cast(),
            source_id: id.parse().map_err(|_| Error::Data(format!("bad token id {id:?}")))?,
            offsets: offs.data().iter().map(|&o| o as usize).collect(),
        });
    }
    Ok((spec, out))
}

/// Windows drawn from the recordings of one split. Every window records its
/// source recording, so cross-split leakage can be audited.
#[derive(Clone, Debug)]
pub struct WindowSet<S> {
    /// `[N, l, c]`
    pub windows: Tensor<S>,
    pub labels: Vec<u32>,
    pub sources: Vec<u32>,
    pub offsets: Vec<usize>,
}

impl<S: Scalar> WindowSet<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Windows of the given indices, stacked `[k, l, c]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<S>> {
        self.windows.select(idx)
    }
}

/// Windowing applied after splitting, per split.
pub fn windows_for_split<S: Scalar>(ds: &Dataset, split: Split, spec: &WindowSpec) -> Result<WindowSet<S>> {
    if ds.splits.is_none() {
        bail!(Protocol, "dataset has no split assignment");
    }
    let idx = ds.indices(split);
    windows_for_indices(ds, &idx, spec)
}

pub fn windows_for_indices<S: Scalar>(ds: &Dataset, idx: &[usize], spec: &WindowSpec) -> Result<WindowSet<S>> {
    if idx.is_empty() {
        bail!(Protocol, "no recordings to window");
    }
    let mut items = Vec::new();
    let (mut labels, mut sources, mut offsets) = (Vec::new(), Vec::new(), Vec::new());
    for &i in idx {
        let rec = &ds.recordings[i];
        for seg in segment(&rec.signal, spec)? {
            items.push(seg.data.cast::<S>());
            labels.push(rec.label);
            sources.push(rec.id);
            offsets.push(seg.offset);
        }
    }
    Ok(WindowSet {
        windows: Tensor::stack(&items)?,
        labels,
        sources,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[t, c], |i| i as f64)
    }

    #[test]
    fn counts_and_offsets() {
        assert_eq!(WindowSpec::new(64, 47).unwrap().count(440).unwrap(), 9);
        let s = WindowSpec::new(4, 2).unwrap();
        assert_eq!(s.offsets(10).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(WindowSpec::new(7, 3).unwrap().offsets(7).unwrap(), vec![0]);
        assert!(WindowSpec::new(11, 1).unwrap().count(10).is_err());
        assert!(WindowSpec::new(4, 0).is_err());
    }

    #[test]
    fn segments_copy_rows() {
        let x = ramp(10, 2);
        let segs = segment(&x, &WindowSpec::new(4, 3).unwrap()).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1].offset, 3);
        assert_eq!(segs[1].data.row(0), &[6.0, 7.0]);
    }

    #[test]
    fn stride_search() {
        assert_eq!(stride_for_tokens(440, 64, 9).unwrap(), 47);
        assert_eq!(stride_for_tokens(128, 32, 4).unwrap(), 32);
        assert_eq!(WindowSpec::new(32, stride_for_tokens(128, 32, 7).unwrap()).unwrap().count(128).unwrap(), 7);
        assert!(stride_for_tokens(10, 4, 8).is_err());
    }
}
