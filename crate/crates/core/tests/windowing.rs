use eeg2img::stencoder::{EncoderConfig, StEncoder};
use eeg2img::tensorcore::Tensor;
use eeg2img::windows::{segment, tokenize, WindowSpec};
use eeg2img::RngStream;
use proptest::prelude::*;

/// Every start offset whose window fits, by direct enumeration.
fn brute_offsets(t: usize, l: usize, s: usize) -> Vec<usize> {
    (0..t).filter(|&o| o % s == 0 && o + l <= t).collect()
}

#[test]
fn exhaustive_counts_up_to_512() {
    for t in 1..=512 {
        for s in 1..=64 {
            // Every window length for small t; a spread of lengths above that.
            let lens: Vec<usize> = if t <= 64 { (1..=t).collect() } else { (1..=t).step_by(7).chain([t]).collect() };
            for l in lens {
                let spec = WindowSpec::new(l, s).unwrap();
                let want = brute_offsets(t, l, s);
                assert_eq!(spec.count(t).unwrap(), want.len(), "t={t} l={l} s={s}");
                assert_eq!(spec.offsets(t).unwrap(), want, "t={t} l={l} s={s}");
            }
        }
    }
}

#[test]
fn spot_value() {
    assert_eq!(WindowSpec::new(64, 47).unwrap().count(440).unwrap(), 9);
}

proptest! {
    #[test]
    fn counts_match_enumeration(t in 1usize..=512, l_frac in 0.0f64..1.0, s in 1usize..=64) {
        let l = 1 + ((t - 1) as f64 * l_frac) as usize;
        let spec = WindowSpec::new(l, s).unwrap();
        prop_assert_eq!(spec.offsets(t).unwrap(), brute_offsets(t, l, s));
    }

    #[test]
    fn segments_reconstruct_covered_samples(t in 4usize..120, c in 1usize..5, l in 1usize..30, s in 1usize..20) {
        prop_assume!(l <= t);
        let x = Tensor::from_fn(&[t, c], |i| i as f64 * 0.5 - 3.0);
        let segs = segment(&x, &WindowSpec::new(l, s).unwrap()).unwrap();
        let mut rebuilt = vec![None; t * c];
        for seg in &segs {
            for (k, &v) in seg.data.data().iter().enumerate() {
                let idx = seg.offset * c + k;
                if let Some(prev) = rebuilt[idx] {
                    prop_assert_eq!(prev, v);
                }
                rebuilt[idx] = Some(v);
            }
        }
        let last = segs.last().unwrap().offset + l;
        for (i, v) in rebuilt.iter().enumerate() {
            let row = i / c;
            let covered = segs.iter().any(|g| row >= g.offset && row < g.offset + l);
            prop_assert_eq!(v.is_some(), covered);
            if let Some(v) = v {
                prop_assert_eq!(*v, x.data()[i]);
            }
            if row >= last {
                prop_assert!(v.is_none());
            }
        }
    }
}

#[test]
fn tokenize_is_deterministic_and_ordered() {
    let cfg = EncoderConfig {
        n_layers_temporal: 1,
        n_heads_temporal: 2,
        latent_dim: 8,
        window_len: 16,
        channels: 4,
        ..EncoderConfig::default()
    };
    let enc = StEncoder::<f64>::new(cfg, &mut RngStream::new(3)).unwrap();
    let mut r = RngStream::new(4);
    let x = Tensor::from_fn(&[100, 4], |_| r.normal());
    let spec = WindowSpec::new(16, 12).unwrap();
    let a = tokenize(&x, &spec, &enc, 7).unwrap();
    let b = tokenize(&x, &spec, &enc, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    for (i, seg) in segment(&x, &spec).unwrap().iter().enumerate() {
        assert_eq!(a.offsets[i], i * 12);
        let z = enc.encode(&seg.data).unwrap();
        assert_eq!(a.tokens.row(i), z.vector.as_slice());
    }
    let mismatched = WindowSpec::new(20, 12).unwrap();
    assert!(tokenize(&x, &mismatched, &enc, 7).is_err());
}
