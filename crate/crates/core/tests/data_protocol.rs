use std::collections::{BTreeMap, BTreeSet};

use eeg2img::data::{generate_synthetic, split, Dataset, Split, SynthConfig};
use eeg2img::windows::{windows_for_split, WindowSpec};
use proptest::prelude::*;

fn small(per_class: usize, classes: usize) -> SynthConfig {
    SynthConfig {
        num_classes: classes,
        per_class,
        channels: 3,
        length: 40,
        with_latents: true,
        ..SynthConfig::thoughtviz_like()
    }
}

fn sources(ds: &Dataset, s: Split, spec: &WindowSpec) -> BTreeSet<u32> {
    windows_for_split::<f64>(ds, s, spec).map(|w| w.sources.into_iter().collect()).unwrap_or_default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_never_cross_splits(seed in 0u64..500, per_class in 6usize..20, classes in 2usize..5) {
        let ds = split(&generate_synthetic(&small(per_class, classes), seed).unwrap(), &[0.6, 0.2, 0.2], seed).unwrap();
        let spec = WindowSpec::half_overlap(16).unwrap();
        let sets: Vec<_> = Split::ALL.iter().map(|&s| sources(&ds, s, &spec)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        // Every window's source carries that split's tag.
        for (k, &s) in Split::ALL.iter().enumerate() {
            for id in &sets[k] {
                let idx = ds.recordings.iter().position(|r| r.id == *id).unwrap();
                prop_assert_eq!(ds.split_of(idx), Some(s));
            }
        }
    }

    #[test]
    fn stratified_counts_within_one(seed in 0u64..500, per_class in 4usize..40, a in 0.1f64..0.8) {
        let b = (1.0 - a) / 2.0;
        let fr = [a, b, 1.0 - a - b];
        let ds = split(&generate_synthetic(&small(per_class, 3), seed).unwrap(), &fr, seed).unwrap();
        let mut counts: BTreeMap<(u32, usize), usize> = BTreeMap::new();
        for (i, r) in ds.recordings.iter().enumerate() {
            let s = Split::ALL.iter().position(|&s| Some(s) == ds.split_of(i)).unwrap();
            *counts.entry((r.label, s)).or_default() += 1;
        }
        for label in 0..3u32 {
            for (s, f) in fr.iter().enumerate() {
                let got = counts.get(&(label, s)).copied().unwrap_or(0) as f64;
                prop_assert!((got - f * per_class as f64).abs() < 1.0);
            }
        }
    }

    #[test]
    fn container_round_trip_is_identity(seed in 0u64..500, per_class in 4usize..8) {
        let ds = split(&generate_synthetic(&small(per_class, 2), seed).unwrap(), &[0.5, 0.25, 0.25], seed).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ds.to_bytes());
        prop_assert_eq!(back.recordings, ds.recordings);
    }
}
