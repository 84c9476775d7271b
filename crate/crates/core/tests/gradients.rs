use eeg2img::gradsuite::{self, SuiteConfig};
use eeg2img::tensorcore::{grad_check_many, Graph, Mode, Tensor};
use eeg2img::RngStream;
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed);
    Tensor::from_fn(shape, |_| r.normal())
}

#[test]
fn matmul_matches_central_differences() {
    let (a, b) = (randn(&[5, 4], 1), randn(&[4, 3], 2));
    let err = grad_check_many(&[a, b], 1e-6, Mode::Eval, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        let c = g.square(c)?;
        g.sum(c)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_jacobian_matches_central_differences() {
    let x = randn(&[3, 7], 3);
    let w = randn(&[3, 7], 4);
    let err = grad_check_many(&[x], 1e-6, Mode::Eval, |g, v| {
        let s = g.softmax(v[0], 1)?;
        let w = g.constant(w.clone())?;
        let p = g.mul(s, w)?;
        g.sum(p)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_matches_central_differences() {
    let ins = [randn(&[4, 8], 5), randn(&[8], 6), randn(&[8], 7)];
    let w = randn(&[4, 8], 8);
    let err = grad_check_many(&ins, 1e-6, Mode::Eval, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        let w = g.constant(w.clone())?;
        let p = g.mul(y, w)?;
        g.sum(p)
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn every_path_passes_the_suite() {
    let start = std::time::Instant::now();
    let results = gradsuite::run(&SuiteConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    for r in &results {
        assert!(r.max_rel_err < 1e-4, "{}: {:e} ({:?}, trial {})", r.name, r.max_rel_err, r.worst, r.worst_trial);
    }
    assert!(results.iter().any(|r| r.name.starts_with("encoder")));
    assert!(results.iter().any(|r| r.name.starts_with("denoiser")));
    assert!(secs < 60.0, "suite took {secs:.1}s");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        vals in prop::collection::vec(-700.0f64..700.0, 1..40),
    ) {
        let n = vals.len();
        let x = Tensor::from_fn(&[rows, n], |i| vals[i % n] * (1.0 + (i / n) as f64));
        let mut g = Graph::<f64>::eval();
        let v = g.constant(x).unwrap();
        let s = g.softmax(v, 1).unwrap();
        for row in g.value(s).rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_leaves_inputs_untouched(seed in 0u64..1000, m in 1usize..8, k in 2usize..8) {
        let a = randn(&[m, k], seed);
        let gain = randn(&[k], seed + 1);
        let bias = randn(&[k], seed + 2);
        let mut g = Graph::<f64>::train();
        let va = g.input(a.clone(), true).unwrap();
        let vg = g.input(gain.clone(), true).unwrap();
        let vb = g.input(bias.clone(), true).unwrap();
        let h = g.layer_norm(va, vg, vb).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.softmax(h, 1).unwrap();
        let h = g.dropout(h, 0.2, &mut RngStream::new(seed)).unwrap();
        let out = g.sum(h).unwrap();
        g.backward(out).unwrap();
        prop_assert_eq!(g.value(va), &a);
        prop_assert_eq!(g.value(vg), &gain);
        prop_assert_eq!(g.value(vb), &bias);
        prop_assert!(g.grad(va).is_some());
    }
}
