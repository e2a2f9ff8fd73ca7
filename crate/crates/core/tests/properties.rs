use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trustvl_core::{
    softmax_rows, AttentionConfig, AttentionMask, Group, MultiHeadAttention, ParamBuilder, ParamStore, Tape, Tensor,
};

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4.0f64..4.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a.get(i, t) * b.get(t, j);
            }
        }
    }
    out
}

fn attention(seed: u64, dim: usize, heads: usize) -> (ParamStore<f64>, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mha = MultiHeadAttention::new(
        &mut ParamBuilder::new(&mut store, &mut rng, "att", Group::Llm),
        "mha",
        AttentionConfig::new(dim, heads).unwrap(),
        false,
    )
    .unwrap();
    (store, mha)
}

/// Per-head loops with explicit exponentials; no tape involved.
fn naive_attention(
    store: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    xq: &Tensor<f64>,
    xkv: &Tensor<f64>,
    mask: &AttentionMask,
) -> Vec<f64> {
    let proj = |x: &Tensor<f64>, l: &trustvl_core::Linear| {
        let mut y = naive_matmul(x, store.tensor(l.w));
        let b = store.tensor(l.b).data();
        for (i, v) in y.iter_mut().enumerate() {
            *v += b[i % b.len()];
        }
        Tensor::new(vec![x.rows(), b.len()], y).unwrap()
    };
    let (q, k, v) = (proj(xq, &mha.q), proj(xkv, &mha.k), proj(xkv, &mha.v));
    let d = mha.cfg.model_dim;
    let hd = mha.cfg.head_dim();
    let mut merged = vec![0.0; xq.rows() * d];
    for h in 0..mha.cfg.num_heads {
        for i in 0..xq.rows() {
            let scores: Vec<f64> = (0..xkv.rows())
                .map(|j| (0..hd).map(|t| q.get(i, h * hd + t) * k.get(j, h * hd + t)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = (0..xkv.rows())
                .filter(|&j| mask.allows(i, j))
                .map(|j| scores[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = (0..xkv.rows())
                .map(|j| if mask.allows(i, j) { (scores[j] - m).exp() } else { 0.0 })
                .collect();
            let z: f64 = w.iter().sum();
            for t in 0..hd {
                merged[i * d + h * hd + t] = (0..xkv.rows()).map(|j| w[j] / z * v.get(j, h * hd + t)).sum();
            }
        }
    }
    proj(&Tensor::new(vec![xq.rows(), d], merged).unwrap(), &mha.o).into_data()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 9)) {
        let s = softmax_rows(&x, None).unwrap();
        for r in 0..s.rows() {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(x in matrix(4, 7), shift in -50.0f64..50.0) {
        let a = softmax_rows(&x, None).unwrap();
        let b = softmax_rows(&x.map(|v| v + shift), None).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn masked_softmax_renormalizes_the_kept_entries(x in matrix(4, 7), bits in prop::collection::vec(any::<bool>(), 28)) {
        let cols = x.cols();
        let mut mask: Vec<bool> = bits[..x.len()].to_vec();
        for r in 0..x.rows() {
            mask[r * cols] = true;
        }
        let s = softmax_rows(&x, Some(&mask)).unwrap();
        for r in 0..x.rows() {
            let kept: Vec<f64> = (0..cols).filter(|&j| mask[r * cols + j]).map(|j| x.get(r, j)).collect();
            let m = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = kept.iter().map(|v| (v - m).exp()).sum();
            for j in 0..cols {
                let want = if mask[r * cols + j] { (x.get(r, j) - m).exp() / z } else { 0.0 };
                prop_assert!((s.get(r, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(n, k, m)| (
        prop::collection::vec(-3.0f64..3.0, n * k).prop_map(move |d| Tensor::new(vec![n, k], d).unwrap()),
        prop::collection::vec(-3.0f64..3.0, k * m).prop_map(move |d| Tensor::new(vec![k, m], d).unwrap()),
    ))) {
        let tape = Tape::new();
        let got = tape.input(a.clone()).matmul(&tape.input(b.clone())).unwrap().value();
        prop_assert!(close(got.data(), &naive_matmul(&a, &b), 1e-12));
    }

    #[test]
    fn concat_then_slice_recovers_parts(a in matrix(4, 5), extra in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Tensor::<f64>::randn(&[extra, a.cols()], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[a.rows(), extra], 1.0, &mut rng);
        let tape = Tape::new();
        let (va, vb, vc) = (tape.input(a.clone()), tape.input(b.clone()), tape.input(c.clone()));
        let rows = tape.concat(&[va, vb], 0).unwrap();
        prop_assert_eq!(rows.shape(), vec![a.rows() + extra, a.cols()]);
        prop_assert_eq!(&*rows.slice_rows(0, a.rows()).unwrap().value(), &a);
        prop_assert_eq!(&*rows.slice_rows(a.rows(), extra).unwrap().value(), &b);
        let cols = tape.concat(&[va, vc], 1).unwrap();
        prop_assert_eq!(&*cols.slice_cols(0, a.cols()).unwrap().value(), &a);
        prop_assert_eq!(&*cols.slice_cols(a.cols(), extra).unwrap().value(), &c);
    }

    #[test]
    fn attention_matches_naive_oracle(seed in any::<u64>(), lq in 1usize..5, lk in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4]), bits in prop::collection::vec(any::<bool>(), 30)) {
        let (store, mha) = attention(seed, 8, heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let xq = Tensor::<f64>::randn(&[lq, 8], 1.0, &mut rng);
        let xkv = Tensor::<f64>::randn(&[lk, 8], 1.0, &mut rng);
        let mask = AttentionMask::from_fn(lq, lk, |i, j| j == i % lk || bits[i * lk + j]).unwrap();
        let tape = Tape::new();
        let got = mha.forward(&tape, &store, tape.input(xq.clone()), tape.input(xkv.clone()), &mask).unwrap().value();
        prop_assert!(close(got.data(), &naive_attention(&store, &mha, &xq, &xkv, &mask), 1e-10));
    }

    #[test]
    fn causal_outputs_ignore_later_positions(seed in any::<u64>(), n in 2usize..7, cut in 0usize..6) {
        let cut = cut % (n - 1) + 1;
        let (store, mha) = attention(seed, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let x = Tensor::<f64>::randn(&[n, 8], 1.0, &mut rng);
        let mut y = x.clone();
        for v in &mut y.data_mut()[cut * 8..] {
            *v += 3.0;
        }
        let run = |t: &Tensor<f64>| {
            let tape = Tape::new();
            let v = tape.input(t.clone());
            let out = mha.forward(&tape, &store, v, v, &AttentionMask::causal(n)).unwrap().value();
            out.slice_rows(0, cut).unwrap()
        };
        prop_assert_eq!(run(&x), run(&y));
    }

    #[test]
    fn cross_attention_is_invariant_to_source_order(seed in any::<u64>(), lq in 1usize..4, lk in 2usize..7) {
        let (store, mha) = attention(seed, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let xq = Tensor::<f64>::randn(&[lq, 8], 1.0, &mut rng);
        let src = Tensor::<f64>::randn(&[lk, 8], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..lk).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| src.row(i).to_vec()).collect();
        let shuffled = Tensor::from_rows(&rows).unwrap();
        let run = |s: &Tensor<f64>| {
            let tape = Tape::new();
            let out = mha.forward(&tape, &store, tape.input(xq.clone()), tape.input(s.clone()), &AttentionMask::full(lq, lk));
            (*out.unwrap().value()).clone()
        };
        prop_assert!(run(&src).max_abs_diff(&run(&shuffled)) < 1e-12);
    }
}
