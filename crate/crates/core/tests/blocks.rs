use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trustvl_core::{
    greedy_decode, patchify, DistortionType, Group, Image, ImageInput, LmConfig, ModelConfig, ParamBuilder, ParamStore,
    Qava, QavaConfig, QuestionTemplates, Tape, Tensor, ToyLlm, TrustVl, VisionConfig, VisionEncoder, Vocab,
};

fn small_qava(seed: u64) -> (ParamStore<f64>, Qava, Vocab) {
    let vocab = Vocab::build(QuestionTemplates::default().iter().map(|(_, q)| q));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QavaConfig {
        num_tokens: 4,
        num_layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        max_question_len: 32,
    };
    let q = Qava::new(&mut ParamBuilder::new(&mut store, &mut rng, "qava", Group::Qava), cfg, 6, 10, vocab.len()).unwrap();
    (store, q, vocab)
}

fn qava_out(store: &ParamStore<f64>, q: &Qava, feats: &Tensor<f64>, ids: &[usize]) -> Tensor<f64> {
    let tape = Tape::new();
    (*q.forward(&tape, store, tape.input(feats.clone()), ids).unwrap().value()).clone()
}

#[test]
fn qava_emits_one_row_per_learned_token() {
    let (store, q, vocab) = small_qava(1);
    let ids = q.question_ids(&vocab, &QuestionTemplates::default().question(DistortionType::Visual)).unwrap();
    let feats = Tensor::randn(&[5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(qava_out(&store, &q, &feats, &ids).shape(), &[4, 10]);
    assert!(store.iter().all(|(_, p)| p.group == Group::Qava));
}

#[test]
fn qava_output_depends_on_the_question() {
    let (store, q, vocab) = small_qava(3);
    let qs = QuestionTemplates::default();
    let feats = Tensor::randn(&[5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let outs: Vec<Tensor<f64>> = DistortionType::BASIC
        .iter()
        .map(|&d| qava_out(&store, &q, &feats, &q.question_ids(&vocab, &qs.question(d)).unwrap()))
        .collect();
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            assert!(outs[i].max_abs_diff(&outs[j]) > 1e-6, "questions {i} and {j} collide");
        }
    }
}

#[test]
fn qava_ignores_the_order_of_image_features() {
    let (store, q, vocab) = small_qava(5);
    let ids = q.question_ids(&vocab, &QuestionTemplates::default().question(DistortionType::Textual)).unwrap();
    let feats = Tensor::<f64>::randn(&[5, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let rows: Vec<Vec<f64>> = [3, 0, 4, 1, 2].iter().map(|&i| feats.row(i).to_vec()).collect();
    let a = qava_out(&store, &q, &feats, &ids);
    let b = qava_out(&store, &q, &Tensor::from_rows(&rows).unwrap(), &ids);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn qava_rejects_empty_inputs() {
    let (store, q, vocab) = small_qava(7);
    let blank = trustvl_core::TaskQuestion {
        distortion: DistortionType::Visual,
        text: "  ".into(),
    };
    assert!(q.question_ids(&vocab, &blank).is_err());
    let tape = Tape::new();
    assert!(q.forward(&tape, &store, tape.input(Tensor::zeros(&[2, 5])), &[4]).is_err());
}

fn small_lm(seed: u64) -> (ParamStore<f64>, ToyLlm) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LmConfig {
        llm_dim: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        max_seq: 16,
        vocab_size: 12,
    };
    let lm = ToyLlm::new(&mut ParamBuilder::new(&mut store, &mut rng, "llm", Group::Llm), cfg).unwrap();
    (store, lm)
}

#[test]
fn lm_logits_are_causal() {
    let (store, lm) = small_lm(1);
    let prefix = Tensor::<f64>::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let run = |ids: &[usize]| {
        let tape = Tape::new();
        (*lm.forward(&tape, &store, Some(tape.input(prefix.clone())), ids).unwrap().value()).clone()
    };
    let a = run(&[1, 5, 6, 7, 8]);
    let b = run(&[1, 5, 6, 11, 4]);
    assert_eq!(a.slice_rows(0, 6).unwrap(), b.slice_rows(0, 6).unwrap());
    assert!(a.slice_rows(6, 2).unwrap().max_abs_diff(&b.slice_rows(6, 2).unwrap()) > 1e-9);
}

#[test]
fn lm_loss_scores_only_masked_targets() {
    let (store, lm) = small_lm(3);
    let ids = [1, 4, 5, 6, 7, 2];
    let mask = [false, false, false, true, true, true];
    let tape = Tape::new();
    let loss = lm.masked_loss(&tape, &store, None, &ids, &mask).unwrap().value().item();
    let logits = lm.forward(&tape, &store, None, &ids).unwrap().value();
    let mut want = 0.0;
    for t in 3..6 {
        let row = logits.row(t - 1);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        want += lse - row[ids[t]];
    }
    assert_abs_diff_eq!(loss, want / 3.0, epsilon = 1e-12);

    let tape = Tape::new();
    let last = lm.masked_loss(&tape, &store, None, &ids, &[false, false, false, false, false, true]).unwrap();
    let row = logits.row(4);
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    assert_abs_diff_eq!(last.value().item(), lse - row[2], epsilon = 1e-12);
    assert!(lm.masked_loss(&tape, &store, None, &ids, &[false; 6]).is_err());
    assert!(lm.masked_loss(&tape, &store, None, &ids, &[true; 6]).is_err());
}

#[test]
fn greedy_decode_respects_budget_and_context() {
    let (store, lm) = small_lm(5);
    let out = greedy_decode(&lm, &store, None, &[1, 4], 3).unwrap();
    assert!(out.len() <= 3);
    assert_eq!(out, greedy_decode(&lm, &store, None, &[1, 4], 3).unwrap());
    let long = greedy_decode(&lm, &store, None, &[1; 15], 10).unwrap();
    assert!(long.len() <= 1);
    assert!(greedy_decode(&lm, &store, None, &[1], 0).is_err());
}

#[test]
fn translating_by_one_patch_permutes_patch_embeddings() {
    let cfg = VisionConfig::default();
    let p = cfg.patch;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = VisionEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, "vision", Group::Vision), cfg).unwrap();
    let (h, w) = (2 * p, 3 * p);
    let texture = |y: usize, x: usize, c: usize| ((y * 31 + x * 17 + c * 7) % 23) as f32 / 23.0;
    let a = Image::from_fn(h, w, 3, texture).unwrap();
    let b = Image::from_fn(h, w, 3, |y, x, c| texture(y, (x + p) % w, c)).unwrap();
    let embed = |img: &Image| {
        let tape = Tape::new();
        let patches = tape.input(patchify::<f64>(img, p).unwrap());
        (*enc.patch_embed(&tape, &store, patches).unwrap().value()).clone()
    };
    let (ea, eb) = (embed(&a), embed(&b));
    let (gh, gw) = (h / p, w / p);
    for py in 0..gh {
        for px in 0..gw {
            assert_eq!(eb.row(py * gw + px), ea.row(py * gw + (px + 1) % gw), "patch ({py},{px})");
        }
    }
}

#[test]
fn disabling_qava_leaves_only_general_tokens() {
    let vocab = Vocab::build(QuestionTemplates::default().iter().map(|(_, q)| q));
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.qava_enabled = false;
    let plain = TrustVl::<f64>::new(cfg.clone(), vocab.clone(), 1).unwrap();
    cfg.qava_enabled = true;
    let full = TrustVl::<f64>::new(cfg, vocab, 1).unwrap();
    assert!(!plain.store.groups().contains(&Group::Qava));
    let img = ImageInput::Pixels(Image::from_fn(32, 32, 3, |y, x, _| ((x + y) % 5) as f32 / 5.0).unwrap());
    let a = plain.prefix_tensor(&img, DistortionType::Visual).unwrap();
    let b = full.prefix_tensor(&img, DistortionType::Visual).unwrap();
    assert_eq!(a.rows(), plain.net.vision.num_patches(32, 32).unwrap());
    assert_eq!(b.rows(), a.rows() + full.cfg.qava.num_tokens);
}
