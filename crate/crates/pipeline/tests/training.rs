use std::collections::{BTreeMap, BTreeSet};

use trustvl_core::{DistortionType, Group, ImageInput, LmSample, ModelConfig, TrustVl, Vocab};
use trustvl_pipeline::synth::{conversations, lexicon, SynthConfig};
use trustvl_pipeline::training::mean_loss;
use trustvl_pipeline::{train_stage, StageName, StageSpec, TrainConfig};

fn tiny_model(samples: &[LmSample]) -> TrustVl<f32> {
    let mut texts: Vec<&str> = samples.iter().flat_map(|s| [s.prompt.as_str(), s.response.as_str()]).collect();
    let lex = lexicon();
    texts.extend(lex.iter().map(String::as_str));
    let mut cfg = ModelConfig::desk(0);
    texts.extend(cfg.questions.iter().map(|(_, q)| q));
    let vocab = Vocab::build(texts);
    cfg.llm.vocab_size = vocab.len();
    cfg.llm.llm_dim = 24;
    cfg.llm.heads = 2;
    cfg.llm.ffn_dim = 48;
    cfg.llm.layers = 1;
    cfg.vision.layers = 1;
    cfg.vision.feat_dim = 16;
    cfg.vision.heads = 2;
    cfg.vision.ffn_dim = 32;
    cfg.qava.num_tokens = 4;
    cfg.qava.num_layers = 1;
    cfg.qava.model_dim = 16;
    cfg.qava.heads = 2;
    cfg.qava.ffn_dim = 32;
    TrustVl::new(cfg, vocab, 3).unwrap()
}

fn samples(n: usize) -> Vec<LmSample> {
    conversations(n, 5, &SynthConfig::default())
        .unwrap()
        .into_iter()
        .map(|(img, prompt, response)| LmSample {
            image: ImageInput::Pixels(img),
            distortion: DistortionType::Textual,
            prompt,
            response,
        })
        .collect()
}

fn config(batch: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        lr_llm: lr,
        lr_vision: lr / 10.0,
        ..TrainConfig::default()
    }
}

fn stage3(model: &TrustVl<f32>, cfg: &TrainConfig, epochs: usize) -> StageSpec {
    let mut spec = StageSpec::new(StageName::Stage3, cfg, &model.store.groups());
    spec.epochs = epochs;
    spec
}

#[test]
fn one_full_batch_step_lowers_the_loss() {
    let data = samples(8);
    let mut model = tiny_model(&data);
    let cfg = config(8, 1e-3);
    let before = mean_loss(&model, &data).unwrap();
    let spec = stage3(&model, &cfg, 1);
    let log = train_stage(&mut model, &spec, &data, &cfg, None).unwrap();
    assert_eq!(log.step_losses.len(), 1);
    assert!((log.step_losses[0] - before).abs() < 1e-4 * before, "{} vs {before}", log.step_losses[0]);
    let after = mean_loss(&model, &data).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn overfits_one_batch_in_a_hundred_steps() {
    let data = samples(4);
    let mut model = tiny_model(&data);
    let cfg = config(4, 1e-2);
    let before = mean_loss(&model, &data).unwrap();
    let spec = stage3(&model, &cfg, 100);
    let log = train_stage(&mut model, &spec, &data, &cfg, None).unwrap();
    assert_eq!(log.step_losses.len(), 100);
    let after = mean_loss(&model, &data).unwrap();
    assert!(after < 0.1 * before, "loss {before} -> {after}");
}

#[test]
fn applied_rates_follow_the_stage_spec() {
    let data = samples(4);
    let mut model = tiny_model(&data);
    let cfg = TrainConfig {
        lr_qava: Some(5e-4),
        ..config(2, 1e-3)
    };
    let groups = model.store.groups();
    for (name, trainable) in [
        (StageName::Stage1, BTreeSet::from([Group::Projector])),
        (StageName::Stage2, BTreeSet::from([Group::Projector, Group::Llm])),
        (StageName::Stage3, groups.clone()),
    ] {
        let mut spec = StageSpec::new(name, &cfg, &groups);
        spec.epochs = 1;
        assert_eq!(spec.trainable_groups, trainable);
        let log = train_stage(&mut model, &spec, &data, &cfg, None).unwrap();
        let want: BTreeMap<Group, f64> = trainable
            .iter()
            .map(|g| {
                let lr = match g {
                    Group::Vision => cfg.lr_vision,
                    Group::Qava => 5e-4,
                    _ => 1e-3,
                };
                (*g, lr)
            })
            .collect();
        assert_eq!(log.lr_used, want, "{name:?}");
        assert_eq!(log.max_update.keys().copied().collect::<BTreeSet<_>>(), trainable);
        for (g, u) in &log.max_update {
            assert!(*u > 0.0 && *u <= 10.0 * want[g], "{g:?} moved {u}");
        }
    }
}

#[test]
fn missing_rate_or_empty_data_is_rejected() {
    let data = samples(2);
    let mut model = tiny_model(&data);
    let cfg = config(2, 1e-3);
    let mut spec = stage3(&model, &cfg, 1);
    spec.lr_by_group.remove(&Group::Vision);
    assert!(train_stage(&mut model, &spec, &data, &cfg, None).is_err());
    let spec = stage3(&model, &cfg, 1);
    assert!(train_stage(&mut model, &spec, &[], &cfg, None).is_err());
    let bad = TrainConfig {
        lr_llm: 0.0,
        ..cfg.clone()
    };
    assert!(train_stage(&mut model, &spec, &data, &bad, None).is_err());
}
