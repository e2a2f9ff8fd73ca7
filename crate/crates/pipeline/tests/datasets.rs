use std::path::PathBuf;

use proptest::prelude::*;
use trustvl_core::{DistortionType, ImageInput, Label};
use trustvl_pipeline::evidence::{cosine, embed_image, embed_text};
use trustvl_pipeline::synth::{split, synthesize_dataset, SynthConfig};
use trustvl_pipeline::{load_dataset, ClaimRecord, ClassCounts, CorpusIndex};

#[test]
fn balanced_fixture_loads_fifteen_of_each() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/balanced_15_15.jsonl");
    let ds = load_dataset(&path).unwrap();
    assert_eq!(ds.len(), 30);
    assert_eq!(ds.counts(), ClassCounts { real: 15, fake: 15 });
}

/// Brightest pixel intensities in descending order, plus a bias term.
fn probe_features(r: &ClaimRecord, k: usize) -> Vec<f64> {
    let ImageInput::Pixels(img) = r.image.resolve().unwrap() else {
        panic!("{} has no pixels", r.id)
    };
    let mut lum: Vec<f64> = img.data().chunks(3).map(|p| p.iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0).collect();
    lum.sort_by(|a, b| b.total_cmp(a));
    let mut f: Vec<f64> = lum[..k].to_vec();
    f.push(1.0);
    f
}

#[test]
fn linear_probe_finds_the_planted_block() {
    let records = synthesize_dataset(DistortionType::Visual, 400, 21, &SynthConfig::default()).unwrap();
    let (train, test) = split(&records, 0.75);
    let xy = |rs: &[ClaimRecord]| -> Vec<(Vec<f64>, f64)> {
        rs.iter().map(|r| (probe_features(r, 8), if r.label == Label::Fake { 1.0 } else { 0.0 })).collect()
    };
    let (train, test) = (xy(&train), xy(&test));
    let mut w = vec![0.0; train[0].0.len()];
    for _ in 0..500 {
        let mut g = vec![0.0; w.len()];
        for (x, y) in &train {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += (p - y) * xi / train.len() as f64;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 2.0 * gi;
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}

fn top_by_score(scores: Vec<(f64, String)>, k: usize) -> Vec<String> {
    let mut s = scores;
    s.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    s.into_iter().take(k).map(|x| x.1).collect()
}

const WORDS: [&str; 8] = ["river", "flood", "market", "opened", "storm", "harbor", "team", "won"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..4).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retrieval_matches_brute_force(
        captions in prop::collection::vec(sentence(), 1..30),
        texts in prop::collection::vec((sentence(), prop::collection::vec(-2i32..3, 3)), 1..30),
        claim in sentence(),
        rows in prop::collection::vec(prop::collection::vec(0i32..3, 3), 1..3),
        m in 1usize..6,
        n in 1usize..6,
    ) {
        let mut idx = CorpusIndex::new();
        for (i, c) in captions.iter().enumerate().rev() {
            idx.add_image(format!("i{i:03}"), c.clone()).unwrap();
        }
        for (i, (t, f)) in texts.iter().enumerate() {
            let mut f: Vec<f64> = f.iter().map(|&v| f64::from(v)).collect();
            if f.iter().all(|&v| v == 0.0) {
                f[0] = 1.0;
            }
            idx.add_text(format!("t{i:03}"), t.clone(), &f).unwrap();
        }
        let q = embed_text(&claim).unwrap();
        let want = top_by_score(idx.images.iter().map(|e| (cosine(&q, &e.caption_embedding), e.id.clone())).collect(), m);
        let got: Vec<String> = idx.retrieve_direct(&claim, m).unwrap().into_iter().map(|d| d.id).collect();
        prop_assert_eq!(got, want);

        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| f64::from(v) + 0.5).collect()).collect();
        let qi = embed_image(&rows).unwrap();
        let want = top_by_score(idx.texts.iter().map(|e| (cosine(&qi, &e.image_embedding), e.id.clone())).collect(), n);
        let got: Vec<String> = idx.retrieve_inverse(&rows, n).unwrap().into_iter().map(|d| d.id).collect();
        prop_assert_eq!(got, want);
    }
}
