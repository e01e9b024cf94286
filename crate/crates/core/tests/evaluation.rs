mod common;

use common::oracle;
use fadvlp::evaluation::{
    bleu4, caption_metrics, cider, crossmodal_protocol, feedback_ranks, macro_f1, rouge_l, Direction,
    ProtocolParams, RetrievalGallery,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_gallery(n: usize, d: usize, seed: u64) -> RetrievalGallery {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RetrievalGallery {
        ids: (0..n as u64).collect(),
        categories: (0..n).map(|i| format!("c{}", i % 3)).collect(),
        subcategories: (0..n).map(|i| format!("s{}", i % 6)).collect(),
        images: (0..n).map(|_| unit(&mut rng, d)).collect(),
        texts: (0..n).map(|_| unit(&mut rng, d)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn caption_metrics_match_second_implementation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, r) = oracle::caption_fixture(&mut rng);
        prop_assert!((bleu4(&h, &r) - oracle::bleu4(&h, &r)).abs() < 1e-9);
        prop_assert!((rouge_l(&h, &r) - oracle::rouge_l(&h, &r)).abs() < 1e-9);
        prop_assert!((cider(&h, &r) - oracle::cider(&h, &r)).abs() < 1e-9);
    }

    #[test]
    fn macro_f1_matches_confusion_matrix(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, p, c) = oracle::label_fixture(&mut rng);
        prop_assert!((macro_f1(&g, &p, c).unwrap() - oracle::macro_f1(&g, &p, c)).abs() < 1e-9);
    }

    #[test]
    fn scores_are_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, r) = oracle::caption_fixture(&mut rng);
        let b = bleu4(&h, &r);
        let l = rouge_l(&h, &r);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        prop_assert!(cider(&h, &r) >= 0.0);
    }
}

#[test]
fn identical_captions_score_one() {
    let caps = ["a red floral wrap dress", "blue denim jeans with a slim fit"];
    let refs: Vec<Vec<&str>> = caps.iter().map(|c| vec![*c]).collect();
    let s = caption_metrics(&caps, &refs).unwrap();
    assert!((s.bleu4 - 1.0).abs() < 1e-12 && (s.rouge_l - 1.0).abs() < 1e-12);
}

#[test]
fn random_embeddings_sit_at_chance() {
    let g = random_gallery(600, 16, 3);
    let p = ProtocolParams {
        seed: 11,
        ..ProtocolParams::default()
    };
    let queries: Vec<u64> = (0..400).collect();
    let r = crossmodal_protocol(&g, &queries, Direction::T2i, &p).unwrap();
    assert_eq!(r.draws, 2000);
    assert!((r.recall[&1] - 100.0 / 101.0).abs() < 1.0, "{:?}", r.recall);
    assert!((r.recall[&10] - 1000.0 / 101.0).abs() < 3.0, "{:?}", r.recall);
}

#[test]
fn perfect_embeddings_rank_first() {
    let mut g = random_gallery(300, 16, 5);
    g.texts = g.images.clone();
    let queries: Vec<u64> = (0..50).collect();
    let r = crossmodal_protocol(&g, &queries, Direction::I2t, &ProtocolParams::default()).unwrap();
    assert_eq!(r.recall[&1], 100.0);
}

#[test]
fn feedback_rank_counts_same_category_only() {
    let g = random_gallery(30, 8, 9);
    // querying with the target's own image embedding ranks it first
    let ranks = feedback_ranks(&g, &[g.images[3].clone()], &[0], &[3]).unwrap();
    assert_eq!(ranks, vec![1]);
    assert!(feedback_ranks(&g, &[g.images[1].clone()], &[0], &[1]).is_err());
}
