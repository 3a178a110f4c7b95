use memprobe::attacks::{
    lowercase_attack, loss_attack, min_k_prob, neighbor_attack, smaller_model_attack, zlib_entropy, NeighborSet,
};
use memprobe::corpus::toy::sentences;
use memprobe::lm::{loss, pretrain, ModelConfig, ModelState, TrainHyper};
use memprobe::Sample;

fn trained() -> ModelState {
    let cfg = ModelConfig { n_layers: 1, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 128, seed: 5, ..Default::default() };
    let corpus = sentences(60, 1);
    pretrain(cfg, &corpus, &TrainHyper { steps: 15, batch_size: 8, ..Default::default() }).unwrap()
}

fn random_texts(n: usize) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    (0..n)
        .map(|_| {
            let len = r.random_range(1..90);
            (0..len).map(|_| r.random_range(0x20u8..0x7f) as char).collect()
        })
        .collect()
}

#[test]
fn min_k_at_100_is_negative_loss() {
    let m = trained();
    for (i, t) in random_texts(50).into_iter().enumerate() {
        let s = Sample::new(format!("r{i}"), t, None).unwrap();
        let mk = min_k_prob(&m, &s, 100.0).unwrap().score;
        let l = loss_attack(&m, &s).unwrap().score;
        assert!((mk - l).abs() < 1e-9, "{}: {mk} vs {l}", s.text);
        assert!((l + loss(&m, &s.text).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn self_neighbors_score_zero() {
    let m = trained();
    let s = Sample::from_text("The owl read the map.", None).unwrap();
    let set = NeighborSet { original_id: s.id.clone(), neighbors: vec![s.text.clone(); 7], generator_seed: 0 };
    assert_eq!(neighbor_attack(&m, &s, &set).unwrap().score, 0.0);
}

#[test]
fn lowercase_of_lowercase_is_minus_one() {
    let m = trained();
    for t in ["already lower case.", "x", "numbers 123 and ünïcode"] {
        let s = Sample::from_text(t, None).unwrap();
        assert_eq!(lowercase_attack(&m, &s).unwrap().score, -1.0);
    }
}

#[test]
fn reference_equal_to_target_is_minus_one() {
    let m = trained();
    let s = Sample::from_text("A quiet Tuesday.", None).unwrap();
    assert_eq!(smaller_model_attack(&m, &m.clone(), &s).unwrap().score, -1.0);
}

#[test]
fn zero_model_loss_is_log_vocab() {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_seq_len: 64, ..Default::default() };
    let m = ModelState::zeros(cfg.clone()).unwrap();
    for t in ["a", "hello world", "ÿ€ multi-byte"] {
        assert!((loss(&m, t).unwrap() - (cfg.vocab_size as f64).ln()).abs() < 1e-9);
    }
}

/// Compressed lengths from CPython's `len(zlib.compress(s.encode(), 6))`.
#[test]
fn zlib_lengths_match_reference_implementation() {
    let cases = [
        ("a".repeat(128), 12),
        ("The quick brown fox jumps over the lazy dog.".to_string(), 51),
        (String::new(), 8),
        ("abcabcabcabcabcabc".to_string(), 13),
        ("héllo wörld héllo wörld".to_string(), 25),
        ("My sister found the tiny key of Rumi behind the church last winter.".to_string(), 69),
    ];
    for (text, bytes) in cases {
        assert_eq!(zlib_entropy(&text), 8.0 * bytes as f64, "{text:?}");
    }
}
