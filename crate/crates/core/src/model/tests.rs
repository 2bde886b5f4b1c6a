use super::*;
use crate::dataset::{LossMode, PackedSequence};
use crate::linalg::Matrix;

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: vocab, max_len: 16 }
}

fn perturbed(seed: u64) -> CausalLM {
    // Non-trivial gains and biases so their gradients are exercised.
    let mut m = CausalLM::new(tiny(11), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for p in m.params_mut() {
        *p += normal.sample(&mut rng);
    }
    m
}

#[test]
fn layout_covers_every_parameter_once() {
    let cfg = tiny(11);
    let layout = Layout::new(&cfg);
    let mut next = 0;
    for s in layout.specs() {
        assert_eq!(s.range.start, next);
        assert_eq!(s.range.len(), s.shape.iter().product::<usize>());
        next = s.range.end;
    }
    assert_eq!(next, layout.total());
    let d = 16;
    let per_layer = 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + 32 * d + 32 + d * 32 + d;
    assert_eq!(layout.total(), 11 * d + 16 * d + 2 * per_layer + 2 * d);
}

#[test]
fn config_kv_round_trip() {
    let cfg = ModelConfig::desk(300);
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert!(ModelConfig::from_kv("n_layers=2\n").is_err());
    let bad = ModelConfig { n_heads: 3, ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn init_is_seeded_and_storage_exact() {
    let a = CausalLM::new(tiny(11), 5).unwrap();
    let b = CausalLM::new(tiny(11), 5).unwrap();
    let c = CausalLM::new(tiny(11), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
    assert!(a.params().iter().all(|&p| to_storage(p) == p));
    assert!(a.tensor("layers.1.ln2.gain").unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn shapes_and_input_errors() {
    let m = CausalLM::new(tiny(11), 1).unwrap();
    let cache = m.forward(&[1, 4, 5]).unwrap();
    assert_eq!((cache.logits.rows, cache.logits.cols), (3, 11));
    assert_eq!((cache.hidden.rows, cache.hidden.cols), (3, 16));
    assert_eq!(m.forward(&[]).unwrap_err(), ModelError::EmptyInput);
    assert!(matches!(m.forward(&[11]), Err(ModelError::TokenOutOfRange { id: 11, .. })));
    assert!(matches!(m.forward(&[1; 17]), Err(ModelError::TooLong { len: 17, .. })));
}

#[test]
fn next_token_distribution_sums_to_one() {
    let m = perturbed(2);
    let logits = m.forward_logits(&[1, 2, 3, 4, 5, 6]).unwrap();
    for row in logits.iter_rows() {
        let mut p = row.to_vec();
        crate::linalg::softmax_in_place(&mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn outputs_do_not_depend_on_future_tokens() {
    let m = perturbed(3);
    let a = m.forward(&[1, 5, 6, 7, 8, 9]).unwrap();
    let b = m.forward(&[1, 5, 6, 2, 10, 4]).unwrap();
    for t in 0..3 {
        assert_eq!(a.logits.row(t), b.logits.row(t));
        assert_eq!(a.hidden.row(t), b.hidden.row(t));
    }
    assert_ne!(a.logits.row(3), b.logits.row(3));
}

#[test]
fn zero_embeddings_give_uniform_loss() {
    let mut m = CausalLM::new(tiny(11), 4).unwrap();
    m.tensor_mut("tok_emb").unwrap().fill(0.0);
    let seq = PackedSequence::new(&[1, 4, 2], &[7, 8, 3], LossMode::Full);
    let (loss, _) = m.lm_loss(&seq).unwrap();
    assert!((loss - (11f64).ln()).abs() < 1e-12);
}

#[test]
fn empty_mask_is_rejected() {
    let m = CausalLM::new(tiny(11), 4).unwrap();
    let seq = PackedSequence { ids: vec![1, 2, 3], p: 1, q: 1, loss_mask: vec![false; 3] };
    assert_eq!(m.lm_loss(&seq).unwrap_err(), ModelError::EmptyMask);
}

#[test]
fn incremental_decode_matches_full_forward_bitwise() {
    let m = perturbed(5);
    let ids = [1, 4, 9, 2, 7, 7, 3];
    let full = m.forward(&ids).unwrap();
    let (mut state, first) = m.start_decode(&ids[..3]).unwrap();
    assert_eq!(first.logits, full.logits.row(2));
    assert_eq!(first.hidden, full.hidden.row(2));
    for (t, &id) in ids.iter().enumerate().skip(3) {
        let out = m.step(&mut state, id).unwrap();
        assert_eq!(out.logits, full.logits.row(t));
        assert_eq!(out.hidden, full.hidden.row(t));
    }
    assert_eq!(state.len(), ids.len());
}

// Below the floor, central differences are dominated by rounding noise
// (about machine epsilon × |objective| / step ≈ 1e-10 here).
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

#[test]
fn loss_gradient_matches_central_differences() {
    let mut m = perturbed(7);
    let seq = PackedSequence::new(&[1, 4, 9, 2], &[7, 5, 3], LossMode::Full);
    let (_, grads) = m.lm_loss(&seq).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..m.num_params()).step_by(7) {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let up = m.lm_loss(&seq).unwrap().0;
        m.params_mut()[i] = orig - h;
        let down = m.lm_loss(&seq).unwrap().0;
        m.params_mut()[i] = orig;
        worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * h)));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn hidden_state_gradient_matches_central_differences() {
    let mut m = perturbed(8);
    let ids = [1, 6, 2, 8, 3];
    let weights = Matrix::from_vec(5, 16, (0..80).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect());
    let objective = |m: &CausalLM| -> f64 {
        let h = m.hidden_states(&ids).unwrap();
        h.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
    };
    let cache = m.forward(&ids).unwrap();
    let mut grads = vec![0.0; m.num_params()];
    m.backward(&cache, None, Some(&weights), &mut grads);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..m.num_params()).step_by(5) {
        let orig = m.params()[i];
        m.params_mut()[i] = orig + h;
        let up = objective(&m);
        m.params_mut()[i] = orig - h;
        let down = objective(&m);
        m.params_mut()[i] = orig;
        worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * h)));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn scaled_accumulation_is_linear() {
    let m = perturbed(9);
    let seq = PackedSequence::new(&[1, 4], &[7, 3], LossMode::OutputOnly);
    let mut once = vec![0.0; m.num_params()];
    let mut twice = vec![0.0; m.num_params()];
    let (s1, c1) = m.accumulate_nll_grad(&seq.ids, &seq.loss_mask, 2.0, &mut once).unwrap();
    m.accumulate_nll_grad(&seq.ids, &seq.loss_mask, 1.0, &mut twice).unwrap();
    m.accumulate_nll_grad(&seq.ids, &seq.loss_mask, 1.0, &mut twice).unwrap();
    assert_eq!(c1, 3);
    assert_eq!(m.masked_nll(&seq.ids, &seq.loss_mask).unwrap(), (s1, c1));
    for (a, b) in once.iter().zip(&twice) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}
