//! Embedding-similarity reward and a small pairwise-trained reward scorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{dot, l2_norm};
use crate::model::{CausalLM, ModelError};
use crate::tokenizer::BOS;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("cannot score an empty token sequence")]
    EmptyInput,
    #[error("token id {id} is outside the scorer vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("preferred and rejected comments are identical")]
    IdenticalPair,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Maps a token sequence to one vector per token.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, RewardError>;
}

/// Contextual embeddings: final hidden states of a frozen model fed
/// `BOS` followed by the tokens; the `BOS` row is dropped.
pub struct HiddenStateEmbedder<'a> {
    pub model: &'a CausalLM,
}

impl TokenEmbedder for HiddenStateEmbedder<'_> {
    fn embed(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(tokens);
        let h = self.model.hidden_states(&ids)?;
        Ok(h.iter_rows().skip(1).map(|r| r.to_vec()).collect())
    }
}

/// Context-free embeddings looked up in a `[vocab × dim]` table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEmbedder {
    pub dim: usize,
    pub table: Vec<f64>,
}

impl TokenEmbedder for TableEmbedder {
    fn embed(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
        let vocab_size = self.table.len() / self.dim;
        tokens
            .iter()
            .map(|&t| {
                let t_usize = t as usize;
                if t_usize >= vocab_size {
                    return Err(RewardError::TokenOutOfRange { id: t, vocab_size });
                }
                Ok(self.table[t_usize * self.dim..(t_usize + 1) * self.dim].to_vec())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Greedy max-cosine matching between two sets of token embeddings. Recall
/// averages, over reference tokens, the best cosine to any candidate token;
/// precision does the same over candidate tokens. F1 is 0 when precision
/// plus recall is not positive, which negative cosines can produce.
pub fn semantic_score_from_embeddings(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> Result<SemanticScore, RewardError> {
    if reference.is_empty() || candidate.is_empty() {
        return Err(RewardError::EmptyInput);
    }
    let r: Vec<Vec<f64>> = reference.iter().map(|v| unit(v)).collect();
    let c: Vec<Vec<f64>> = candidate.iter().map(|v| unit(v)).collect();
    let sims: Vec<Vec<f64>> = r.iter().map(|ri| c.iter().map(|cj| dot(ri, cj)).collect()).collect();
    let recall = sims.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / r.len() as f64;
    let precision = (0..c.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / c.len() as f64;
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(SemanticScore { precision, recall, f1 })
}

/// Similarity of a generated comment to the ground truth under `embedder`.
pub fn semantic_reward<E: TokenEmbedder + ?Sized>(reference: &[u32], candidate: &[u32], embedder: &E) -> Result<SemanticScore, RewardError> {
    if reference.is_empty() || candidate.is_empty() {
        return Err(RewardError::EmptyInput);
    }
    semantic_score_from_embeddings(&embedder.embed(reference)?, &embedder.embed(candidate)?)
}

/// Scores a (description, comment) pair as
/// `w · [mean(E[d]) ⊙ mean(E[c]); mean(E[c])] + b` over a learned table `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardScorer {
    vocab_size: usize,
    dim: usize,
    table: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RewardScorer {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        let table = (0..vocab_size * dim).map(|_| normal.sample(&mut rng)).collect();
        let weights = (0..2 * dim).map(|_| normal.sample(&mut rng)).collect();
        Self { vocab_size, dim, table, weights, bias: 0.0 }
    }

    fn mean_embedding(&self, tokens: &[u32]) -> Result<Vec<f64>, RewardError> {
        if tokens.is_empty() {
            return Err(RewardError::EmptyInput);
        }
        let mut m = vec![0.0; self.dim];
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(RewardError::TokenOutOfRange { id: t, vocab_size: self.vocab_size });
            }
            for (mi, e) in m.iter_mut().zip(&self.table[t as usize * self.dim..][..self.dim]) {
                *mi += e;
            }
        }
        m.iter_mut().for_each(|x| *x /= tokens.len() as f64);
        Ok(m)
    }

    pub fn score(&self, description: &[u32], comment: &[u32]) -> Result<f64, RewardError> {
        let u = self.mean_embedding(description)?;
        let v = self.mean_embedding(comment)?;
        let (w1, w2) = self.weights.split_at(self.dim);
        Ok((0..self.dim).map(|k| w1[k] * u[k] * v[k] + w2[k] * v[k]).sum::<f64>() + self.bias)
    }

    /// Adds `scale × ∂score/∂θ` into the gradient buffers.
    fn accumulate_grad(&self, description: &[u32], comment: &[u32], scale: f64, g_table: &mut [f64], g_w: &mut [f64]) -> Result<(), RewardError> {
        let u = self.mean_embedding(description)?;
        let v = self.mean_embedding(comment)?;
        let (w1, w2) = self.weights.split_at(self.dim);
        for k in 0..self.dim {
            g_w[k] += scale * u[k] * v[k];
            g_w[self.dim + k] += scale * v[k];
        }
        let du = scale / description.len() as f64;
        for &t in description {
            for k in 0..self.dim {
                g_table[t as usize * self.dim + k] += du * w1[k] * v[k];
            }
        }
        let dv = scale / comment.len() as f64;
        for &t in comment {
            for k in 0..self.dim {
                g_table[t as usize * self.dim + k] += dv * (w1[k] * u[k] + w2[k]);
            }
        }
        Ok(())
    }
}

/// Pairwise logistic loss `-ln σ(r(d, preferred) − r(d, rejected))`.
pub fn preference_loss(scorer: &RewardScorer, description: &[u32], preferred: &[u32], rejected: &[u32]) -> Result<f64, RewardError> {
    let margin = scorer.score(description, preferred)? - scorer.score(description, rejected)?;
    Ok(softplus(-margin))
}

/// Evaluates the pairwise loss, then takes one gradient-descent step on it.
/// Returns the loss before the step.
pub fn preference_loss_step(
    scorer: &mut RewardScorer,
    description: &[u32],
    preferred: &[u32],
    rejected: &[u32],
    lr: f64,
) -> Result<f64, RewardError> {
    if preferred == rejected {
        return Err(RewardError::IdenticalPair);
    }
    let margin = scorer.score(description, preferred)? - scorer.score(description, rejected)?;
    let loss = softplus(-margin);
    let dmargin = -sigmoid(-margin);
    let mut g_table = vec![0.0; scorer.table.len()];
    let mut g_w = vec![0.0; scorer.weights.len()];
    scorer.accumulate_grad(description, preferred, dmargin, &mut g_table, &mut g_w)?;
    scorer.accumulate_grad(description, rejected, -dmargin, &mut g_table, &mut g_w)?;
    for (p, g) in scorer.table.iter_mut().zip(&g_table) {
        *p -= lr * g;
    }
    for (p, g) in scorer.weights.iter_mut().zip(&g_w) {
        *p -= lr * g;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn table(vocab: usize, dim: usize, seed: u64) -> TableEmbedder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TableEmbedder { dim, table: (0..vocab * dim).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    struct Scaled<'a>(&'a dyn TokenEmbedder, f64);

    impl TokenEmbedder for Scaled<'_> {
        fn embed(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, RewardError> {
            Ok(self.0.embed(tokens)?.into_iter().map(|v| v.into_iter().map(|x| x * self.1).collect()).collect())
        }
    }

    fn brute(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> (f64, f64) {
        let cos = |a: &[f64], b: &[f64]| {
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            ab / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut recall = 0.0;
        for r in reference {
            let mut best = f64::NEG_INFINITY;
            for c in candidate {
                best = best.max(cos(r, c));
            }
            recall += best;
        }
        let mut precision = 0.0;
        for c in candidate {
            let mut best = f64::NEG_INFINITY;
            for r in reference {
                best = best.max(cos(r, c));
            }
            precision += best;
        }
        (precision / candidate.len() as f64, recall / reference.len() as f64)
    }

    #[test]
    fn self_similarity_is_one() {
        let emb = table(20, 8, 1);
        let s = semantic_reward(&[3, 4, 5, 9], &[3, 4, 5, 9], &emb).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_pairwise_cosine_oracle() {
        let emb = table(30, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<u32> = (0..4).map(|_| rng.gen_range(0..30)).collect();
            let b: Vec<u32> = (0..4).map(|_| rng.gen_range(0..30)).collect();
            let s = semantic_reward(&a, &b, &emb).unwrap();
            let (p, r) = brute(&emb.embed(&a).unwrap(), &emb.embed(&b).unwrap());
            assert!((s.precision - p).abs() < 1e-9 && (s.recall - r).abs() < 1e-9);
            let swapped = semantic_reward(&b, &a, &emb).unwrap();
            assert!((swapped.precision - s.recall).abs() < 1e-12);
            assert!((swapped.f1 - s.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_and_permutation_invariance() {
        let emb = table(16, 5, 4);
        let scaled = Scaled(&emb, 7.0);
        let (r, c) = ([1u32, 7, 9, 12], [2u32, 7, 15]);
        let a = semantic_reward(&r, &c, &emb).unwrap();
        let b = semantic_reward(&r, &c, &scaled).unwrap();
        assert!((a.f1 - b.f1).abs() < 1e-12 && (a.recall - b.recall).abs() < 1e-12);
        let p = semantic_reward(&r, &[15, 2, 7], &emb).unwrap();
        assert!((p.recall - a.recall).abs() < 1e-12);
    }

    #[test]
    fn hidden_state_embedder_is_contextual_and_sized() {
        let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 12, max_len: 16 };
        let model = CausalLM::new(cfg, 1).unwrap();
        let emb = HiddenStateEmbedder { model: &model };
        let e = emb.embed(&[5, 6, 7]).unwrap();
        assert_eq!((e.len(), e[0].len()), (3, 8));
        let s = semantic_reward(&[5, 6, 7], &[5, 6, 7], &emb).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-6);
        assert_eq!(semantic_reward(&[], &[5], &emb).unwrap_err(), RewardError::EmptyInput);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let s = RewardScorer::new(10, 4, 1);
        // Same bag of tokens, different order: identical mean embeddings.
        let l = preference_loss(&s, &[1, 2], &[3, 4], &[4, 3]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(softplus(-50.0) < 1e-20);
    }

    #[test]
    fn descent_strictly_increases_margin() {
        let mut s = RewardScorer::new(10, 4, 2);
        let (d, good, bad) = ([1u32, 2, 3], [4u32, 5], [6u32, 7]);
        let margin = |s: &RewardScorer| s.score(&d, &good).unwrap() - s.score(&d, &bad).unwrap();
        let mut prev = margin(&s);
        let mut prev_loss = f64::INFINITY;
        for _ in 0..100 {
            let loss = preference_loss_step(&mut s, &d, &good, &bad, 0.05).unwrap();
            let m = margin(&s);
            assert!(m > prev, "{m} <= {prev}");
            assert!(loss < prev_loss);
            prev = m;
            prev_loss = loss;
        }
        assert_eq!(preference_loss_step(&mut s, &d, &good, &good, 0.1).unwrap_err(), RewardError::IdenticalPair);
    }
}
