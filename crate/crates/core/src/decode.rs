//! Autoregressive generation: greedy, temperature sampling and beam search.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::log_softmax;
use crate::model::{CausalLM, DecodeState, ModelError};
use crate::tokenizer::EOS;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Token that ends a hypothesis; `None` decodes to the length cap.
    pub eos_id: Option<u32>,
    /// Rank finished beams by mean instead of summed log-probability.
    pub length_norm: bool,
    /// Score beam extensions with `log_softmax(logits / temperature)`.
    pub beam_temperature: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            temperature: 0.5,
            max_new_tokens: 64,
            seed: 0,
            eos_id: Some(EOS),
            length_norm: false,
            beam_temperature: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::InvalidConfig(format!("temperature {} must be finite and non-negative", self.temperature)));
        }
        Ok(())
    }
}

/// Anything that yields next-token logits incrementally.
pub trait StepModel {
    type State: Clone;

    /// Longest sequence (prompt plus generated tokens) the model accepts.
    fn max_len(&self) -> usize;

    /// Consumes the prompt and returns the logits for the first new token.
    fn start(&self, prompt: &[u32]) -> Result<(Self::State, Vec<f64>), DecodeError>;

    /// Appends `id` and returns the logits for the following token.
    fn advance(&self, state: &mut Self::State, id: u32) -> Result<Vec<f64>, DecodeError>;
}

impl StepModel for CausalLM {
    type State = DecodeState;

    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn start(&self, prompt: &[u32]) -> Result<(DecodeState, Vec<f64>), DecodeError> {
        let (state, out) = self.start_decode(prompt)?;
        Ok((state, out.logits))
    }

    fn advance(&self, state: &mut DecodeState, id: u32) -> Result<Vec<f64>, DecodeError> {
        Ok(self.step(state, id)?.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, including the terminating EOS if one was produced.
    pub ids: Vec<u32>,
    /// Σ log p(token | prefix) under the untempered model.
    pub logprob_sum: f64,
    /// Ranking score: `logprob_sum`, or its tempered / length-normalized form.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated tokens without the trailing EOS.
    pub fn content(&self, eos_id: Option<u32>) -> &[u32] {
        match (self.ids.last(), eos_id) {
            (Some(&last), Some(eos)) if last == eos => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

fn length_cap<M: StepModel>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<usize, DecodeError> {
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    cfg.validate()?;
    Ok(cfg.max_new_tokens.min(model.max_len().saturating_sub(prompt.len())))
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Generates one token at a time with `pick`, which sees the raw logits.
fn generate<M: StepModel>(
    model: &M,
    prompt: &[u32],
    cfg: &DecodeConfig,
    mut pick: impl FnMut(&[f64]) -> u32,
) -> Result<BeamHypothesis, DecodeError> {
    let cap = length_cap(model, prompt, cfg)?;
    let (mut state, mut logits) = model.start(prompt)?;
    let mut hyp = BeamHypothesis { ids: Vec::new(), logprob_sum: 0.0, score: 0.0, finished: false };
    while hyp.ids.len() < cap {
        let id = pick(&logits);
        hyp.logprob_sum += log_softmax(&logits, 1.0)[id as usize];
        hyp.ids.push(id);
        if Some(id) == cfg.eos_id || hyp.ids.len() == cap {
            hyp.finished = true;
            break;
        }
        logits = model.advance(&mut state, id)?;
    }
    hyp.score = hyp.logprob_sum;
    Ok(hyp)
}

/// Argmax decoding.
pub fn greedy<M: StepModel>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<BeamHypothesis, DecodeError> {
    generate(model, prompt, cfg, |logits| argmax(&log_softmax(logits, 1.0)) as u32)
}

/// Samples from `softmax(logits / temperature)` with the caller's generator;
/// temperature 0 is greedy.
pub fn sample_with_rng<M: StepModel, R: Rng>(model: &M, prompt: &[u32], cfg: &DecodeConfig, rng: &mut R) -> Result<BeamHypothesis, DecodeError> {
    if cfg.temperature == 0.0 {
        return greedy(model, prompt, cfg);
    }
    generate(model, prompt, cfg, |logits| {
        let probs: Vec<f64> = log_softmax(logits, cfg.temperature).iter().map(|l| l.exp()).collect();
        WeightedIndex::new(&probs).expect("softmax weights are positive").sample(rng) as u32
    })
}

/// Temperature sampling seeded by `cfg.seed`.
pub fn sample_temperature<M: StepModel>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<Vec<u32>, DecodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(sample_with_rng(model, prompt, cfg, &mut rng)?.ids)
}

struct LiveBeam<S> {
    ids: Vec<u32>,
    logprob_sum: f64,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

fn final_score(h: &BeamHypothesis, cfg: &DecodeConfig) -> f64 {
    if cfg.length_norm && !h.ids.is_empty() {
        h.score / h.ids.len() as f64
    } else {
        h.score
    }
}

/// Beam search over cumulative log-probability. Each step keeps the best
/// `beam_size` extensions of the live beams (ties: lower token id, then
/// earlier parent); hypotheses ending in EOS or at the length cap retire to a
/// pool. Returns up to `beam_size` hypotheses, best first.
pub fn beam_search<M: StepModel>(model: &M, prompt: &[u32], cfg: &DecodeConfig) -> Result<Vec<BeamHypothesis>, DecodeError> {
    let cap = length_cap(model, prompt, cfg)?;
    if cap == 0 {
        return Ok(vec![BeamHypothesis { ids: Vec::new(), logprob_sum: 0.0, score: 0.0, finished: true }]);
    }
    let scoring_temp = if cfg.beam_temperature && cfg.temperature > 0.0 { cfg.temperature } else { 1.0 };
    let (state, logits) = model.start(prompt)?;
    let mut live = vec![LiveBeam { ids: Vec::new(), logprob_sum: 0.0, score: 0.0, state, logits }];
    let mut pool: Vec<BeamHypothesis> = Vec::new();

    for step in 0..cap {
        // (score, token, parent, token logprob)
        let mut cands: Vec<(f64, u32, usize, f64)> = Vec::new();
        for (parent, beam) in live.iter().enumerate() {
            let raw = log_softmax(&beam.logits, 1.0);
            let scored = if scoring_temp == 1.0 { raw.clone() } else { log_softmax(&beam.logits, scoring_temp) };
            for (tok, (&lp, &s)) in raw.iter().zip(&scored).enumerate() {
                cands.push((beam.score + s, tok as u32, parent, lp));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::with_capacity(cands.len());
        for (score, tok, parent, lp) in cands {
            let beam = &live[parent];
            let mut ids = beam.ids.clone();
            ids.push(tok);
            let logprob_sum = beam.logprob_sum + lp;
            if Some(tok) == cfg.eos_id || step + 1 == cap {
                pool.push(BeamHypothesis { ids, logprob_sum, score, finished: true });
            } else {
                let mut state = beam.state.clone();
                let logits = model.advance(&mut state, tok)?;
                next.push(LiveBeam { ids, logprob_sum, score, state, logits });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Without length normalization scores only fall, so a full pool whose
        // worst member beats every live beam is final.
        if !cfg.length_norm && pool.len() >= cfg.beam_size {
            let mut scores: Vec<f64> = pool.iter().map(|h| h.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let best_live = live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
            if best_live < scores[cfg.beam_size - 1] {
                break;
            }
        }
    }
    pool.sort_by(|a, b| final_score(b, cfg).total_cmp(&final_score(a, cfg)).then_with(|| a.ids.cmp(&b.ids)));
    pool.truncate(cfg.beam_size);
    Ok(pool)
}

/// Σ log p(generated | prompt) recomputed with one full forward pass.
pub fn rescore(model: &CausalLM, prompt: &[u32], generated: &[u32]) -> Result<f64, ModelError> {
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(generated);
    let logits = model.forward_logits(&ids)?;
    let mut sum = 0.0;
    for (k, &tok) in generated.iter().enumerate() {
        sum += log_softmax(logits.row(prompt.len() + k - 1), 1.0)[tok as usize];
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Logits drawn from a generator seeded by the whole prefix.
    struct PrefixTable {
        vocab: usize,
        seed: u64,
    }

    impl StepModel for PrefixTable {
        type State = Vec<u32>;

        fn max_len(&self) -> usize {
            usize::MAX
        }

        fn start(&self, prompt: &[u32]) -> Result<(Vec<u32>, Vec<f64>), DecodeError> {
            Ok((prompt.to_vec(), self.logits(prompt)))
        }

        fn advance(&self, state: &mut Vec<u32>, id: u32) -> Result<Vec<f64>, DecodeError> {
            state.push(id);
            Ok(self.logits(state))
        }
    }

    impl PrefixTable {
        fn logits(&self, prefix: &[u32]) -> Vec<f64> {
            let key = prefix.iter().fold(self.seed, |h, &t| h.wrapping_mul(1_000_003).wrapping_add(t as u64 + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect()
        }
    }

    /// Fixed logits regardless of prefix.
    struct Constant(Vec<f64>);

    impl StepModel for Constant {
        type State = ();
        fn max_len(&self) -> usize {
            usize::MAX
        }
        fn start(&self, _: &[u32]) -> Result<((), Vec<f64>), DecodeError> {
            Ok(((), self.0.clone()))
        }
        fn advance(&self, _: &mut (), _: u32) -> Result<Vec<f64>, DecodeError> {
            Ok(self.0.clone())
        }
    }

    fn table_cfg(beam: usize) -> DecodeConfig {
        DecodeConfig { beam_size: beam, max_new_tokens: 4, eos_id: None, ..DecodeConfig::default() }
    }

    fn exhaustive_best(m: &PrefixTable, prompt: &[u32], len: usize) -> (Vec<u32>, f64) {
        fn rec(m: &PrefixTable, prefix: &mut Vec<u32>, left: usize, acc: f64, gen: &mut Vec<u32>, best: &mut (Vec<u32>, f64)) {
            if left == 0 {
                if acc > best.1 {
                    *best = (gen.clone(), acc);
                }
                return;
            }
            let lp = log_softmax(&m.logits(prefix), 1.0);
            for t in 0..m.vocab as u32 {
                prefix.push(t);
                gen.push(t);
                rec(m, prefix, left - 1, acc + lp[t as usize], gen, best);
                gen.pop();
                prefix.pop();
            }
        }
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        rec(m, &mut prompt.to_vec(), len, 0.0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn full_width_beam_finds_exhaustive_argmax() {
        for seed in 0..20 {
            let m = PrefixTable { vocab: 5, seed };
            let (best, lp) = exhaustive_best(&m, &[1], 4);
            let beams = beam_search(&m, &[1], &table_cfg(625)).unwrap();
            assert_eq!(beams[0].ids, best, "seed {seed}");
            assert!((beams[0].logprob_sum - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..50 {
            let m = PrefixTable { vocab: 7, seed };
            let cfg = DecodeConfig { max_new_tokens: 6, ..table_cfg(1) };
            let b = beam_search(&m, &[2, 3], &cfg).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].ids, greedy(&m, &[2, 3], &cfg).unwrap().ids);
        }
    }

    #[test]
    fn beam_scores_are_sorted_and_eos_retires() {
        let m = PrefixTable { vocab: 6, seed: 4 };
        let cfg = DecodeConfig { beam_size: 5, max_new_tokens: 8, eos_id: Some(0), ..DecodeConfig::default() };
        let beams = beam_search(&m, &[1], &cfg).unwrap();
        assert_eq!(beams.len(), 5);
        assert!(beams.windows(2).all(|w| w[0].score >= w[1].score));
        for b in &beams {
            assert!(b.finished);
            assert!(b.ids.last() == Some(&0) || b.ids.len() == 8);
            assert!(!b.ids[..b.ids.len() - 1].contains(&0));
        }
    }

    #[test]
    fn ties_prefer_lower_token_ids() {
        let m = Constant(vec![0.0; 4]);
        let cfg = DecodeConfig { beam_size: 3, max_new_tokens: 2, eos_id: None, ..DecodeConfig::default() };
        let ids: Vec<_> = beam_search(&m, &[1], &cfg).unwrap().into_iter().map(|h| h.ids).collect();
        assert_eq!(ids, vec![vec![0, 0], vec![1, 0], vec![2, 0]]);
        assert_eq!(greedy(&m, &[1], &cfg).unwrap().ids, vec![0, 0]);
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let k = 5;
        let m = Constant(vec![0.0; k]);
        let cfg = DecodeConfig { temperature: 1.0, max_new_tokens: 1, eos_id: None, ..DecodeConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[sample_with_rng(&m, &[1], &cfg, &mut rng).unwrap().ids[0] as usize] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn low_temperature_on_peaked_logits_is_greedy() {
        // Top token is ten times as likely as each of the others at T = 1.
        let mut logits = vec![0.0; 6];
        logits[3] = 10f64.ln();
        let m = Constant(logits);
        let greedy_ids = greedy(&m, &[1], &table_cfg(1)).unwrap().ids;
        for seed in 0..100 {
            let cfg = DecodeConfig { temperature: 0.01, seed, ..table_cfg(1) };
            assert_eq!(sample_temperature(&m, &[1], &cfg).unwrap(), greedy_ids);
        }
    }

    #[test]
    fn zero_temperature_redirects_to_greedy_and_seed_is_deterministic() {
        let m = PrefixTable { vocab: 9, seed: 1 };
        let cfg = DecodeConfig { temperature: 0.0, ..table_cfg(1) };
        assert_eq!(sample_temperature(&m, &[1], &cfg).unwrap(), greedy(&m, &[1], &cfg).unwrap().ids);
        let hot = DecodeConfig { temperature: 1.5, seed: 3, ..table_cfg(1) };
        assert_eq!(sample_temperature(&m, &[1], &hot).unwrap(), sample_temperature(&m, &[1], &hot).unwrap());
    }

    #[test]
    fn empty_prompt_and_bad_config_are_errors() {
        let m = Constant(vec![0.0; 3]);
        assert_eq!(beam_search(&m, &[], &table_cfg(2)).unwrap_err(), DecodeError::EmptyPrompt);
        assert!(matches!(beam_search(&m, &[1], &table_cfg(0)), Err(DecodeError::InvalidConfig(_))));
        let cold = DecodeConfig { temperature: -1.0, ..table_cfg(1) };
        assert!(sample_temperature(&m, &[1], &cold).is_err());
    }

    #[test]
    fn beam_logprobs_rescore_exactly_on_the_model() {
        let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: 10, max_len: 12 };
        let mut model = CausalLM::new(cfg, 8).unwrap();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            *p += ((i * 7919 % 101) as f64 - 50.0) * 0.004;
        }
        let prompt = [1, 5, 6, 2];
        let dc = DecodeConfig { beam_size: 4, max_new_tokens: 20, ..DecodeConfig::default() };
        let beams = beam_search(&model, &prompt, &dc).unwrap();
        assert_eq!(beams.len(), 4);
        for b in &beams {
            assert!(prompt.len() + b.ids.len() <= 12);
            assert_eq!(b.logprob_sum, rescore(&model, &prompt, &b.ids).unwrap());
        }
        let g = greedy(&model, &prompt, &dc).unwrap();
        assert_eq!(g.logprob_sum, rescore(&model, &prompt, &g.ids).unwrap());
    }

    #[test]
    fn tempered_beam_scoring_keeps_raw_logprobs() {
        let m = PrefixTable { vocab: 5, seed: 9 };
        let cfg = DecodeConfig { beam_temperature: true, temperature: 0.5, ..table_cfg(3) };
        for b in beam_search(&m, &[1], &cfg).unwrap() {
            let mut prefix = vec![1];
            let mut raw = 0.0;
            for &t in &b.ids {
                raw += log_softmax(&m.logits(&prefix), 1.0)[t as usize];
                prefix.push(t);
            }
            assert!((b.logprob_sum - raw).abs() < 1e-12);
            assert!(b.score != b.logprob_sum);
        }
    }
}
