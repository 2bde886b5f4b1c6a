use secrepair_core::checkpoint::{load_checkpoint, save_checkpoint};
use secrepair_core::corpus::synthesize_pairs;
use secrepair_core::dataset::{build_records, default_seed_instructions, split_dataset, LossMode};
use secrepair_core::decode::{beam_search, greedy, DecodeConfig};
use secrepair_core::model::{CausalLM, ModelConfig};
use secrepair_core::tokenizer::train_bpe;
use secrepair_core::trainer::{pack_splits, train_supervised, TrainConfig};

fn tiny(vocab_size: usize) -> ModelConfig {
    ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, vocab_size, max_len: 256 }
}

#[test]
fn pairs_to_checkpoint_and_back() {
    let pairs = synthesize_pairs(10, 3);
    let records = build_records(&pairs, &default_seed_instructions(), 3).unwrap().records;
    let manifest = split_dataset(&records, 3).unwrap();
    let mut all: Vec<usize> = manifest.train.iter().chain(&manifest.valid).chain(&manifest.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..records.len()).collect::<Vec<_>>());

    let texts: Vec<String> = records.iter().flat_map(|r| [r.prompt_text(), r.output.clone()]).collect();
    let tok = train_bpe(&texts, 300).unwrap();
    for r in &records {
        assert_eq!(tok.decode(&tok.encode(&r.output)).unwrap(), r.output);
    }

    let (train, valid) = pack_splits(&records, &manifest, &tok, 256, LossMode::OutputOnly).unwrap();
    let mut model = CausalLM::new(tiny(tok.vocab_size()), 3).unwrap();
    let cfg = TrainConfig { max_steps: Some(4), ..TrainConfig::default() };
    let curve = train_supervised(&mut model, &train, &valid, &cfg).unwrap();
    assert_eq!(curve.steps(), 4);
    assert!(curve.train_losses().iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.srpk");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let prompt = train[0].prompt();
    let dcfg = DecodeConfig { beam_size: 3, max_new_tokens: 6, ..DecodeConfig::default() };
    assert_eq!(greedy(&model, prompt, &dcfg).unwrap(), greedy(&loaded, prompt, &dcfg).unwrap());
    assert_eq!(beam_search(&model, prompt, &dcfg).unwrap(), beam_search(&loaded, prompt, &dcfg).unwrap());
}
