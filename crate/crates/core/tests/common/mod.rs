#![allow(dead_code)]

pub mod grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmqa::dataset::synth::{qa_corpus_with, QaSynthConfig};
use ssmqa::dataset::{ChatTemplate, QaRecord};
use ssmqa::lora::{attach, LoraConfig};
use ssmqa::ssm::{ModelConfig, ModelVariant, SsmModel};
use ssmqa::tensor::Scalar;
use ssmqa::tokenizer::Vocab;
use ssmqa::trainer::{SpanHead, TrainConfig};

pub fn records(n: usize, seed: u64) -> Vec<QaRecord> {
    qa_corpus_with(&QaSynthConfig {
        n,
        seed,
        max_fillers_before: 1,
        max_fillers_after: 1,
        ..QaSynthConfig::default()
    })
}

pub fn vocab(records: &[QaRecord]) -> Vocab {
    let mut texts: Vec<String> = records
        .iter()
        .flat_map(|r| [r.context.clone(), r.question.clone(), r.answer.clone()])
        .collect();
    texts.extend(ChatTemplate::default().literal_text());
    Vocab::train(texts.iter().map(String::as_str), 512).unwrap()
}

pub fn small_config(variant: ModelVariant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        variant,
        n_layers: 2,
        d_model: 16,
        state_size: 4,
        vocab_size,
        max_seq_len: 512,
        head_dim: 8,
        attn_heads: 2,
        swa_window: 8,
        chunk_len: 16,
        init_seed: 1,
        ..ModelConfig::default()
    }
}

/// A small model with adapters and, when asked, a span head.
pub fn adapted<T: Scalar>(variant: ModelVariant, vocab_size: usize, lora: &LoraConfig, span: bool) -> SsmModel<T> {
    let mut model = SsmModel::new(small_config(variant, vocab_size)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    attach(&mut model, lora, &mut rng).unwrap();
    if span {
        SpanHead::attach(&mut model, &mut rng).unwrap();
    }
    model
}

pub fn train_config(span: bool) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        batch_size: 4,
        accumulation_steps: 1,
        epochs: 1,
        warmup_steps: 2,
        max_seq_len: 512,
        lm_objective: true,
        span_head: span,
        lora: LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
        },
        ..TrainConfig::default()
    }
}
