#![allow(dead_code)]

use aes_core::corpus::{Corpus, EssayRecord, ScoreVector, SCORE_GRID};
use aes_core::model::ModelConfig;
use aes_core::tokenizer::{build_vocab, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "a", "educação", "é", "um", "direito", "de", "todos", "e", "dever", "do", "estado",
    "sociedade", "brasileira", "precisa", "combater", "desigualdade", "social", "no", "país",
    "porque", "os", "jovens", "merecem", "oportunidades", "reais", "para", "crescer", "com",
    "dignidade", "governo", "deve", "investir", "escolas", "públicas", "saúde", "cultura",
];

const THEMES: &[&str] = &[
    "Desafios da educação no Brasil",
    "O estigma associado às doenças mentais",
    "Democratização do acesso ao cinema",
];

/// Deterministic synthetic essays with random grid scores.
pub fn synthetic_corpus(n: usize, words_per_essay: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let essay: Vec<&str> = (0..words_per_essay)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect();
            let mut scores = [0i64; 5];
            for s in &mut scores {
                *s = SCORE_GRID[rng.random_range(0..SCORE_GRID.len())] as i64;
            }
            EssayRecord {
                id: format!("essay-{i}"),
                prompt: THEMES[i % THEMES.len()].to_string(),
                essay: format!("{}.", essay.join(" ")),
                scores: ScoreVector::new(scores).unwrap(),
            }
        })
        .collect();
    Corpus::from_records(records).unwrap()
}

/// Short prompts and essays that fit whole inside a 24-token window, so
/// every record encodes to a distinct input.
pub fn compact_corpus(n: usize, words_per_essay: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let essay: Vec<&str> = (0..words_per_essay)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect();
            let mut scores = [0i64; 5];
            for s in &mut scores {
                *s = SCORE_GRID[rng.random_range(0..SCORE_GRID.len())] as i64;
            }
            EssayRecord {
                id: format!("short-{i}"),
                prompt: ["educação", "saúde"][i % 2].to_string(),
                essay: essay.join(" "),
                scores: ScoreVector::new(scores).unwrap(),
            }
        })
        .collect();
    Corpus::from_records(records).unwrap()
}

/// N_L=2, H=16, A=2, F=32.
pub fn toy_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden: 16,
        layers: 2,
        heads: 2,
        intermediate: 32,
        max_positions: max_len,
        ..ModelConfig::base(vocab_size)
    }
}

pub fn toy_vocab(corpus: &Corpus, size: usize) -> Vocab {
    build_vocab(corpus, size, 1).unwrap()
}
