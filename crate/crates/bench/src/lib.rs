//! Fixtures shared by the benchmarks.

use aes_core::corpus::{Corpus, EssayRecord, ScoreVector, SCORE_GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "a", "educação", "é", "um", "direito", "de", "todos", "e", "dever", "do", "estado",
    "sociedade", "brasileira", "precisa", "combater", "desigualdade", "social", "no", "país",
    "porque", "os", "jovens", "merecem", "oportunidades", "reais", "para", "crescer", "com",
    "dignidade", "governo", "deve", "investir", "escolas", "públicas", "saúde", "cultura",
];

/// `n` essays of `words` random words each, with random grid scores.
pub fn corpus(n: usize, words: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let essay: Vec<&str> = (0..words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let scores = [0; 5].map(|_: i64| SCORE_GRID[rng.random_range(0..SCORE_GRID.len())] as i64);
            EssayRecord {
                id: i.to_string(),
                prompt: "Desafios da educação no Brasil".into(),
                essay: format!("{}.", essay.join(" ")),
                scores: ScoreVector::new(scores).unwrap(),
            }
        })
        .collect();
    Corpus::from_records(records).unwrap()
}

/// Random rating vectors of length `n` on the competency grid.
pub fn ratings(n: usize, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || (0..n).map(|_| SCORE_GRID[rng.random_range(0..6)]).collect::<Vec<_>>();
    (draw(), draw())
}
