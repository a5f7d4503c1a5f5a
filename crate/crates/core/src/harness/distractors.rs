//! Unrelated trivia used to push scenario events out of the recent-turn window.

use crate::text::count_tokens;

pub const POOL: &[&str] = &[
    "How many moons does Mars have?",
    "Which planet in our solar system spins on its side?",
    "What is the tallest volcano known in the solar system?",
    "Which element has the chemical symbol Fe?",
    "In which year did the first crewed moon landing happen?",
    "What is the longest river in South America?",
    "Which composer wrote the Goldberg Variations?",
    "How many strings does a standard violin have?",
    "What is the capital city of Mongolia?",
    "Which gas makes up most of the air on Earth?",
    "Who painted the ceiling of the Sistine Chapel?",
    "What is the hardest natural mineral?",
    "Which ocean is the deepest on the planet?",
    "How many bones are in an adult human skeleton?",
    "What is the smallest prime number greater than fifty?",
    "Which country has the most time zones?",
    "What does a seismograph measure?",
    "Which metal is liquid at room temperature?",
    "Who proposed the theory of general relativity?",
    "How many sides does a dodecagon have?",
    "What is the largest desert in Asia?",
    "Which bird can fly backwards?",
    "What is the boiling point of water in Fahrenheit at sea level?",
    "Which mountain range separates Europe from Asia?",
    "What year did the Berlin Wall fall?",
    "Which planet has the shortest orbital period?",
    "What is the main ingredient of traditional guacamole?",
    "How many players are on a rugby union team?",
    "Which language has the most native speakers?",
    "What is the speed of light in a vacuum, roughly?",
    "Which instrument did Miles Davis play?",
    "What is the chemical formula for table salt?",
];

/// Deterministic cycling source of distractor queries.
#[derive(Debug, Clone, Default)]
pub struct Distractors {
    next: usize,
}

impl Distractors {
    pub fn new() -> Self {
        Distractors::default()
    }

    pub fn next_query(&mut self) -> &'static str {
        let q = POOL[self.next % POOL.len()];
        self.next += 1;
        q
    }

    /// Queries whose combined token count first reaches `span_tokens`.
    pub fn span(&mut self, span_tokens: usize) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut tokens = 0;
        while tokens < span_tokens {
            let q = self.next_query();
            tokens += count_tokens(q);
            out.push(q);
        }
        out
    }
}
