//! Two-topic toy corpus with known context structure.
//!
//! Each sentence draws all of its words from one of two disjoint word lists.
//! Within a topic, word frequencies are Zipf-like and consecutive words often
//! follow a fixed successor pattern, so both local and sentence-level cues
//! exist for a model to pick up.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::rng::{stream, Purpose};

#[derive(Debug, Clone)]
pub struct TwoTopicSpec {
    pub words_per_topic: usize,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next word is the fixed successor of the previous one.
    pub successor_prob: f64,
}

impl Default for TwoTopicSpec {
    fn default() -> Self {
        TwoTopicSpec {
            words_per_topic: 200,
            sentences: 2000,
            min_len: 8,
            max_len: 16,
            successor_prob: 0.3,
        }
    }
}

pub fn topic_word(topic: usize, index: usize) -> String {
    let prefix = if topic == 0 { "alpha" } else { "beta" };
    format!("{prefix}{index}")
}

/// Sentences plus the topic each was drawn from.
pub fn two_topic_corpus(spec: &TwoTopicSpec, seed: u64) -> Vec<(usize, String)> {
    let mut rng = stream(seed, Purpose::Synthetic, &[]);
    let weights: Vec<f64> = (0..spec.words_per_topic)
        .map(|r| 1.0 / (r as f64 + 1.0).powf(0.8))
        .collect();
    let zipf = WeightedIndex::new(&weights).expect("positive weights");
    (0..spec.sentences)
        .map(|_| {
            let topic = rng.gen_range(0..2);
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut words = Vec::with_capacity(len);
            let mut prev = zipf.sample(&mut rng);
            words.push(topic_word(topic, prev));
            for _ in 1..len {
                prev = if rng.gen::<f64>() < spec.successor_prob {
                    (prev + 1) % spec.words_per_topic
                } else {
                    zipf.sample(&mut rng)
                };
                words.push(topic_word(topic, prev));
            }
            (topic, words.join(" "))
        })
        .collect()
}

/// `count` same-topic word pairs among the most frequent words, as
/// tab-separated lines.
pub fn co_occurrent_pairs(count: usize) -> Vec<(String, String)> {
    (0..count)
        .map(|i| {
            let topic = i % 2;
            let a = i / 2;
            (topic_word(topic, a), topic_word(topic, a + 1))
        })
        .collect()
}
