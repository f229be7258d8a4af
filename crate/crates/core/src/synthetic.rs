//! Small generated corpora with a known conversational structure, used for
//! smoke tests, overfitting checks and metric sanity experiments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DialogueSample;

pub const TOPICS: [&str; 8] = ["tea", "jazz", "chess", "rain", "bikes", "maps", "soup", "kites"];

/// Each reply follows the previous template in a fixed cycle, and every
/// template mentions the current topic.
pub const TEMPLATES: [&str; 6] = [
    "{t} ?",
    "yes , {t} .",
    "why {t} ?",
    "{t} is fun !",
    "more {t} .",
    "love {t} .",
];

fn fill(template: &str, topic: &str) -> String {
    template.replace("{t}", topic)
}

/// Dialogues of `min_len..=max_len` utterances, each about one topic and
/// walking the template cycle from a random starting phase.
pub fn template_dialogues(n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic = *TOPICS.choose(&mut rng).expect("topics");
            let phase = rng.random_range(0..TEMPLATES.len());
            let len = rng.random_range(min_len..=max_len);
            let texts: Vec<String> = (0..len)
                .map(|k| fill(TEMPLATES[(phase + k) % TEMPLATES.len()], topic))
                .collect();
            DialogueSample::alternating(&texts)
        })
        .collect()
}

/// Like [`template_dialogues`], but at one random turn the speaker announces
/// a new topic (`now <topic> .`) and the rest of the dialogue follows it.
pub fn topic_shift_dialogues(n: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut topic = *TOPICS.choose(&mut rng).expect("topics");
            let phase = rng.random_range(0..TEMPLATES.len());
            let len = rng.random_range(min_len.max(3)..=max_len.max(3));
            let shift_at = rng.random_range(1..len - 1);
            let mut texts = Vec::with_capacity(len);
            for k in 0..len {
                if k == shift_at {
                    let next = loop {
                        let t = *TOPICS.choose(&mut rng).expect("topics");
                        if t != topic {
                            break t;
                        }
                    };
                    topic = next;
                    texts.push(format!("now {topic} ."));
                } else {
                    texts.push(fill(TEMPLATES[(phase + k) % TEMPLATES.len()], topic));
                }
            }
            DialogueSample::alternating(&texts)
        })
        .collect()
}
