//! A seeded generator of simple English-like prose.
//!
//! Sentences come from a small grammar over real English words. Every noun
//! prefers its own adjectives and verbs, every verb its own objects and every
//! preposition its own complements, so words have distinct distributions and
//! the text has structure a language model can learn.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed;

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "my", "our", "her", "his", "one", "no"];
const NAMES: &[&str] = &[
    "anna", "peter", "maria", "john", "sofia", "david", "clara", "thomas", "emma", "paul", "julia", "mark",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "small", "big", "green", "red", "quiet", "happy", "cold", "dark", "bright", "tired",
    "strange", "gentle", "brave", "little", "long", "warm", "wild", "empty", "heavy", "soft", "proud", "poor",
    "rich", "clever", "sad", "busy", "golden", "broken", "white", "black",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "king", "queen", "river", "house", "garden", "child", "horse", "ship", "tree", "bird",
    "door", "window", "road", "city", "village", "mountain", "letter", "book", "table", "bread", "water",
    "farmer", "teacher", "doctor", "soldier", "sailor", "baker", "girl", "boy", "man", "woman", "friend",
    "mother", "father", "sister", "brother", "stone", "flower", "apple", "song", "story", "wind", "fire",
    "field", "forest", "bridge", "wall", "lamp", "boat", "coat", "hat", "cup", "key", "box", "rope", "bell",
    "clock", "sheep",
];
const TRANSITIVE: &[&str] = &[
    "saw", "found", "loved", "watched", "carried", "opened", "closed", "painted", "followed", "visited",
    "built", "broke", "cleaned", "moved", "bought", "sold", "lost", "kept", "heard", "called", "fed",
    "helped", "washed", "pulled", "pushed", "drew", "read", "wrote", "touched", "brought",
];
const INTRANSITIVE: &[&str] = &[
    "slept", "laughed", "waited", "sang", "cried", "smiled", "walked", "ran", "fell", "danced", "stayed",
    "listened", "worked", "rested", "shouted",
];
const PREPOSITIONS: &[&str] = &["near", "under", "behind", "with", "beside", "across", "inside", "over", "by", "from"];
const ADVERBS: &[&str] = &[
    "slowly", "quietly", "today", "again", "often", "never", "once", "always", "soon", "yesterday",
    "carefully", "gladly",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so"];

/// Zipf-like weights `1 / (rank + 1)` over `n` items, ranks shuffled.
fn zipf(n: usize, rng: &mut ChaCha8Rng) -> WeightedIndex<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    WeightedIndex::new(ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0))).expect("positive weights")
}

/// `k` preferred items out of `n`, each preference Zipf-weighted.
struct Preference {
    items: Vec<usize>,
    weights: WeightedIndex<f64>,
}

impl Preference {
    fn new(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all.truncate(k);
        Preference {
            items: all,
            weights: zipf(k, rng),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        self.items[self.weights.sample(rng)]
    }
}

struct Grammar {
    determiners: WeightedIndex<f64>,
    names: WeightedIndex<f64>,
    nouns: WeightedIndex<f64>,
    adverbs: WeightedIndex<f64>,
    prepositions: WeightedIndex<f64>,
    noun_adjectives: Vec<Preference>,
    noun_transitive: Vec<Preference>,
    noun_intransitive: Vec<Preference>,
    verb_objects: Vec<Preference>,
    prep_objects: Vec<Preference>,
}

impl Grammar {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let nouns = NOUNS.len();
        Grammar {
            determiners: zipf(DETERMINERS.len(), rng),
            names: zipf(NAMES.len(), rng),
            nouns: zipf(nouns, rng),
            adverbs: zipf(ADVERBS.len(), rng),
            prepositions: zipf(PREPOSITIONS.len(), rng),
            noun_adjectives: (0..nouns).map(|_| Preference::new(ADJECTIVES.len(), 6, rng)).collect(),
            noun_transitive: (0..nouns).map(|_| Preference::new(TRANSITIVE.len(), 8, rng)).collect(),
            noun_intransitive: (0..nouns).map(|_| Preference::new(INTRANSITIVE.len(), 4, rng)).collect(),
            verb_objects: (0..TRANSITIVE.len()).map(|_| Preference::new(nouns, 12, rng)).collect(),
            prep_objects: (0..PREPOSITIONS.len()).map(|_| Preference::new(nouns, 12, rng)).collect(),
        }
    }

    fn noun_phrase(&self, noun: usize, out: &mut Vec<&'static str>, rng: &mut ChaCha8Rng) {
        out.push(DETERMINERS[self.determiners.sample(rng)]);
        if rng.random_bool(0.4) {
            out.push(ADJECTIVES[self.noun_adjectives[noun].sample(rng)]);
        }
        out.push(NOUNS[noun]);
    }

    fn clause(&self, out: &mut Vec<&'static str>, rng: &mut ChaCha8Rng) {
        let subject = self.nouns.sample(rng);
        if rng.random_bool(0.15) {
            out.push(NAMES[self.names.sample(rng)]);
        } else {
            self.noun_phrase(subject, out, rng);
        }
        if rng.random_bool(0.7) {
            let verb = self.noun_transitive[subject].sample(rng);
            out.push(TRANSITIVE[verb]);
            let object = self.verb_objects[verb].sample(rng);
            self.noun_phrase(object, out, rng);
        } else {
            out.push(INTRANSITIVE[self.noun_intransitive[subject].sample(rng)]);
        }
        if rng.random_bool(0.35) {
            let prep = self.prepositions.sample(rng);
            out.push(PREPOSITIONS[prep]);
            let noun = self.prep_objects[prep].sample(rng);
            self.noun_phrase(noun, out, rng);
        }
        if rng.random_bool(0.2) {
            out.push(ADVERBS[self.adverbs.sample(rng)]);
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words = Vec::new();
        self.clause(&mut words, rng);
        if rng.random_bool(0.2) {
            words.push(CONJUNCTIONS[rng.random_range(0..CONJUNCTIONS.len())]);
            self.clause(&mut words, rng);
        }
        let mut s = words.join(" ");
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            s = first.to_uppercase().chain(chars).collect();
        }
        s.push(if rng.random_bool(0.08) { '!' } else { '.' });
        s
    }
}

/// Generates documents of 4 to 12 sentences until roughly `target_words`
/// words have been produced. The grammar (word preferences) depends only on
/// `seed`, so two calls with equal seeds describe the same "language".
pub fn toy_documents(seed: u64, target_words: usize) -> Vec<String> {
    let grammar = Grammar::new(&mut seed::derived_rng(seed, "toy-grammar"));
    let mut rng = seed::derived_rng(seed, "toy-text");
    let mut docs = Vec::new();
    let mut words = 0;
    while words < target_words {
        let n = rng.random_range(4..=12);
        let sentences: Vec<String> = (0..n).map(|_| grammar.sentence(&mut rng)).collect();
        let doc = sentences.join(" ");
        words += doc.split(' ').count();
        docs.push(doc);
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = toy_documents(3, 2000);
        assert_eq!(a, toy_documents(3, 2000));
        assert_ne!(a, toy_documents(4, 2000));
        let words: usize = a.iter().map(|d| d.split(' ').count()).sum();
        assert!((2000..2200).contains(&words), "{words}");
    }

    #[test]
    fn sentences_are_capitalised_and_terminated() {
        for doc in toy_documents(1, 500) {
            for (sentence, _) in super::super::split_sentences(&doc) {
                assert!(sentence.chars().next().unwrap().is_uppercase());
                assert!(sentence.ends_with('.') || sentence.ends_with('!'));
            }
        }
    }
}
