//! Synthetic dialogs with a planted sentiment/act dependency.
//!
//! Acts follow a Markov chain. The sentiment of an utterance depends on the
//! previous utterance's sentiment and its own act: an Agreement copies the
//! previous sentiment, a Disagreement flips Positive and Negative, anything
//! else draws a fresh sentiment. A `noise` fraction of sentiments is then
//! redrawn at random. Tokens mix act cue words, sentiment cue words and filler,
//! so the text is informative about both labels without giving them away.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Dialog, LabelVocab, Utterance};
use crate::error::{Error, Result};

pub const NEGATIVE: usize = 0;
pub const NEUTRAL: usize = 1;
pub const POSITIVE: usize = 2;

pub const STATEMENT: usize = 0;
pub const QUESTION: usize = 1;
pub const AGREEMENT: usize = 2;
pub const DISAGREEMENT: usize = 3;

const ACT_START: [f64; 4] = [0.55, 0.45, 0.0, 0.0];
const ACT_TRANSITIONS: [[f64; 4]; 4] = [
    [0.30, 0.20, 0.25, 0.25],
    [0.50, 0.10, 0.20, 0.20],
    [0.35, 0.25, 0.20, 0.20],
    [0.35, 0.25, 0.20, 0.20],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_dialogs: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub n_speakers: usize,
    pub vocab_size: usize,
    /// probability that a sentiment label is redrawn uniformly after the rule
    pub noise: f64,
    /// per-token probability of drawing from the utterance's act cue words
    pub act_cue_rate: f64,
    /// per-token probability of drawing from the utterance's sentiment cue words
    pub sentiment_cue_rate: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_dialogs: 100,
            min_utterances: 4,
            max_utterances: 10,
            n_speakers: 2,
            vocab_size: 200,
            noise: 0.1,
            act_cue_rate: 0.4,
            sentiment_cue_rate: 0.25,
            min_tokens: 3,
            max_tokens: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_speakers < 2 {
            return bad(format!(
                "n_speakers must be at least 2, got {}",
                self.n_speakers
            ));
        }
        if self.min_utterances < 2
            || self.max_utterances > 30
            || self.min_utterances > self.max_utterances
        {
            return bad(format!(
                "utterance range {}..={} must lie within 2..=30",
                self.min_utterances, self.max_utterances
            ));
        }
        if self.vocab_size < 20 {
            return bad(format!(
                "vocab_size must be at least 20, got {}",
                self.vocab_size
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            ));
        }
        for (name, p) in [
            ("noise", self.noise),
            ("act_cue_rate", self.act_cue_rate),
            ("sentiment_cue_rate", self.sentiment_cue_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if self.act_cue_rate + self.sentiment_cue_rate > 1.0 {
            return bad("cue rates must sum to at most 1".into());
        }
        Ok(())
    }
}

pub fn synth_labels() -> LabelVocab {
    LabelVocab {
        sentiment_names: vec!["Negative".into(), "Neutral".into(), "Positive".into()],
        act_names: vec![
            "Statement".into(),
            "Question".into(),
            "Agreement".into(),
            "Disagreement".into(),
        ],
        neutral_sentiment: Some(NEUTRAL),
    }
}

/// The sentiment the planted rule assigns before noise.
pub fn planted_sentiment(prev: Option<usize>, act: usize, rng: &mut impl Rng) -> usize {
    match (prev, act) {
        (Some(p), AGREEMENT) => p,
        (Some(NEGATIVE), DISAGREEMENT) => POSITIVE,
        (Some(POSITIVE), DISAGREEMENT) => NEGATIVE,
        (Some(NEUTRAL), DISAGREEMENT) => {
            if rng.random_bool(0.5) {
                NEGATIVE
            } else {
                POSITIVE
            }
        }
        _ => rng.random_range(0..3),
    }
}

struct WordPools {
    acts: Vec<std::ops::Range<usize>>,
    sentiments: Vec<std::ops::Range<usize>>,
    filler: std::ops::Range<usize>,
}

impl WordPools {
    fn new(vocab_size: usize) -> Self {
        let pool = vocab_size / 10;
        let acts = (0..4).map(|k| k * pool..(k + 1) * pool).collect();
        let sentiments = (4..7).map(|k| k * pool..(k + 1) * pool).collect();
        Self {
            acts,
            sentiments,
            filler: 7 * pool..vocab_size,
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn gen_synthetic(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pools = WordPools::new(config.vocab_size);
    let mut dialogs = Vec::with_capacity(config.n_dialogs);

    for k in 0..config.n_dialogs {
        let n = rng.random_range(config.min_utterances..=config.max_utterances);
        let mut utterances = Vec::with_capacity(n);
        let mut raw_speaker = 0usize;
        let mut prev: Option<(usize, usize)> = None;
        for i in 0..n {
            if i > 0 && rng.random_bool(0.8) {
                let shift = rng.random_range(1..config.n_speakers);
                raw_speaker = (raw_speaker + shift) % config.n_speakers;
            }
            let act = match prev {
                None => sample_categorical(&ACT_START, &mut rng),
                Some((_, a)) => sample_categorical(&ACT_TRANSITIONS[a], &mut rng),
            };
            let mut sentiment = planted_sentiment(prev.map(|p| p.0), act, &mut rng);
            if rng.random_bool(config.noise) {
                sentiment = rng.random_range(0..3);
            }
            let len = rng.random_range(config.min_tokens..=config.max_tokens);
            let tokens = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    let range = if u < config.act_cue_rate {
                        pools.acts[act].clone()
                    } else if u < config.act_cue_rate + config.sentiment_cue_rate {
                        pools.sentiments[sentiment].clone()
                    } else {
                        pools.filler.clone()
                    };
                    format!("w{}", rng.random_range(range))
                })
                .collect();
            utterances.push(Utterance {
                speaker: raw_speaker,
                tokens,
                sentiment,
                act,
            });
            prev = Some((sentiment, act));
        }
        renumber_speakers(&mut utterances);
        dialogs.push(Dialog {
            id: format!("syn-{}-{k}", config.seed),
            utterances,
        });
    }
    Ok(Corpus {
        dialogs,
        labels: synth_labels(),
    })
}

fn renumber_speakers(utterances: &mut [Utterance]) {
    let mut order: Vec<usize> = Vec::new();
    for u in utterances.iter_mut() {
        let id = match order.iter().position(|&s| s == u.speaker) {
            Some(p) => p + 1,
            None => {
                order.push(u.speaker);
                order.len()
            }
        };
        u.speaker = id;
    }
}
