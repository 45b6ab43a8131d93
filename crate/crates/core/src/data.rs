//! Dialog corpora: in-memory model, line-delimited JSON format, vocabularies.
//!
//! A corpus file holds one JSON object per line. The optional first line is
//! a header declaring the label sets:
//!
//! ```text
//! {"sentiment_labels":["Negative","Neutral","Positive"],"act_labels":["Statement","Question"],"neutral_sentiment":"Neutral"}
//! {"id":"d0","utterances":[{"speaker":1,"tokens":["hi"],"sentiment":"Neutral","act":"Statement"}]}
//! ```
//!
//! Without a header, label sets accumulate in order of first appearance.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    /// 1-based, dense within the dialog
    pub speaker: usize,
    pub tokens: Vec<String>,
    pub sentiment: usize,
    pub act: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.utterances.iter().map(|u| u.speaker).max().unwrap_or(0)
    }

    pub fn sentiments(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.sentiment).collect()
    }

    pub fn acts(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.act).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub sentiment_names: Vec<String>,
    pub act_names: Vec<String>,
    pub neutral_sentiment: Option<usize>,
}

impl LabelVocab {
    pub fn new(sentiments: &[&str], acts: &[&str], neutral: Option<&str>) -> Result<Self> {
        let sentiment_names: Vec<String> = sentiments.iter().map(|s| s.to_string()).collect();
        let neutral_sentiment = match neutral {
            Some(n) => Some(sentiment_names.iter().position(|s| s == n).ok_or_else(|| {
                Error::Validation(format!("neutral label {n} is not a sentiment label"))
            })?),
            None => None,
        };
        let v = Self {
            sentiment_names,
            act_names: acts.iter().map(|s| s.to_string()).collect(),
            neutral_sentiment,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn n_sentiments(&self) -> usize {
        self.sentiment_names.len()
    }

    pub fn n_acts(&self) -> usize {
        self.act_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentiment_names.is_empty() && self.act_names.is_empty()
    }

    pub fn sentiment_id(&self, name: &str) -> Option<usize> {
        self.sentiment_names.iter().position(|s| s == name)
    }

    pub fn act_id(&self, name: &str) -> Option<usize> {
        self.act_names.iter().position(|s| s == name)
    }

    pub fn validate(&self) -> Result<()> {
        for (task, names) in [
            ("sentiment", &self.sentiment_names),
            ("act", &self.act_names),
        ] {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if !seen.insert(n) {
                    return Err(Error::Validation(format!("duplicate {task} label {n}")));
                }
            }
        }
        if let Some(n) = self.neutral_sentiment {
            if n >= self.sentiment_names.len() {
                return Err(Error::Validation(format!("neutral index {n} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub dialogs: Vec<Dialog>,
    pub labels: LabelVocab,
}

impl Corpus {
    /// Re-expresses every label id against `target`, matching by name.
    /// Fails if a label used here does not exist in `target`.
    pub fn remap_labels(&self, target: &LabelVocab) -> Result<Corpus> {
        let unknown = |task: &str, name: &str| {
            Error::Validation(format!("{task} label {name} is unknown to the model"))
        };
        let mut dialogs = self.dialogs.clone();
        for u in dialogs.iter_mut().flat_map(|d| d.utterances.iter_mut()) {
            let s = &self.labels.sentiment_names[u.sentiment];
            let a = &self.labels.act_names[u.act];
            u.sentiment = target
                .sentiment_id(s)
                .ok_or_else(|| unknown("sentiment", s))?;
            u.act = target.act_id(a).ok_or_else(|| unknown("act", a))?;
        }
        Ok(Corpus {
            dialogs,
            labels: target.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    sentiment_labels: Vec<String>,
    act_labels: Vec<String>,
    neutral_sentiment: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogLine {
    id: String,
    utterances: Vec<UtteranceLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceLine {
    speaker: usize,
    tokens: Vec<String>,
    sentiment: String,
    act: String,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let file = File::open(path.as_ref())?;
    read_corpus(BufReader::new(file))
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut labels = LabelVocab::default();
    let mut declared = false;
    let mut dialogs = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        };
        if value.get("sentiment_labels").is_some() {
            if declared || !dialogs.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "header must be the first line".into(),
                });
            }
            let h: HeaderLine = serde_json::from_value(value).map_err(parse_err)?;
            let sents: Vec<&str> = h.sentiment_labels.iter().map(String::as_str).collect();
            let acts: Vec<&str> = h.act_labels.iter().map(String::as_str).collect();
            labels =
                LabelVocab::new(&sents, &acts, h.neutral_sentiment.as_deref()).map_err(|e| {
                    Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    }
                })?;
            declared = true;
            continue;
        }
        let d: DialogLine = serde_json::from_value(value).map_err(parse_err)?;
        dialogs.push(resolve_dialog(d, &mut labels, declared, line_no)?);
    }

    if !declared {
        labels.neutral_sentiment = labels
            .sentiment_names
            .iter()
            .position(|s| s.eq_ignore_ascii_case("neutral"));
        if dialogs.is_empty() {
            log::warn!("corpus is empty");
        }
    }
    Ok(Corpus { dialogs, labels })
}

fn resolve_dialog(
    d: DialogLine,
    labels: &mut LabelVocab,
    declared: bool,
    line: usize,
) -> Result<Dialog> {
    if d.utterances.is_empty() {
        return Err(Error::Validation(format!(
            "line {line}: dialog {} has no utterances",
            d.id
        )));
    }
    // speaker ids renumbered 1..=S in order of first appearance
    let mut speaker_map: HashMap<usize, usize> = HashMap::new();
    let mut utterances = Vec::with_capacity(d.utterances.len());
    for (k, u) in d.utterances.into_iter().enumerate() {
        if u.speaker == 0 {
            return Err(Error::Validation(format!(
                "line {line}: utterance {k} has speaker 0"
            )));
        }
        if u.tokens.is_empty() {
            return Err(Error::Validation(format!(
                "line {line}: utterance {k} has no tokens"
            )));
        }
        let next = speaker_map.len() + 1;
        let speaker = *speaker_map.entry(u.speaker).or_insert(next);
        let sentiment = resolve_label(
            &mut labels.sentiment_names,
            &u.sentiment,
            declared,
            "sentiment",
            line,
        )?;
        let act = resolve_label(&mut labels.act_names, &u.act, declared, "act", line)?;
        utterances.push(Utterance {
            speaker,
            tokens: u.tokens,
            sentiment,
            act,
        });
    }
    Ok(Dialog {
        id: d.id,
        utterances,
    })
}

fn resolve_label(
    names: &mut Vec<String>,
    name: &str,
    declared: bool,
    task: &str,
    line: usize,
) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == name) {
        return Ok(i);
    }
    if declared {
        return Err(Error::Validation(format!(
            "line {line}: unknown {task} label {name}"
        )));
    }
    names.push(name.to_string());
    Ok(names.len() - 1)
}

pub fn write_corpus(writer: impl Write, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(writer);
    let labels = &corpus.labels;
    let header = HeaderLine {
        sentiment_labels: labels.sentiment_names.clone(),
        act_labels: labels.act_names.clone(),
        neutral_sentiment: labels
            .neutral_sentiment
            .map(|i| labels.sentiment_names[i].clone()),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for d in &corpus.dialogs {
        let line = DialogLine {
            id: d.id.clone(),
            utterances: d
                .utterances
                .iter()
                .map(|u| {
                    let name = |names: &[String], i: usize, task: &str| {
                        names.get(i).cloned().ok_or_else(|| {
                            Error::Validation(format!("{task} label {i} not in vocabulary"))
                        })
                    };
                    Ok(UtteranceLine {
                        speaker: u.speaker,
                        tokens: u.tokens.clone(),
                        sentiment: name(&labels.sentiment_names, u.sentiment, "sentiment")?,
                        act: name(&labels.act_names, u.act, "act")?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    write_corpus(File::create(path.as_ref())?, corpus)
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Token → id map. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    /// Rebuilds a vocabulary from its id-ordered token list (as stored in
    /// checkpoints), which must start with the two reserved entries.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" {
            return Err(Error::Validation(
                "token list must start with <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Tokens seen fewer than `min_count` times map to UNK. Ids are assigned by
/// descending frequency, ties broken lexicographically.
pub fn build_token_vocab(dialogs: &[Dialog], min_count: usize) -> Result<TokenVocab> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in dialogs {
        for u in &d.utterances {
            for t in &u.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    TokenVocab::from_tokens(tokens)
}

/// Seeded shuffle followed by a split into `(train, valid, test)` with the
/// given valid/test fractions.
pub fn split_dialogs(
    dialogs: &[Dialog],
    valid_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<Dialog>, Vec<Dialog>, Vec<Dialog>)> {
    if !(0.0..=1.0).contains(&valid_frac)
        || !(0.0..=1.0).contains(&test_frac)
        || valid_frac + test_frac > 1.0
    {
        return Err(Error::Config(format!(
            "bad split fractions {valid_frac}, {test_frac}"
        )));
    }
    let mut shuffled = dialogs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_valid = (n as f64 * valid_frac).round() as usize;
    let n_test = ((n as f64 * test_frac).round() as usize).min(n - n_valid);
    let test = shuffled.split_off(n - n_test);
    let valid = shuffled.split_off(n - n_test - n_valid);
    Ok((shuffled, valid, test))
}
