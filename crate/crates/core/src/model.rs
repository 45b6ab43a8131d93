//! The DARER pipeline: dialog understanding over the speaker-aware graph,
//! initial estimation, then `T` rounds of dual-task reasoning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Dialog, LabelVocab, TokenVocab};
use crate::error::{Error, Result};
use crate::graph::{build_drtg, build_satg, DrtgScheme, RelGraph, SatgScheme};
use crate::layers::{
    dropout, encode_utterance, project_labels, reborrow, superimpose, BiLstm, Decoder,
    LabelEmbedding, Rsgt,
};
use crate::objectives::{total_loss, LossVars};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarerConfig {
    /// hidden state and label embedding size; must be even
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// word embedding size
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    /// reasoning steps
    #[serde(rename = "T", alias = "steps", default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// largest speaker id the speaker-aware graph can type
    #[serde(default = "default_speakers")]
    pub n_speakers: usize,
    #[serde(default = "yes")]
    pub use_label_embeddings: bool,
    #[serde(default = "yes")]
    pub use_constraint_loss: bool,
    #[serde(default = "yes")]
    pub use_sat_rsgt: bool,
    #[serde(default = "yes")]
    pub use_dtr_rsgt: bool,
    #[serde(default = "yes")]
    pub use_ts_bilstms: bool,
    #[serde(default = "yes")]
    pub temporal_relations_in_satg: bool,
    #[serde(default = "yes")]
    pub temporal_relations_in_drtg: bool,
    /// one TS-BiLSTM pair for all steps instead of one per step
    #[serde(default = "yes")]
    pub share_ts_bilstms: bool,
    /// one decoder per task for all steps instead of one per step
    #[serde(default = "yes")]
    pub share_decoders: bool,
    /// tanh after each graph transformation
    #[serde(default)]
    pub rsgt_nonlinearity: bool,
}

fn default_hidden() -> usize {
    128
}
fn default_embed() -> usize {
    128
}
fn default_steps() -> usize {
    3
}
fn default_gamma() -> f64 {
    3.0
}
fn default_dropout() -> f64 {
    0.2
}
fn default_speakers() -> usize {
    2
}

impl Default for DarerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl DarerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim < 2 || !self.hidden_dim.is_multiple_of(2) {
            return bad(format!(
                "hidden_dim must be even and at least 2, got {}",
                self.hidden_dim
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!(
                "gamma must be finite and non-negative, got {}",
                self.gamma
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be at least 1".into());
        }
        Ok(())
    }

    pub fn satg_scheme(&self) -> SatgScheme {
        SatgScheme {
            n_speakers: self.n_speakers,
            temporal: self.temporal_relations_in_satg,
        }
    }

    pub fn drtg_scheme(&self) -> DrtgScheme {
        DrtgScheme {
            temporal: self.temporal_relations_in_drtg,
        }
    }
}

/// A dialog mapped to ids, with both graphs prebuilt.
#[derive(Clone, Debug)]
pub struct EncodedDialog {
    pub id: String,
    pub tokens: Vec<Vec<usize>>,
    pub speakers: Vec<usize>,
    pub sentiments: Vec<usize>,
    pub acts: Vec<usize>,
    pub satg: RelGraph,
    pub drtg: RelGraph,
}

impl EncodedDialog {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Hidden states and label distributions after one step.
#[derive(Clone, Copy, Debug)]
pub struct StepState {
    pub h_s: Var,
    pub h_a: Var,
    pub p_s: Var,
    pub p_a: Var,
}

/// States for steps `0..=T`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub states: Vec<StepState>,
}

impl ForwardTrace {
    pub fn last(&self) -> &StepState {
        self.states
            .last()
            .expect("trace always holds the initial state")
    }

    pub fn sentiment_dists(&self) -> Vec<Var> {
        self.states.iter().map(|s| s.p_s).collect()
    }

    pub fn act_dists(&self) -> Vec<Var> {
        self.states.iter().map(|s| s.p_a).collect()
    }
}

#[derive(Clone, Debug)]
struct Layers {
    embed: ParamId,
    utterance: BiLstm,
    sat: Option<Rsgt>,
    init_s: BiLstm,
    init_a: BiLstm,
    dtr: Option<Rsgt>,
    ts_s: Vec<BiLstm>,
    ts_a: Vec<BiLstm>,
    dec_s: Vec<Decoder>,
    dec_a: Vec<Decoder>,
    label_s: Option<LabelEmbedding>,
    label_a: Option<LabelEmbedding>,
}

#[derive(Clone, Debug)]
pub struct Darer {
    config: DarerConfig,
    n_tokens: usize,
    n_sentiments: usize,
    n_acts: usize,
    layers: Layers,
    pub params: ParamStore,
}

impl Darer {
    pub fn new(
        config: DarerConfig,
        n_tokens: usize,
        n_sentiments: usize,
        n_acts: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_tokens < 2 || n_sentiments == 0 || n_acts == 0 {
            return Err(Error::Config(format!(
                "need at least 2 tokens and 1 class per task, got {n_tokens}/{n_sentiments}/{n_acts}"
            )));
        }
        let d = config.hidden_dim;
        let h = d / 2;
        let mut store = ParamStore::new();
        let s = &mut store;
        let embed = s.insert_uniform("embed", &[n_tokens, config.embed_dim], 1.0, seed)?;
        let utterance = BiLstm::new(s, "utt_encoder", config.embed_dim, h, seed)?;
        let sat = if config.use_sat_rsgt {
            Some(Rsgt::new(
                s,
                "sat_rsgt",
                d,
                config.satg_scheme().n_relations(),
                config.rsgt_nonlinearity,
                seed,
            )?)
        } else {
            None
        };
        let init_s = BiLstm::new(s, "init_s", d, h, seed)?;
        let init_a = BiLstm::new(s, "init_a", d, h, seed)?;
        let reasoning = config.steps > 0;
        let dtr = if reasoning && config.use_dtr_rsgt {
            Some(Rsgt::new(
                s,
                "dtr_rsgt",
                d,
                config.drtg_scheme().n_relations(),
                config.rsgt_nonlinearity,
                seed,
            )?)
        } else {
            None
        };
        let n_ts = match (reasoning && config.use_ts_bilstms, config.share_ts_bilstms) {
            (false, _) => 0,
            (true, true) => 1,
            (true, false) => config.steps,
        };
        let (mut ts_s, mut ts_a) = (Vec::new(), Vec::new());
        for k in 0..n_ts {
            let suffix = if config.share_ts_bilstms {
                String::new()
            } else {
                format!(".{}", k + 1)
            };
            ts_s.push(BiLstm::new(s, &format!("ts_s{suffix}"), d, h, seed)?);
            ts_a.push(BiLstm::new(s, &format!("ts_a{suffix}"), d, h, seed)?);
        }
        let n_dec = if config.share_decoders {
            1
        } else {
            config.steps + 1
        };
        let (mut dec_s, mut dec_a) = (Vec::new(), Vec::new());
        for k in 0..n_dec {
            let suffix = if config.share_decoders {
                String::new()
            } else {
                format!(".{k}")
            };
            dec_s.push(Decoder::new(
                s,
                &format!("dec_s{suffix}"),
                d,
                n_sentiments,
                seed,
            )?);
            dec_a.push(Decoder::new(s, &format!("dec_a{suffix}"), d, n_acts, seed)?);
        }
        let (label_s, label_a) = if reasoning && config.use_label_embeddings {
            (
                Some(LabelEmbedding::new(s, "label_s", n_sentiments, d, seed)?),
                Some(LabelEmbedding::new(s, "label_a", n_acts, d, seed)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            n_tokens,
            n_sentiments,
            n_acts,
            layers: Layers {
                embed,
                utterance,
                sat,
                init_s,
                init_a,
                dtr,
                ts_s,
                ts_a,
                dec_s,
                dec_a,
                label_s,
                label_a,
            },
            params: store,
        })
    }

    pub fn config(&self) -> &DarerConfig {
        &self.config
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_sentiments(&self) -> usize {
        self.n_sentiments
    }

    pub fn n_acts(&self) -> usize {
        self.n_acts
    }

    /// Label embedding matrices, when the model has them.
    pub fn label_embeddings(&self) -> Option<(ParamId, ParamId)> {
        Some((
            self.layers.label_s.as_ref()?.m,
            self.layers.label_a.as_ref()?.m,
        ))
    }

    pub fn encode_dialog(&self, dialog: &Dialog, vocab: &TokenVocab) -> Result<EncodedDialog> {
        if dialog.is_empty() {
            return Err(Error::Validation(format!(
                "dialog {} has no utterances",
                dialog.id
            )));
        }
        let speakers = dialog.speakers();
        if let Some(&s) = speakers
            .iter()
            .find(|&&s| s == 0 || s > self.config.n_speakers)
        {
            return Err(Error::Config(format!(
                "dialog {} has speaker {s}, but the model types at most {} speakers",
                dialog.id, self.config.n_speakers
            )));
        }
        let mut tokens = Vec::with_capacity(dialog.len());
        for u in &dialog.utterances {
            if u.tokens.is_empty() {
                return Err(Error::Validation(format!(
                    "dialog {} has an empty utterance",
                    dialog.id
                )));
            }
            if u.sentiment >= self.n_sentiments || u.act >= self.n_acts {
                return Err(Error::Validation(format!(
                    "dialog {} has a label outside the model's classes",
                    dialog.id
                )));
            }
            let ids = vocab.encode(&u.tokens);
            if let Some(&t) = ids.iter().find(|&&t| t >= self.n_tokens) {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: t,
                    size: self.n_tokens,
                });
            }
            tokens.push(ids);
        }
        Ok(EncodedDialog {
            id: dialog.id.clone(),
            tokens,
            satg: build_satg(&speakers, self.config.satg_scheme())?,
            drtg: build_drtg(dialog.len(), self.config.drtg_scheme())?,
            speakers,
            sentiments: dialog.sentiments(),
            acts: dialog.acts(),
        })
    }

    fn dec(&self, t: usize) -> (&Decoder, &Decoder) {
        let k = if self.config.share_decoders { 0 } else { t };
        (&self.layers.dec_s[k], &self.layers.dec_a[k])
    }

    /// Encodes every utterance and applies the speaker-aware graph
    /// transformation, giving `Ĥ[N×d]`.
    pub fn dialog_understanding(
        &self,
        tape: &mut Tape,
        dialog: &EncodedDialog,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let rows = dialog
            .tokens
            .iter()
            .map(|t| encode_utterance(tape, self.layers.embed, &self.layers.utterance, t))
            .collect::<Result<Vec<_>>>()?;
        let h = tape.concat_rows(&rows)?;
        let h_hat = match &self.layers.sat {
            Some(sat) => sat.forward(tape, &dialog.satg, h)?,
            None => h,
        };
        dropout(tape, h_hat, self.config.dropout, rng)
    }

    /// Task-specific BiLSTMs over `Ĥ`, then both decoders.
    pub fn initial_estimation(&self, tape: &mut Tape, h_hat: Var) -> Result<StepState> {
        let h_s = self.layers.init_s.forward(tape, h_hat)?;
        let h_a = self.layers.init_a.forward(tape, h_hat)?;
        let (dec_s, dec_a) = self.dec(0);
        let p_s = dec_s.forward(tape, h_s)?;
        let p_a = dec_a.forward(tape, h_a)?;
        Ok(StepState { h_s, h_a, p_s, p_a })
    }

    /// Step `t ≥ 1`: label projection, superposition, graph reasoning over
    /// the dual-task graph, task-specific re-encoding and decoding.
    pub fn reasoning_step(
        &self,
        tape: &mut Tape,
        dialog: &EncodedDialog,
        prev: &StepState,
        t: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<StepState> {
        let n = dialog.len();
        let (mut hs, mut ha) = (prev.h_s, prev.h_a);
        if let (Some(ls), Some(la)) = (&self.layers.label_s, &self.layers.label_a) {
            let ms = tape.param(ls.m)?;
            let ma = tape.param(la.m)?;
            let e_s = project_labels(tape, ms, prev.p_s)?;
            let e_a = project_labels(tape, ma, prev.p_a)?;
            hs = superimpose(tape, hs, e_s, e_a)?;
            ha = superimpose(tape, ha, e_s, e_a)?;
        }
        if let Some(dtr) = &self.layers.dtr {
            let nodes = tape.concat_rows(&[hs, ha])?;
            let out = dtr.forward(tape, &dialog.drtg, nodes)?;
            hs = tape.slice_rows(out, 0, n)?;
            ha = tape.slice_rows(out, n, 2 * n)?;
        }
        hs = dropout(tape, hs, self.config.dropout, reborrow(&mut rng))?;
        ha = dropout(tape, ha, self.config.dropout, reborrow(&mut rng))?;
        if !self.layers.ts_s.is_empty() {
            let k = if self.config.share_ts_bilstms {
                0
            } else {
                t - 1
            };
            hs = self.layers.ts_s[k].forward(tape, hs)?;
            ha = self.layers.ts_a[k].forward(tape, ha)?;
        }
        let (dec_s, dec_a) = self.dec(t);
        let p_s = dec_s.forward(tape, hs)?;
        let p_a = dec_a.forward(tape, ha)?;
        Ok(StepState {
            h_s: hs,
            h_a: ha,
            p_s,
            p_a,
        })
    }

    /// Full forward pass. Passing a generator turns on dropout (training);
    /// `None` is evaluation mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        dialog: &EncodedDialog,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardTrace> {
        let h_hat = self.dialog_understanding(tape, dialog, reborrow(&mut rng))?;
        let mut states = Vec::with_capacity(self.config.steps + 1);
        states.push(self.initial_estimation(tape, h_hat)?);
        for t in 1..=self.config.steps {
            let next = self.reasoning_step(tape, dialog, &states[t - 1], t, reborrow(&mut rng))?;
            states.push(next);
        }
        Ok(ForwardTrace { states })
    }

    /// Forward pass plus the full objective against the dialog's gold labels.
    pub fn loss(
        &self,
        tape: &mut Tape,
        dialog: &EncodedDialog,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(ForwardTrace, LossVars)> {
        let trace = self.forward(tape, dialog, rng)?;
        let loss = total_loss(
            tape,
            &trace.sentiment_dists(),
            &trace.act_dists(),
            &dialog.sentiments,
            &dialog.acts,
            self.config.gamma,
            self.config.use_constraint_loss,
        )?;
        Ok((trace, loss))
    }

    /// Row argmax of the final distributions, ties toward the lower class.
    pub fn predict(&self, dialog: &EncodedDialog) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut tape = Tape::with_params(&self.params);
        let trace = self.forward(&mut tape, dialog, None)?;
        let last = trace.last();
        Ok((
            tape.value(last.p_s).argmax_rows(),
            tape.value(last.p_a).argmax_rows(),
        ))
    }

    pub fn to_checkpoint(&self, vocab: &TokenVocab, labels: &LabelVocab) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            n_tokens: self.n_tokens,
            tokens: vocab.tokens().to_vec(),
            labels: labels.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model a checkpoint describes, checking every stored
    /// tensor against the shape the config implies.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TokenVocab, LabelVocab)> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.labels.validate()?;
        let vocab = TokenVocab::from_tokens(ck.tokens.clone())?;
        if vocab.len() != ck.n_tokens {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the embedding table has {}",
                vocab.len(),
                ck.n_tokens
            )));
        }
        let mut model = Self::new(
            ck.config.clone(),
            ck.n_tokens,
            ck.labels.n_sentiments(),
            ck.labels.n_acts(),
            0,
        )?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ck.params.len()
            )));
        }
        for p in &ck.params {
            let id = model
                .params
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", p.name)))?;
            if model.params.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    p.name,
                    p.shape,
                    model.params.get(id).shape()
                )));
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", p.name)))?;
            model.params.set(id, t)?;
        }
        Ok((model, vocab, ck.labels.clone()))
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        vocab: &TokenVocab,
        labels: &LabelVocab,
    ) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint(vocab, labels))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, TokenVocab, LabelVocab)> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "darer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DarerConfig,
    pub n_tokens: usize,
    pub tokens: Vec<String>,
    pub labels: LabelVocab,
    pub params: Vec<NamedTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_token_vocab, Utterance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dialog(speakers: &[usize]) -> Dialog {
        Dialog {
            id: "toy".into(),
            utterances: speakers
                .iter()
                .enumerate()
                .map(|(i, &s)| Utterance {
                    speaker: s,
                    tokens: vec![format!("t{}", i % 3), "x".into()],
                    sentiment: i % 3,
                    act: i % 4,
                })
                .collect(),
        }
    }

    fn small_config() -> DarerConfig {
        DarerConfig {
            hidden_dim: 6,
            embed_dim: 4,
            steps: 2,
            gamma: 1.0,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn build(config: DarerConfig, dialog: &Dialog) -> (Darer, EncodedDialog) {
        let vocab = build_token_vocab(std::slice::from_ref(dialog), 1).unwrap();
        let model = Darer::new(config, vocab.len(), 3, 4, 7).unwrap();
        let enc = model.encode_dialog(dialog, &vocab).unwrap();
        (model, enc)
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = DarerConfig::default();
        assert_eq!(
            (c.hidden_dim, c.steps, c.gamma, c.dropout),
            (128, 3, 3.0, 0.2)
        );
        assert!(c.use_label_embeddings && c.use_dtr_rsgt && c.share_decoders);
        assert!(!c.rsgt_nonlinearity);
        let parsed: DarerConfig = serde_json::from_str(r#"{"steps": 1}"#).unwrap();
        assert_eq!(parsed.steps, 1);
        assert!(serde_json::from_str::<DarerConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn odd_hidden_dim_rejected() {
        let cfg = DarerConfig {
            hidden_dim: 7,
            ..Default::default()
        };
        assert!(matches!(
            Darer::new(cfg, 10, 3, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trace_lengths_follow_steps() {
        let d = toy_dialog(&[1, 2, 1]);
        for steps in [0, 1, 2, 4] {
            let (m, enc) = build(
                DarerConfig {
                    steps,
                    ..small_config()
                },
                &d,
            );
            let mut tape = Tape::with_params(&m.params);
            let trace = m.forward(&mut tape, &enc, None).unwrap();
            assert_eq!(trace.states.len(), steps + 1);
            for s in &trace.states {
                for p in [s.p_s, s.p_a] {
                    let v = tape.value(p);
                    for i in 0..v.rows() {
                        assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn t_zero_predicts_initial_estimates() {
        let d = toy_dialog(&[1, 2, 2, 1]);
        let (m, enc) = build(
            DarerConfig {
                steps: 0,
                ..small_config()
            },
            &d,
        );
        let mut tape = Tape::with_params(&m.params);
        let h_hat = m.dialog_understanding(&mut tape, &enc, None).unwrap();
        let init = m.initial_estimation(&mut tape, h_hat).unwrap();
        let (ps, pa) = m.predict(&enc).unwrap();
        assert_eq!(ps, tape.value(init.p_s).argmax_rows());
        assert_eq!(pa, tape.value(init.p_a).argmax_rows());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let d = toy_dialog(&[1, 2, 1, 2]);
        let (m, enc) = build(
            DarerConfig {
                dropout: 0.3,
                ..small_config()
            },
            &d,
        );
        let run = || {
            let mut tape = Tape::with_params(&m.params);
            let trace = m.forward(&mut tape, &enc, None).unwrap();
            tape.value(trace.last().p_s).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_utterance_dialog_uses_self_path_only() {
        let d = toy_dialog(&[1]);
        let (m, enc) = build(small_config(), &d);
        assert_eq!(enc.satg.n_edges(), 0);
        let mut tape = Tape::with_params(&m.params);
        let h_hat = m.dialog_understanding(&mut tape, &enc, None).unwrap();
        let h = encode_utterance(
            &mut tape,
            m.layers.embed,
            &m.layers.utterance,
            &enc.tokens[0],
        )
        .unwrap();
        let w = tape.param(m.layers.sat.as_ref().unwrap().self_w).unwrap();
        let hh = tape.concat_rows(&[h]).unwrap();
        let expected = tape.matmul(hh, w).unwrap();
        assert_eq!(tape.value(h_hat), tape.value(expected));
    }

    #[test]
    fn disabling_sat_rsgt_passes_encodings_through() {
        let d = toy_dialog(&[1, 2, 1]);
        let (m, enc) = build(
            DarerConfig {
                use_sat_rsgt: false,
                ..small_config()
            },
            &d,
        );
        let mut tape = Tape::with_params(&m.params);
        let h_hat = m.dialog_understanding(&mut tape, &enc, None).unwrap();
        let rows: Vec<Var> = enc
            .tokens
            .iter()
            .map(|t| encode_utterance(&mut tape, m.layers.embed, &m.layers.utterance, t).unwrap())
            .collect();
        let h = tape.concat_rows(&rows).unwrap();
        assert_eq!(tape.value(h_hat), tape.value(h));
    }

    #[test]
    fn zero_decoders_give_uniform_initial_estimates() {
        let d = toy_dialog(&[1, 2]);
        let (mut m, enc) = build(small_config(), &d);
        for dec in m
            .layers
            .dec_s
            .iter()
            .chain(&m.layers.dec_a)
            .cloned()
            .collect::<Vec<_>>()
        {
            for id in [dec.w, dec.b] {
                let shape = m.params.get(id).shape().to_vec();
                m.params.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut tape = Tape::with_params(&m.params);
        let trace = m.forward(&mut tape, &enc, None).unwrap();
        for v in tape.value(trace.states[0].p_s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let (ps, pa) = m.predict(&enc).unwrap();
        assert_eq!(ps, vec![0, 0]);
        assert_eq!(pa, vec![0, 0]);
    }

    #[test]
    fn per_step_sharing_flags_change_parameter_count() {
        let d = toy_dialog(&[1, 2]);
        let (shared, _) = build(small_config(), &d);
        let (unshared, _) = build(
            DarerConfig {
                share_decoders: false,
                share_ts_bilstms: false,
                ..small_config()
            },
            &d,
        );
        assert!(unshared.params.len() > shared.params.len());
        let (no_ts, enc) = build(
            DarerConfig {
                use_ts_bilstms: false,
                use_dtr_rsgt: false,
                ..small_config()
            },
            &d,
        );
        assert!(no_ts.params.find("ts_s.fwd.wx").is_none());
        assert!(no_ts.params.find("dtr_rsgt.self").is_none());
        let mut tape = Tape::with_params(&no_ts.params);
        assert_eq!(
            no_ts.forward(&mut tape, &enc, None).unwrap().states.len(),
            3
        );
    }

    #[test]
    fn too_many_speakers_is_a_config_error() {
        let d = toy_dialog(&[1, 2, 3]);
        let vocab = build_token_vocab(std::slice::from_ref(&d), 1).unwrap();
        let m = Darer::new(small_config(), vocab.len(), 3, 4, 0).unwrap();
        assert!(matches!(m.encode_dialog(&d, &vocab), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_only_in_training_mode() {
        let d = toy_dialog(&[1, 2, 1]);
        let (m, enc) = build(
            DarerConfig {
                dropout: 0.5,
                ..small_config()
            },
            &d,
        );
        let mut t1 = Tape::with_params(&m.params);
        let eval = m.forward(&mut t1, &enc, None).unwrap();
        let mut t2 = Tape::with_params(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = m.forward(&mut t2, &enc, Some(&mut rng)).unwrap();
        assert_ne!(t1.value(eval.last().p_s), t2.value(train.last().p_s));
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = toy_dialog(&[1, 2, 1]);
        let vocab = build_token_vocab(std::slice::from_ref(&d), 1).unwrap();
        let labels = LabelVocab::new(&["n", "z", "p"], &["s", "q", "a", "d"], Some("z")).unwrap();
        let m = Darer::new(small_config(), vocab.len(), 3, 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, &vocab, &labels).unwrap();
        let (back, v2, l2) = Darer::load(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(l2, labels);
        for (id, p) in m.params.iter() {
            assert_eq!(back.params.get(id), &p.value, "{}", p.name);
        }

        let mut ck = m.to_checkpoint(&vocab, &labels);
        ck.params[0].shape = vec![1, 1];
        ck.params[0].data = vec![0.0];
        assert!(matches!(
            Darer::from_checkpoint(&ck),
            Err(Error::Checkpoint(_))
        ));
        let mut ck = m.to_checkpoint(&vocab, &labels);
        ck.config.hidden_dim = 8;
        assert!(Darer::from_checkpoint(&ck).is_err());
    }
}
