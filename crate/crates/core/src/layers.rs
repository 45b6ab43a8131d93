//! Building blocks: BiLSTM, relation-specific graph transformation,
//! decoders, label projection, superposition and dropout.
//!
//! All layers use the row-vector convention: a sequence or node set is a
//! matrix with one row per element and weights multiply on the right.

use rand::{Rng, RngCore};

use crate::error::{shape_err, Error, Result};
use crate::graph::RelGraph;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One LSTM direction. Gate order in the fused weights: input, forget,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            wx: store.insert_uniform(&format!("{prefix}.wx"), &[d_in, 4 * hidden], bound, seed)?,
            wh: store.insert_uniform(
                &format!("{prefix}.wh"),
                &[hidden, 4 * hidden],
                bound,
                seed,
            )?,
            b: store.insert_uniform(&format!("{prefix}.b"), &[4 * hidden], bound, seed)?,
            d_in,
            hidden,
        })
    }

    /// Runs over the rows of `x[L×d_in]` from a zero state, optionally from
    /// the last row backwards. Row `t` of the result is the state after
    /// reading row `t`.
    pub fn forward(&self, tape: &mut Tape, x: Var, reverse: bool) -> Result<Var> {
        let (l, d) = (tape.value(x).rows(), tape.value(x).cols());
        if tape.value(x).rank() != 2 || l == 0 {
            return Err(Error::Empty { op: "lstm" });
        }
        if d != self.d_in {
            return shape_err("lstm", tape.shape(x), &[l, self.d_in]);
        }
        let h = self.hidden;
        let (wx, wh, b) = (
            tape.param(self.wx)?,
            tape.param(self.wh)?,
            tape.param(self.b)?,
        );
        let xw = tape.matmul(x, wx)?;
        let pre = tape.add_bias(xw, b)?;

        let mut outs: Vec<Option<Var>> = vec![None; l];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse {
            (0..l).rev().collect()
        } else {
            (0..l).collect()
        };
        for t in order {
            let mut z = tape.slice_rows(pre, t, t + 1)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(h_prev, wh)?;
                z = tape.add(z, rec)?;
            }
            let zi = tape.slice_cols(z, 0, h)?;
            let zf = tape.slice_cols(z, h, 2 * h)?;
            let zg = tape.slice_cols(z, 2 * h, 3 * h)?;
            let zo = tape.slice_cols(z, 3 * h, 4 * h)?;
            let i = tape.sigmoid(zi)?;
            let g = tape.tanh(zg)?;
            let o = tape.sigmoid(zo)?;
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(zf)?;
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c)?;
            let h_new = tape.mul(o, tc)?;
            outs[t] = Some(h_new);
            state = Some((h_new, c));
        }
        let outs: Vec<Var> = outs
            .into_iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        tape.concat_rows(&outs)
    }
}

/// Bidirectional LSTM; output row `t` is `[forward_t ‖ backward_t]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &format!("{prefix}.fwd"), d_in, d_h, seed)?,
            bwd: Lstm::new(store, &format!("{prefix}.bwd"), d_in, d_h, seed)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let f = self.fwd.forward(tape, seq, false)?;
        let b = self.bwd.forward(tape, seq, true)?;
        tape.concat_cols(&[f, b])
    }
}

/// Token embedding lookup, BiLSTM over the tokens, then max-pooling over time.
pub fn encode_utterance(
    tape: &mut Tape,
    embed: ParamId,
    encoder: &BiLstm,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty {
            op: "encode_utterance",
        });
    }
    let table = tape.param(embed)?;
    let x = tape.gather_rows(table, tokens)?;
    let h = encoder.forward(tape, x)?;
    tape.max_pool_rows(h)
}

/// Relation-specific graph transformation:
/// `out_i = h_i·W_self + Σ_r mean_{j ∈ N_i^r}(h_j)·W_r`.
///
/// Relations with an empty neighborhood contribute nothing.
#[derive(Clone, Debug)]
pub struct Rsgt {
    pub self_w: ParamId,
    pub rel_w: Vec<ParamId>,
    pub dim: usize,
    /// apply tanh to the aggregated output
    pub nonlinearity: bool,
}

impl Rsgt {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_relations: usize,
        nonlinearity: bool,
        seed: u64,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let self_w = store.insert_uniform(&format!("{prefix}.self"), &[dim, dim], bound, seed)?;
        let rel_w = (1..=n_relations)
            .map(|r| store.insert_uniform(&format!("{prefix}.rel{r}"), &[dim, dim], bound, seed))
            .collect::<Result<_>>()?;
        Ok(Self {
            self_w,
            rel_w,
            dim,
            nonlinearity,
        })
    }

    pub fn forward(&self, tape: &mut Tape, graph: &RelGraph, h: Var) -> Result<Var> {
        let t = tape.value(h);
        if t.rank() != 2 || t.rows() != graph.n_nodes() || t.cols() != self.dim {
            return shape_err("rsgt", t.shape(), &[graph.n_nodes(), self.dim]);
        }
        if graph.n_relations() != self.rel_w.len() {
            return shape_err(
                "rsgt relations",
                &[graph.n_relations()],
                &[self.rel_w.len()],
            );
        }
        let w_self = tape.param(self.self_w)?;
        let mut out = tape.matmul(h, w_self)?;
        for (r, &w) in self.rel_w.iter().enumerate() {
            let rel = r + 1;
            if !graph.relation_used(rel) {
                continue;
            }
            let mean = tape.neighbor_mean(h, graph.relation_lists(rel))?;
            let w = tape.param(w)?;
            let msg = tape.matmul(mean, w)?;
            out = tape.add(out, msg)?;
        }
        if self.nonlinearity {
            out = tape.tanh(out)?;
        }
        Ok(out)
    }
}

/// `softmax(h·W + b)` per row.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub w: ParamId,
    pub b: ParamId,
    pub n_classes: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            w: store.insert_uniform(&format!("{prefix}.w"), &[dim, n_classes], bound, seed)?,
            b: store.insert_uniform(&format!("{prefix}.b"), &[n_classes], bound, seed)?,
            n_classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w)?, tape.param(self.b)?);
        let z = tape.matmul(h, w)?;
        let z = tape.add_bias(z, b)?;
        tape.softmax_rows(z)
    }
}

/// Label embedding matrix, one row per class.
#[derive(Clone, Debug)]
pub struct LabelEmbedding {
    pub m: ParamId,
    pub n_classes: usize,
}

impl LabelEmbedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_classes: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            m: store.insert_uniform(name, &[n_classes, dim], bound, seed)?,
            n_classes,
        })
    }
}

/// Expected label embedding per row: `P·M`. Rows of `p` must be
/// distributions.
pub fn project_labels(tape: &mut Tape, m: Var, p: Var) -> Result<Var> {
    let tp = tape.value(p);
    for i in 0..tp.rows() {
        let s: f64 = tp.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "label distribution row {i} sums to {s}, expected 1"
            )));
        }
    }
    tape.matmul(p, m)
}

/// `h + e_s + e_a`.
pub fn superimpose(tape: &mut Tape, h: Var, e_s: Var, e_a: Var) -> Result<Var> {
    let hs = tape.add(h, e_s)?;
    tape.add(hs, e_a)
}

/// Reborrows an optional generator for one call, leaving it usable after.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Inverted dropout. With no generator (evaluation) or a zero rate the input
/// passes through unchanged.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}
