//! Attention, the decoder recurrent cell, vocabulary projection, the
//! word-by-word cross-entropy loss, and caption generation.
//!
//! The attention query at step t is the previous decoder hidden state
//! (the encoder's final lower hidden at t = 1). The decoder input is
//! concat(post_linear(a_t), word embedding); the word embedding is the
//! teacher-forced ground-truth token during word-by-word training, the
//! previous soft embedding s_{t-1} = E p_{t-1} during soft generation,
//! and the argmax token's embedding during greedy decoding. Soft
//! generation never samples, so the whole map from parameters to the
//! generated sequence stays differentiable.

use ndarray::{Array1, Array2, Axis};

use crate::embeddings::{BOS, EOS};
use crate::encoder::{EncodedVars, EncoderOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::model::{bind_lstm, lstm_step, LstmVars, ModelDims};

/// One decoder step: word distribution, soft embedding, hidden state, and
/// attention weights (plus the cell state needed to chain steps).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStep {
    pub p: Array1<f64>,
    pub s_soft: Array1<f64>,
    pub hidden: Array1<f64>,
    pub lambda: Array1<f64>,
    pub cell: Array1<f64>,
}

pub struct DecoderVars {
    pub attn_w: Var,
    pub post_w: Var,
    pub post_b: Var,
    pub cell: LstmVars,
    pub proj_w: Var,
    pub proj_b: Var,
    pub e: Var,
}

pub fn bind_decoder(g: &mut Graph, store: &ParamStore, dims: &ModelDims) -> DecoderVars {
    DecoderVars {
        attn_w: g.param(store, "dec.attn.w"),
        post_w: g.param(store, "dec.attn.post.w"),
        post_b: g.param(store, "dec.attn.post.b"),
        cell: bind_lstm(g, store, "dec.cell", dims.hidden),
        proj_w: g.param(store, "dec.proj.w"),
        proj_b: g.param(store, "dec.proj.b"),
        e: g.param(store, "emb.e"),
    }
}

/// lambda = softmax(queryᵀ W H), a = H lambda.
pub fn attend_vars(g: &mut Graph, attn_w: Var, query: Var, h_stack: Var) -> (Var, Var) {
    let wt = g.transpose(attn_w);
    let wq = g.matmul(wt, query); // Wᵀ q, so energies = Hᵀ (Wᵀ q) = (qᵀ W H)ᵀ
    let ht = g.transpose(h_stack);
    let energies = g.matmul(ht, wq);
    let lambda = g.softmax_col(energies);
    let a = g.matmul(h_stack, lambda);
    (a, lambda)
}

pub struct StepVars {
    pub p: Var,
    pub s_soft: Var,
    pub hidden: Var,
    pub cell: Var,
    pub lambda: Var,
    pub logits: Var,
}

pub fn decoder_step_vars(
    g: &mut Graph,
    dec: &DecoderVars,
    h_stack: Var,
    query: Var,
    prev_hidden: Var,
    prev_cell: Var,
    word_embedding: Var,
) -> StepVars {
    let (a, lambda) = attend_vars(g, dec.attn_w, query, h_stack);
    let a_post = g.affine(dec.post_w, a, dec.post_b);
    let input = g.concat_rows(&[a_post, word_embedding]);
    let (hidden, cell) = lstm_step(g, &dec.cell, input, prev_hidden, prev_cell);
    let logits = g.affine(dec.proj_w, hidden, dec.proj_b);
    let p = g.softmax_col(logits);
    let s_soft = g.matmul(dec.e, p);
    StepVars { p, s_soft, hidden, cell, lambda, logits }
}

fn argmax(values: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Sum over steps of −log p_t[target_t] with teacher forcing. `wrapped`
/// is BOS, w_1 ... w_m, EOS; the loss covers targets w_1 ... EOS.
pub fn teacher_forced_loss_vars(
    g: &mut Graph,
    dec: &DecoderVars,
    enc: &EncodedVars,
    wrapped: &[usize],
) -> Var {
    debug_assert!(wrapped.len() >= 2);
    let mut query = enc.final_hidden;
    let mut hidden = enc.final_hidden;
    let mut cell = enc.final_cell;
    let mut nll_terms = Vec::with_capacity(wrapped.len() - 1);
    for t in 1..wrapped.len() {
        let w_emb = g.col(dec.e, wrapped[t - 1]);
        let step = decoder_step_vars(g, dec, enc.h_stack, query, hidden, cell, w_emb);
        let logp = g.log_softmax_col(step.logits);
        let picked = g.pick(logp, wrapped[t]);
        nll_terms.push(g.scale(picked, -1.0));
        query = step.hidden;
        hidden = step.hidden;
        cell = step.cell;
    }
    let mut total = nll_terms[0];
    for term in &nll_terms[1..] {
        total = g.add(total, *term);
    }
    total
}

/// Soft-embedding generation: feed s_{t-1} back as the next word input.
/// Stops after the step whose argmax is EOS, or at max_len.
pub fn generate_soft_vars(
    g: &mut Graph,
    dec: &DecoderVars,
    enc: &EncodedVars,
    max_len: usize,
) -> (Vec<Var>, Vec<usize>) {
    let mut query = enc.final_hidden;
    let mut hidden = enc.final_hidden;
    let mut cell = enc.final_cell;
    let mut word = g.col(dec.e, BOS);
    let mut soft = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..max_len {
        let step = decoder_step_vars(g, dec, enc.h_stack, query, hidden, cell, word);
        let id = argmax(g.value(step.p));
        soft.push(step.s_soft);
        ids.push(id);
        if id == EOS {
            break;
        }
        word = step.s_soft;
        query = step.hidden;
        hidden = step.hidden;
        cell = step.cell;
    }
    (soft, ids)
}

/// Greedy decoding: feed the argmax token's (hard) embedding back.
pub fn generate_greedy_vars(
    g: &mut Graph,
    dec: &DecoderVars,
    enc: &EncodedVars,
    max_len: usize,
) -> Vec<usize> {
    let mut query = enc.final_hidden;
    let mut hidden = enc.final_hidden;
    let mut cell = enc.final_cell;
    let mut word = g.col(dec.e, BOS);
    let mut ids = Vec::new();
    for _ in 0..max_len {
        let step = decoder_step_vars(g, dec, enc.h_stack, query, hidden, cell, word);
        let id = argmax(g.value(step.p));
        ids.push(id);
        if id == EOS {
            break;
        }
        word = g.col(dec.e, id);
        query = step.hidden;
        hidden = step.hidden;
        cell = step.cell;
    }
    ids
}

// ---- plain-value wrappers ----

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}

pub fn encoder_constants(g: &mut Graph, enc: &EncoderOutput) -> EncodedVars {
    EncodedVars {
        h_stack: g.constant(enc.h_stack.clone()),
        final_hidden: g.constant(column(&enc.final_hidden)),
        final_cell: g.constant(column(&enc.final_cell)),
    }
}

fn check_query(query: &Array1<f64>, h_stack: &Array2<f64>, dims: &ModelDims) -> Result<()> {
    if query.len() != dims.hidden || h_stack.nrows() != dims.hidden {
        return Err(Error::shape(
            "decoder.attention",
            format!(
                "query is {}-d and H has {} rows, expected hidden={}",
                query.len(),
                h_stack.nrows(),
                dims.hidden
            ),
        ));
    }
    if h_stack.ncols() == 0 {
        return Err(Error::shape("decoder.attention", "H has no columns"));
    }
    Ok(())
}

/// Attention weights and vector for one query against H.
pub fn attend(
    query: &Array1<f64>,
    h_stack: &Array2<f64>,
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_query(query, h_stack, dims)?;
    let mut g = Graph::new();
    let attn_w = g.param(store, "dec.attn.w");
    let q = g.constant(column(query));
    let h = g.constant(h_stack.clone());
    let (a, lambda) = attend_vars(&mut g, attn_w, q, h);
    Ok((
        g.value(a).column(0).to_owned(),
        g.value(lambda).column(0).to_owned(),
    ))
}

/// One decoder step from explicit previous state and word embedding. The
/// attention query is the previous hidden state.
pub fn decoder_step(
    prev_hidden: &Array1<f64>,
    prev_cell: &Array1<f64>,
    input_word_embedding: &Array1<f64>,
    h_stack: &Array2<f64>,
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<DecoderStep> {
    check_query(prev_hidden, h_stack, dims)?;
    if prev_cell.len() != dims.hidden {
        return Err(Error::shape(
            "decoder.cell",
            format!("cell state is {}-d, expected {}", prev_cell.len(), dims.hidden),
        ));
    }
    if input_word_embedding.len() != dims.d_emb {
        return Err(Error::shape(
            "decoder.cell",
            format!(
                "word embedding is {}-d, expected d_emb={}",
                input_word_embedding.len(),
                dims.d_emb
            ),
        ));
    }
    let mut g = Graph::new();
    let dec = bind_decoder(&mut g, store, dims);
    let q = g.constant(column(prev_hidden));
    let h = g.constant(column(prev_hidden));
    let c = g.constant(column(prev_cell));
    let hs = g.constant(h_stack.clone());
    let w = g.constant(column(input_word_embedding));
    let step = decoder_step_vars(&mut g, &dec, hs, q, h, c, w);
    Ok(DecoderStep {
        p: g.value(step.p).column(0).to_owned(),
        s_soft: g.value(step.s_soft).column(0).to_owned(),
        hidden: g.value(step.hidden).column(0).to_owned(),
        lambda: g.value(step.lambda).column(0).to_owned(),
        cell: g.value(step.cell).column(0).to_owned(),
    })
}

fn check_wrapped(wrapped: &[usize], dims: &ModelDims) -> Result<()> {
    if wrapped.len() < 2 || wrapped.first() != Some(&BOS) || wrapped.last() != Some(&EOS) {
        return Err(Error::Input(
            "teacher_forced_loss: caption must be wrapped BOS ... EOS with at least one target"
                .into(),
        ));
    }
    if let Some(&bad) = wrapped.iter().find(|&&id| id >= dims.vocab) {
        return Err(Error::Vocab(format!(
            "token id {bad} out of range for vocabulary of {}",
            dims.vocab
        )));
    }
    Ok(())
}

/// Word-by-word loss for a wrapped (BOS ... EOS) ground-truth caption,
/// teacher-forced from the encoder output.
pub fn teacher_forced_loss(
    encoder_out: &EncoderOutput,
    wrapped: &[usize],
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<f64> {
    check_wrapped(wrapped, dims)?;
    let mut g = Graph::new();
    let dec = bind_decoder(&mut g, store, dims);
    let enc = encoder_constants(&mut g, encoder_out);
    let loss = teacher_forced_loss_vars(&mut g, &dec, &enc, wrapped);
    Ok(g.scalar(loss))
}

/// Soft-embedding caption: the sequence of s_t = E p_t vectors plus
/// the argmax token ids for readable output.
pub fn generate_soft(
    encoder_out: &EncoderOutput,
    store: &ParamStore,
    dims: &ModelDims,
    max_len: usize,
) -> Result<(Vec<Array1<f64>>, Vec<usize>)> {
    if max_len == 0 {
        return Err(Error::Input("generate_soft: max_len must be >= 1".into()));
    }
    let mut g = Graph::new();
    let dec = bind_decoder(&mut g, store, dims);
    let enc = encoder_constants(&mut g, encoder_out);
    let (soft, ids) = generate_soft_vars(&mut g, &dec, &enc, max_len);
    let soft = soft.iter().map(|v| g.value(*v).column(0).to_owned()).collect();
    Ok((soft, ids))
}

/// Greedy argmax decoding; stops at EOS or max_len.
pub fn generate_greedy(
    encoder_out: &EncoderOutput,
    store: &ParamStore,
    dims: &ModelDims,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Input("generate_greedy: max_len must be >= 1".into()));
    }
    let mut g = Graph::new();
    let dec = bind_decoder(&mut g, store, dims);
    let enc = encoder_constants(&mut g, encoder_out);
    Ok(generate_greedy_vars(&mut g, &dec, &enc, max_len))
}
