//! Shared model plumbing: dimension contract, parameter initialization,
//! and the LSTM / GRU cell steps used by the encoder, decoder, and the
//! sentence encoder.
//!
//! Parameter naming convention (prefix = optimizer scope):
//!   `enc.*`  encoder cells
//!   `dec.*`  attention, decoder cell, vocabulary projection
//!   `emb.e`  shared word-embedding matrix
//!   `mean.*` metric-learning head (the only scope the dissimilar-loss
//!            optimizer touches)

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::graph::{Graph, ParamStore, Var};

/// Prefix of every metric-learning-head parameter.
pub const MEANING_PREFIX: &str = "mean.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_vis: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub vocab: usize,
}

impl ModelDims {
    /// Input width of the lower encoder cell and of the decoder cell:
    /// hidden state concatenated with a word embedding.
    pub fn fused_input(&self) -> usize {
        self.hidden + self.d_emb
    }
}

fn uniform(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// One LSTM cell: gates packed row-wise as [input; forget; output; candidate].
fn init_lstm(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha20Rng) {
    let scale = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.wx"), uniform(rng, 4 * hidden, in_dim, scale));
    store.insert(format!("{prefix}.wh"), uniform(rng, 4 * hidden, hidden, scale));
    store.insert(format!("{prefix}.b"), uniform(rng, 4 * hidden, 1, scale));
}

/// One GRU cell: update/reset gates packed as [z; r], candidate separate
/// (its hidden matmul applies to r ⊙ h).
fn init_gru(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha20Rng) {
    let scale = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.zr.wx"), uniform(rng, 2 * hidden, in_dim, scale));
    store.insert(format!("{prefix}.zr.wh"), uniform(rng, 2 * hidden, hidden, scale));
    store.insert(format!("{prefix}.zr.b"), uniform(rng, 2 * hidden, 1, scale));
    store.insert(format!("{prefix}.n.wx"), uniform(rng, hidden, in_dim, scale));
    store.insert(format!("{prefix}.n.wh"), uniform(rng, hidden, hidden, scale));
    store.insert(format!("{prefix}.n.b"), uniform(rng, hidden, 1, scale));
}

fn init_linear(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize, hidden: usize, rng: &mut ChaCha20Rng) {
    let scale = 1.0 / (hidden as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(rng, out_dim, in_dim, scale));
    store.insert(format!("{prefix}.b"), uniform(rng, out_dim, 1, scale));
}

/// All trainable tensors for the captioner plus the metric-learning head.
/// `embeddings` becomes the `emb.e` tensor (shared everywhere a word enters
/// the model). Weight init is uniform +-1/sqrt(hidden).
pub fn init_params(dims: &ModelDims, embeddings: &EmbeddingMatrix, rng: &mut ChaCha20Rng) -> ParamStore {
    assert_eq!(embeddings.d_emb(), dims.d_emb, "embedding rows must equal d_emb");
    assert_eq!(embeddings.vocab_size(), dims.vocab, "embedding cols must equal vocab");
    let mut store = ParamStore::new();
    let h = dims.hidden;

    init_lstm(&mut store, "enc.upper", dims.d_vis, h, rng);
    init_lstm(&mut store, "enc.lower", dims.fused_input(), h, rng);

    store.insert("dec.attn.w", uniform(rng, h, h, 1.0 / (h as f64).sqrt()));
    init_linear(&mut store, "dec.attn.post", h, h, h, rng);
    init_lstm(&mut store, "dec.cell", dims.fused_input(), h, rng);
    init_linear(&mut store, "dec.proj", h, dims.vocab, h, rng);

    store.insert("emb.e", embeddings.e.clone());

    init_gru(&mut store, "mean.fwd", dims.d_emb, h, rng);
    init_gru(&mut store, "mean.bwd", dims.d_emb, h, rng);
    init_linear(&mut store, "mean.reduce", 2 * h, h, h, rng);

    store
}

/// Bound parameter vars for one LSTM cell.
pub struct LstmVars {
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
}

pub(crate) fn bind_lstm(g: &mut Graph, store: &ParamStore, prefix: &str, hidden: usize) -> LstmVars {
    LstmVars {
        wx: g.param(store, &format!("{prefix}.wx")),
        wh: g.param(store, &format!("{prefix}.wh")),
        b: g.param(store, &format!("{prefix}.b")),
        hidden,
    }
}

/// c' = f ⊙ c + i ⊙ tanh(g);  h' = o ⊙ tanh(c')
pub(crate) fn lstm_step(g: &mut Graph, p: &LstmVars, x: Var, h_prev: Var, c_prev: Var) -> (Var, Var) {
    let h = p.hidden;
    let wx = g.matmul(p.wx, x);
    let wh = g.matmul(p.wh, h_prev);
    let pre = g.add(wx, wh);
    let pre = g.add(pre, p.b);
    let i_pre = g.slice_rows(pre, 0, h);
    let f_pre = g.slice_rows(pre, h, h);
    let o_pre = g.slice_rows(pre, 2 * h, h);
    let g_pre = g.slice_rows(pre, 3 * h, h);
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let o = g.sigmoid(o_pre);
    let cand = g.tanh(g_pre);
    let fc = g.mul(f, c_prev);
    let ig = g.mul(i, cand);
    let c = g.add(fc, ig);
    let ct = g.tanh(c);
    let h_new = g.mul(o, ct);
    (h_new, c)
}

pub(crate) struct GruVars {
    zr_wx: Var,
    zr_wh: Var,
    zr_b: Var,
    n_wx: Var,
    n_wh: Var,
    n_b: Var,
    hidden: usize,
}

pub(crate) fn bind_gru(g: &mut Graph, store: &ParamStore, prefix: &str, hidden: usize) -> GruVars {
    GruVars {
        zr_wx: g.param(store, &format!("{prefix}.zr.wx")),
        zr_wh: g.param(store, &format!("{prefix}.zr.wh")),
        zr_b: g.param(store, &format!("{prefix}.zr.b")),
        n_wx: g.param(store, &format!("{prefix}.n.wx")),
        n_wh: g.param(store, &format!("{prefix}.n.wh")),
        n_b: g.param(store, &format!("{prefix}.n.b")),
        hidden,
    }
}

/// h' = (1 − z) ⊙ n + z ⊙ h, with n = tanh(Wn x + Un (r ⊙ h) + bn).
pub(crate) fn gru_step(g: &mut Graph, p: &GruVars, x: Var, h_prev: Var) -> Var {
    let h = p.hidden;
    let wx = g.matmul(p.zr_wx, x);
    let wh = g.matmul(p.zr_wh, h_prev);
    let pre = g.add(wx, wh);
    let pre = g.add(pre, p.zr_b);
    let z_pre = g.slice_rows(pre, 0, h);
    let r_pre = g.slice_rows(pre, h, h);
    let z = g.sigmoid(z_pre);
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h_prev);
    let n_wx = g.matmul(p.n_wx, x);
    let n_wh = g.matmul(p.n_wh, rh);
    let n_pre = g.add(n_wx, n_wh);
    let n_pre = g.add(n_pre, p.n_b);
    let n = g.tanh(n_pre);
    // n + z ⊙ (h − n)
    let diff = g.sub(h_prev, n);
    let zd = g.mul(z, diff);
    g.add(n, zd)
}

/// Zero column vector as a graph constant (initial recurrent state).
pub(crate) fn zero_state(g: &mut Graph, dim: usize) -> Var {
    g.constant(Array2::zeros((dim, 1)))
}
