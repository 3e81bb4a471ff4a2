//! Metric-learning head: a bidirectional GRU sentence encoder with a
//! reducing linear layer, the similar / dissimilar Manhattan losses, the
//! intra-batch pairing that mines dissimilar pairs from a mini-batch, and
//! the triplet loss used to pretrain the head.
//!
//! Both caption kinds share one input space: ground-truth captions enter
//! as embedding-matrix columns, generated captions as the decoder's soft
//! embeddings. Sequences end with the EOS embedding on both sides.
//!
//! The losses use the negative exponent, loss_sim = 1 - exp(-L1) and
//! loss_dis = exp(-L1), so similar pairs are pushed together and the
//! values stay in [0, 1].

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::model::{bind_gru, gru_step, zero_state, GruVars, ModelDims};

pub struct MeaningVars {
    fwd: GruVars,
    bwd: GruVars,
    reduce_w: Var,
    reduce_b: Var,
}

pub fn bind_meaning(g: &mut Graph, store: &ParamStore, dims: &ModelDims) -> MeaningVars {
    MeaningVars {
        fwd: bind_gru(g, store, "mean.fwd", dims.hidden),
        bwd: bind_gru(g, store, "mean.bwd", dims.hidden),
        reduce_w: g.param(store, "mean.reduce.w"),
        reduce_b: g.param(store, "mean.reduce.b"),
    }
}

/// v = reduce(concat(final forward hidden, final backward hidden)).
pub fn embed_sentence_vars(
    g: &mut Graph,
    mv: &MeaningVars,
    dims: &ModelDims,
    seq: &[Var],
) -> Var {
    assert!(!seq.is_empty(), "embed_sentence_vars: empty sequence");
    let mut fwd_h = zero_state(g, dims.hidden);
    for &x in seq {
        fwd_h = gru_step(g, &mv.fwd, x, fwd_h);
    }
    let mut bwd_h = zero_state(g, dims.hidden);
    for &x in seq.iter().rev() {
        bwd_h = gru_step(g, &mv.bwd, x, bwd_h);
    }
    let joined = g.concat_rows(&[fwd_h, bwd_h]);
    g.affine(mv.reduce_w, joined, mv.reduce_b)
}

pub fn loss_sim_vars(g: &mut Graph, v1: Var, v2: Var) -> Var {
    let d = g.l1_distance(v1, v2);
    let nd = g.scale(d, -1.0);
    let e = g.exp(nd);
    let one = g.scalar_const(1.0);
    g.sub(one, e)
}

pub fn loss_dis_vars(g: &mut Graph, v3: Var, v4: Var) -> Var {
    let d = g.l1_distance(v3, v4);
    let nd = g.scale(d, -1.0);
    g.exp(nd)
}

pub fn triplet_loss_vars(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    margin: f64,
) -> Var {
    assert!(!negatives.is_empty());
    let d_pos = g.l1_distance(anchor, positive);
    let m = g.scalar_const(margin);
    let hinges: Vec<Var> = negatives
        .iter()
        .map(|&n| {
            let d_neg = g.l1_distance(anchor, n);
            let gap = g.sub(d_pos, d_neg);
            let gap = g.add(gap, m);
            g.relu(gap)
        })
        .collect();
    g.mean_scalars(&hinges)
}

/// Which embeddings form the crosswise dissimilar pairs: for row i of the
/// first half against row i of the second half, ground-truth vs
/// ground-truth, generated vs ground-truth, or both (the default, giving
/// exactly B dissimilar pairs on a batch of B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissimilarPairing {
    GtGt,
    GenGt,
    #[default]
    Both,
}

/// Index pairs (into the batch) used by the dissimilar term.
pub fn dissimilar_index_pairs(batch_size: usize, pairing: DissimilarPairing) -> Vec<(usize, usize)> {
    let half = batch_size / 2;
    let mut pairs = Vec::new();
    for i in 0..half {
        let j = half + i;
        match pairing {
            DissimilarPairing::GtGt => pairs.push((i, j)),
            DissimilarPairing::GenGt => pairs.push((i, j)),
            DissimilarPairing::Both => {
                pairs.push((i, j));
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Pair bookkeeping for one batch loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct PairAccounting {
    pub similar_pairs: usize,
    /// Video-id pairs used by the dissimilar term.
    pub dissimilar_pairs: Vec<(String, String)>,
}

/// Batch-level meaning loss on already-embedded captions: mean similar
/// term over all B pairs plus mean dissimilar term over the crosswise
/// pairs (trick 3: similar aggregated first, dissimilar added after).
/// Returns (similar, dissimilar, accounting).
pub fn batch_meaning_loss_vars(
    g: &mut Graph,
    v_gen: &[Var],
    v_gt: &[Var],
    video_ids: &[String],
    pairing: DissimilarPairing,
) -> (Var, Var, PairAccounting) {
    let b = v_gen.len();
    assert!(b >= 2 && b.is_multiple_of(2), "batch size must be even and >= 2");
    assert_eq!(b, v_gt.len());
    assert_eq!(b, video_ids.len());

    let sim_terms: Vec<Var> =
        (0..b).map(|i| loss_sim_vars(g, v_gen[i], v_gt[i])).collect();
    let sim = g.mean_scalars(&sim_terms);

    let half = b / 2;
    let mut dis_terms = Vec::new();
    let mut accounting = PairAccounting { similar_pairs: b, dissimilar_pairs: Vec::new() };
    for i in 0..half {
        let j = half + i;
        debug_assert_ne!(video_ids[i], video_ids[j], "dissimilar pair shares a video");
        if matches!(pairing, DissimilarPairing::GtGt | DissimilarPairing::Both) {
            dis_terms.push(loss_dis_vars(g, v_gt[i], v_gt[j]));
            accounting.dissimilar_pairs.push((video_ids[i].clone(), video_ids[j].clone()));
        }
        if matches!(pairing, DissimilarPairing::GenGt | DissimilarPairing::Both) {
            dis_terms.push(loss_dis_vars(g, v_gen[i], v_gt[j]));
            accounting.dissimilar_pairs.push((video_ids[i].clone(), video_ids[j].clone()));
        }
    }
    let dis = g.mean_scalars(&dis_terms);
    (sim, dis, accounting)
}

// ---- plain-value API ----

fn l1(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// 1 − exp(−‖v1 − v2‖₁): zero for identical embeddings, approaching one
/// as the distance grows.
pub fn loss_sim(v1: &Array1<f64>, v2: &Array1<f64>) -> f64 {
    1.0 - (-l1(v1, v2)).exp()
}

/// exp(−‖v3 − v4‖₁): one for identical embeddings, approaching zero as
/// the distance grows.
pub fn loss_dis(v3: &Array1<f64>, v4: &Array1<f64>) -> f64 {
    (-l1(v3, v4)).exp()
}

/// Mean over negatives of max(0, ‖a−p‖₁ − ‖a−n‖₁ + margin).
pub fn triplet_loss(
    anchor: &Array1<f64>,
    positive: &Array1<f64>,
    negatives: &[Array1<f64>],
    margin: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Input("triplet_loss: no negatives".into()));
    }
    if margin <= 0.0 {
        return Err(Error::Config(format!("triplet margin must be > 0, got {margin}")));
    }
    let d_pos = l1(anchor, positive);
    let total: f64 = negatives
        .iter()
        .map(|n| (d_pos - l1(anchor, n) + margin).max(0.0))
        .sum();
    Ok(total / negatives.len() as f64)
}

/// Encode a sequence of d_emb vectors into one hidden-sized embedding.
pub fn embed_sentence(
    seq: &[Array1<f64>],
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<Array1<f64>> {
    if seq.is_empty() {
        return Err(Error::Input("embed_sentence: empty sequence".into()));
    }
    for (t, v) in seq.iter().enumerate() {
        if v.len() != dims.d_emb {
            return Err(Error::shape(
                "meaning.sentence_encoder",
                format!("step {t} vector is {}-d, expected d_emb={}", v.len(), dims.d_emb),
            ));
        }
    }
    let mut g = Graph::new();
    let mv = bind_meaning(&mut g, store, dims);
    let vars: Vec<Var> = seq
        .iter()
        .map(|v| g.constant(v.clone().insert_axis(Axis(1))))
        .collect();
    let out = embed_sentence_vars(&mut g, &mv, dims, &vars);
    Ok(g.value(out).column(0).to_owned())
}

/// Batch meaning loss on embedding matrices (row i = embedding of batch
/// item i). Returns similar mean + dissimilar mean.
pub fn batch_meaning_loss(
    v_gen: &Array2<f64>,
    v_gt: &Array2<f64>,
    video_ids: &[String],
    pairing: DissimilarPairing,
) -> Result<(f64, PairAccounting)> {
    let b = v_gen.nrows();
    if b < 2 || !b.is_multiple_of(2) {
        return Err(Error::Config(format!("batch size must be even and >= 2, got {b}")));
    }
    if v_gt.nrows() != b || video_ids.len() != b {
        return Err(Error::Input("batch_meaning_loss: misaligned inputs".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for id in video_ids {
            if !seen.insert(id) {
                return Err(Error::Input(format!("duplicate video_id `{id}` in batch")));
            }
        }
    }
    let mut g = Graph::new();
    let gen_vars: Vec<Var> = (0..b)
        .map(|i| g.constant(v_gen.row(i).to_owned().insert_axis(Axis(1))))
        .collect();
    let gt_vars: Vec<Var> = (0..b)
        .map(|i| g.constant(v_gt.row(i).to_owned().insert_axis(Axis(1))))
        .collect();
    let (sim, dis, accounting) =
        batch_meaning_loss_vars(&mut g, &gen_vars, &gt_vars, video_ids, pairing);
    let total = g.add(sim, dis);
    Ok((g.scalar(total), accounting))
}
