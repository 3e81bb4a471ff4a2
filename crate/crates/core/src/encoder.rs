//! Stacked two-layer recurrent encoder fusing per-frame visual features
//! with the dominant-object embedding.
//!
//! Per frame t, the upper LSTM consumes the visual feature vector and emits
//! h_t; the lower LSTM consumes concat(h_t, object embedding). The upper
//! hidden states feed the attention layer as H = (h_1 ... h_N); the final
//! lower (hidden, cell) pair initializes the decoder.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::model::{bind_lstm, lstm_step, zero_state, LstmVars, ModelDims};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// Upper-layer hidden states stacked column-wise, hidden x N.
    pub h_stack: Array2<f64>,
    /// Final lower-cell hidden state; initializes the decoder.
    pub final_hidden: Array1<f64>,
    /// Final lower-cell cell state; passed to the decoder with the hidden.
    pub final_cell: Array1<f64>,
}

/// The dimension contract: (upper input, lower input, hidden width).
/// The lower input is always hidden + d_emb.
pub fn encoder_input_dims(dims: &ModelDims) -> (usize, usize, usize) {
    (dims.d_vis, dims.fused_input(), dims.hidden)
}

pub struct EncoderVars {
    upper: LstmVars,
    lower: LstmVars,
}

pub fn bind_encoder(g: &mut Graph, store: &ParamStore, dims: &ModelDims) -> EncoderVars {
    EncoderVars {
        upper: bind_lstm(g, store, "enc.upper", dims.hidden),
        lower: bind_lstm(g, store, "enc.lower", dims.hidden),
    }
}

pub struct EncodedVars {
    pub h_stack: Var,
    pub final_hidden: Var,
    pub final_cell: Var,
}

/// Graph-level forward pass. `frames` is N x d_vis; `object_cols[t]` is the
/// (d_emb, 1) embedding of frame t's dominant object, passed as a column
/// of the E parameter during training so label embeddings stay trainable.
pub fn encode_vars(
    g: &mut Graph,
    enc: &EncoderVars,
    dims: &ModelDims,
    frames: &Array2<f64>,
    object_cols: &[Var],
) -> EncodedVars {
    let n = frames.nrows();
    assert!(n >= 1 && n == object_cols.len());
    let h = dims.hidden;

    let mut up_h = zero_state(g, h);
    let mut up_c = zero_state(g, h);
    let mut low_h = zero_state(g, h);
    let mut low_c = zero_state(g, h);
    let mut h_cols = Vec::with_capacity(n);

    for (frame_row, &object_col) in frames.rows().into_iter().zip(object_cols) {
        let frame = g.constant(frame_row.to_owned().insert_axis(Axis(1)));
        let (uh, uc) = lstm_step(g, &enc.upper, frame, up_h, up_c);
        up_h = uh;
        up_c = uc;
        h_cols.push(up_h);

        let fused = g.concat_rows(&[up_h, object_col]);
        let (lh, lc) = lstm_step(g, &enc.lower, fused, low_h, low_c);
        low_h = lh;
        low_c = lc;
    }

    EncodedVars {
        h_stack: g.concat_cols(&h_cols),
        final_hidden: low_h,
        final_cell: low_c,
    }
}

/// Forward pass over one video's feature pack; `object_embeddings` is
/// d_emb x N (column t = embedding of frame t's dominant object, the
/// NOOBJ column when the frame had no detection).
pub fn encode_pack(
    pack: &crate::data::FeaturePack,
    object_embeddings: &Array2<f64>,
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<EncoderOutput> {
    let frames = pack.frame_features.mapv(f64::from);
    encode(&frames, object_embeddings, store, dims)
}

/// Forward pass over one video. `frames` is N x d_vis (frame features) and
/// `object_embeddings` is d_emb x N (column t = embedding of frame t's
/// dominant object, the NOOBJ column when the frame had no detection).
pub fn encode(
    frames: &Array2<f64>,
    object_embeddings: &Array2<f64>,
    store: &ParamStore,
    dims: &ModelDims,
) -> Result<EncoderOutput> {
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::shape("encoder.upper", "no frames"));
    }
    if frames.ncols() != dims.d_vis {
        return Err(Error::shape(
            "encoder.upper",
            format!("frame features are {}-d, expected d_vis={}", frames.ncols(), dims.d_vis),
        ));
    }
    if object_embeddings.nrows() != dims.d_emb || object_embeddings.ncols() != n {
        return Err(Error::shape(
            "encoder.lower",
            format!(
                "object embeddings are {} x {}, expected {} x {n}",
                object_embeddings.nrows(),
                object_embeddings.ncols(),
                dims.d_emb,
            ),
        ));
    }

    let mut g = Graph::new();
    let enc = bind_encoder(&mut g, store, dims);
    let obj = g.constant(object_embeddings.clone());
    let object_cols: Vec<Var> = (0..n).map(|t| g.col(obj, t)).collect();
    let out = encode_vars(&mut g, &enc, dims, frames, &object_cols);
    Ok(EncoderOutput {
        h_stack: g.value(out.h_stack).clone(),
        final_hidden: g.value(out.final_hidden).column(0).to_owned(),
        final_cell: g.value(out.final_cell).column(0).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingMatrix;
    use crate::graph::{finite_difference_gradients, max_relative_error};
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const DIMS: ModelDims = ModelDims { d_vis: 3, hidden: 4, d_emb: 3, vocab: 7 };

    fn toy_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let emb = EmbeddingMatrix::random(DIMS.d_emb, DIMS.vocab, &mut rng);
        init_params(&DIMS, &emb, &mut rng)
    }

    fn zero_store() -> ParamStore {
        let mut store = toy_store(0);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            store.get_mut(&name).unwrap().fill(0.0);
        }
        store
    }

    fn rand_mat(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn input_dims_contract() {
        let default = ModelDims { d_vis: 2048, hidden: 1000, d_emb: 300, vocab: 25231 };
        assert_eq!(encoder_input_dims(&default), (2048, 1300, 1000));
        let toy = ModelDims { d_vis: 64, ..default };
        assert_eq!(encoder_input_dims(&toy), (64, 1300, 1000));
        let wider = ModelDims { hidden: 512, ..default };
        assert_eq!(encoder_input_dims(&wider), (2048, 512 + 300, 512));
    }

    #[test]
    fn zero_params_zero_input_yield_zero_column() {
        let store = zero_store();
        let frames = Array2::zeros((1, DIMS.d_vis));
        let objs = Array2::zeros((DIMS.d_emb, 1));
        let out = encode(&frames, &objs, &store, &DIMS).unwrap();
        assert_eq!(out.h_stack.dim(), (DIMS.hidden, 1));
        assert!(out.h_stack.iter().all(|&v| v == 0.0));
        assert!(out.final_hidden.iter().all(|&v| v == 0.0));
        assert!(out.final_cell.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_frames_give_distinct_columns() {
        let store = toy_store(1);
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let frames = rand_mat(&mut rng, 2, DIMS.d_vis);
        let objs = rand_mat(&mut rng, DIMS.d_emb, 2);
        let out = encode(&frames, &objs, &store, &DIMS).unwrap();
        assert_eq!(out.h_stack.ncols(), 2);
        let c0 = out.h_stack.column(0);
        let c1 = out.h_stack.column(1);
        assert!(c0.iter().zip(c1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn frame_order_matters() {
        let store = toy_store(2);
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        let frames = rand_mat(&mut rng, 2, DIMS.d_vis);
        let objs = rand_mat(&mut rng, DIMS.d_emb, 2);
        let forward = encode(&frames, &objs, &store, &DIMS).unwrap();

        let mut swapped_frames = frames.clone();
        let (r0, r1) = (frames.row(0).to_owned(), frames.row(1).to_owned());
        swapped_frames.row_mut(0).assign(&r1);
        swapped_frames.row_mut(1).assign(&r0);
        let mut swapped_objs = objs.clone();
        let (o0, o1) = (objs.column(0).to_owned(), objs.column(1).to_owned());
        swapped_objs.column_mut(0).assign(&o1);
        swapped_objs.column_mut(1).assign(&o0);

        let reversed = encode(&swapped_frames, &swapped_objs, &store, &DIMS).unwrap();
        let diff: f64 = (&forward.h_stack - &reversed.h_stack).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "encoder ignored frame order");
    }

    #[test]
    fn encode_is_deterministic() {
        let store = toy_store(3);
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let frames = rand_mat(&mut rng, 3, DIMS.d_vis);
        let objs = rand_mat(&mut rng, DIMS.d_emb, 3);
        let a = encode(&frames, &objs, &store, &DIMS).unwrap();
        let b = encode(&frames, &objs, &store, &DIMS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_states_bounded_by_one() {
        let store = toy_store(4);
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let frames = rand_mat(&mut rng, 5, DIMS.d_vis) * 10.0;
        let objs = rand_mat(&mut rng, DIMS.d_emb, 5) * 10.0;
        let out = encode(&frames, &objs, &store, &DIMS).unwrap();
        assert!(out.h_stack.iter().all(|&v| v.abs() <= 1.0));
        assert!(out.final_hidden.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn encode_pack_matches_matrix_entry_point() {
        let store = toy_store(8);
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let frames32 =
            Array2::from_shape_fn((2, DIMS.d_vis), |_| rng.random_range(-1.0f32..1.0f32));
        let pack = crate::data::FeaturePack {
            video_id: "p".into(),
            frame_features: frames32.clone(),
            detections: vec![vec![], vec![]],
        };
        let objs = rand_mat(&mut rng, DIMS.d_emb, 2);
        let via_pack = encode_pack(&pack, &objs, &store, &DIMS).unwrap();
        let via_matrix = encode(&frames32.mapv(f64::from), &objs, &store, &DIMS).unwrap();
        assert_eq!(via_pack, via_matrix);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let store = toy_store(5);
        let frames = Array2::zeros((2, DIMS.d_vis + 1));
        let objs = Array2::zeros((DIMS.d_emb, 2));
        let err = encode(&frames, &objs, &store, &DIMS).unwrap_err();
        assert!(err.to_string().contains("encoder.upper"), "{err}");
        let frames = Array2::zeros((2, DIMS.d_vis));
        let objs = Array2::zeros((DIMS.d_emb + 1, 2));
        let err = encode(&frames, &objs, &store, &DIMS).unwrap_err();
        assert!(err.to_string().contains("encoder.lower"), "{err}");
    }

    /// Analytic gradients of sum(H) with respect to every encoder parameter
    /// against central finite differences.
    #[test]
    fn gradient_check_probe_loss_sum_h() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        // restrict the store to encoder params so the sweep stays small
        let full = toy_store(6);
        let mut store = ParamStore::new();
        for (name, value) in full.iter() {
            if name.starts_with("enc.") {
                store.insert(name.clone(), value.clone());
            }
        }
        let frames = rand_mat(&mut rng, 3, DIMS.d_vis);
        let obj_mat = rand_mat(&mut rng, DIMS.d_emb, 3);

        let run = |ps: &ParamStore| -> (Graph, crate::graph::Var) {
            let mut g = Graph::new();
            let enc = bind_encoder(&mut g, ps, &DIMS);
            let obj = g.constant(obj_mat.clone());
            let cols: Vec<_> = (0..3).map(|t| g.col(obj, t)).collect();
            let out = encode_vars(&mut g, &enc, &DIMS, &frames, &cols);
            let s = g.sum(out.h_stack);
            // include the decoder-facing states so their paths are checked too
            let s2 = g.sum(out.final_hidden);
            let s3 = g.sum(out.final_cell);
            let t = g.add(s, s2);
            let t = g.add(t, s3);
            (g, t)
        };

        let (g, loss) = run(&store);
        let analytic = g.backward(loss);
        let numeric = finite_difference_gradients(&store, 1e-5, |ps| {
            let (g, loss) = run(ps);
            g.scalar(loss)
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "encoder gradient error {err}");
    }
}
