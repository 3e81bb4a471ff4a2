//! Training orchestration: word-by-word pretraining of the captioner,
//! triplet pretraining of the meaning head, and the stochastic mixed phase
//! that applies the meaning loss on a 70% coin flip.
//!
//! Two optimizers implement the update scoping: the similar term's
//! gradients update every parameter (they flow through the generated soft
//! embeddings back into the decoder, attention, encoder, and E), while the
//! dissimilar term's gradients are restricted to the `mean.*` scope before
//! its optimizer sees them, so encoder/decoder/E stay bitwise untouched
//! by dissimilar-only updates.
//!
//! Every random draw (init, batch order, caption sampling, coin flips)
//! comes from one seeded ChaCha generator in a fixed order, and the
//! generator's position is checkpointed, so runs are reproducible and
//! resumable step for step.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::{
    dominant_object, load_feature_pack, make_batches, Batch, DatasetManifest, Split,
};
use crate::decoder::{
    bind_decoder, generate_greedy_vars, generate_soft_vars, teacher_forced_loss_vars,
};
use crate::embeddings::{build_vocabulary, EmbeddingMatrix, Vocabulary, EOS, NOOBJ};
use crate::encoder::{bind_encoder, encode_vars, EncodedVars};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamStore, Var};
use crate::meaning::{
    batch_meaning_loss_vars, bind_meaning, embed_sentence_vars, triplet_loss_vars,
    DissimilarPairing, PairAccounting,
};
use crate::model::{init_params, ModelDims, MEANING_PREFIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_frames: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub d_vis: usize,
    pub vocab_min_count: usize,
    pub lr_all: f64,
    pub lr_meaning: f64,
    pub meaning_phase_probability: f64,
    pub triplet_margin: f64,
    pub seed: u64,
    /// Word-phase early stopping: epochs without validation improvement.
    pub patience: usize,
    pub max_len: usize,
    pub max_epochs_word: usize,
    pub pretrain_epochs: usize,
    pub mixed_steps: usize,
    pub grad_clip: f64,
    pub dissimilar_pairing: DissimilarPairing,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 50,
            max_frames: 80,
            hidden: 1000,
            d_emb: 300,
            d_vis: 2048,
            vocab_min_count: 1,
            lr_all: 1e-3,
            lr_meaning: 1e-3,
            meaning_phase_probability: 0.7,
            triplet_margin: 1.0,
            seed: 0,
            patience: 5,
            max_len: 30,
            max_epochs_word: 200,
            pretrain_epochs: 20,
            mixed_steps: 200,
            grad_clip: 5.0,
            dissimilar_pairing: DissimilarPairing::Both,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.meaning_phase_probability) {
            return Err(Error::Config(format!(
                "meaning_phase_probability must be in [0,1], got {}",
                self.meaning_phase_probability
            )));
        }
        if self.triplet_margin <= 0.0 {
            return Err(Error::Config("triplet_margin must be > 0".into()));
        }
        if self.max_len == 0 || self.max_frames == 0 {
            return Err(Error::Config("max_len and max_frames must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; checkpoints refuse to resume under
    /// a different configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        ModelDims { d_vis: self.d_vis, hidden: self.hidden, d_emb: self.d_emb, vocab }
    }
}

/// Adam moment estimates; tensors mirror the parameter names they track.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8). Only
/// parameters named in the gradient set are touched, which is what scopes
/// the two optimizers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: AdamState::default() }
    }

    pub fn with_state(lr: f64, state: AdamState) -> Self {
        Adam { state, ..Adam::new(lr) }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        if grads.is_empty() {
            return;
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads.iter() {
            let value = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("optimizer: unknown parameter `{name}`"));
            if self.state.m.get(name).is_none() {
                self.state.m.insert(name.clone(), Array2::zeros(grad.raw_dim()));
                self.state.v.insert(name.clone(), Array2::zeros(grad.raw_dim()));
            }
            let m = self.state.m.get_mut(name).expect("m initialized");
            let v = self.state.v.get_mut(name).expect("v initialized");
            for ((p, g), (m, v)) in value
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// A video's model-ready inputs: widened frame features and the vocabulary
/// id of each frame's dominant object (NOOBJ when the frame had none).
struct VideoInputs {
    features: Array2<f64>,
    object_ids: Vec<usize>,
}

/// One triplet-pretraining step, for tests and logging.
#[derive(Debug, Clone)]
pub struct PretrainStepReport {
    pub loss: f64,
    pub anchors: usize,
    pub negatives_per_anchor: usize,
}

/// One step of the mixed phase, for tests and logging.
#[derive(Debug, Clone)]
pub struct MixedStepReport {
    pub used_meaning: bool,
    pub loss: f64,
    pub sim_term: Option<f64>,
    pub dis_term: Option<f64>,
    pub accounting: Option<PairAccounting>,
    /// Sentence-encoder invocations in this step (2B on a meaning step).
    pub sentence_encodings: usize,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub opt_all: Adam,
    pub opt_meaning: Adam,
    pub epoch: u64,
    pub step: u64,
    rng: ChaCha20Rng,
    epoch_seed: u64,
    batch_cursor: usize,
    batches: Vec<Batch>,
    manifest: DatasetManifest,
    videos: BTreeMap<String, VideoInputs>,
}

impl Trainer {
    /// Fresh trainer: builds the vocabulary from the manifest's captions,
    /// initializes parameters from the config seed, loads every feature
    /// pack, and prepares the first epoch of batches.
    pub fn new(config: TrainingConfig, manifest: &DatasetManifest) -> Result<Trainer> {
        config.validate()?;
        if manifest.entries_for(Split::Train).next().is_none() {
            return Err(Error::Config("dataset has no train split".into()));
        }
        let vocab = build_vocabulary(&manifest.all_captions(), config.vocab_min_count)?;
        let dims = config.dims(vocab.len());
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let emb = EmbeddingMatrix::random(dims.d_emb, dims.vocab, &mut rng);
        let params = init_params(&dims, &emb, &mut rng);
        let videos = load_videos(manifest, &vocab, &config)?;
        let epoch_seed = rng.next_u64();
        let batches = make_batches(manifest, config.batch_size, epoch_seed)?;
        Ok(Trainer {
            opt_all: Adam::new(config.lr_all),
            opt_meaning: Adam::new(config.lr_meaning),
            config,
            dims,
            vocab,
            params,
            epoch: 0,
            step: 0,
            rng,
            epoch_seed,
            batch_cursor: 0,
            batches,
            manifest: manifest.clone(),
            videos,
        })
    }

    /// Resume from a checkpoint; refuses a config-hash mismatch.
    pub fn from_checkpoint(
        config: TrainingConfig,
        manifest: &DatasetManifest,
        ckpt: &Checkpoint,
    ) -> Result<Trainer> {
        config.validate()?;
        if config.hash() != ckpt.config.hash() {
            return Err(Error::Config(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        let vocab = Vocabulary::from_tokens(ckpt.vocab_tokens.clone())?;
        let dims = ckpt.dims;
        let mut rng = ChaCha20Rng::from_seed(ckpt.rng.seed);
        rng.set_word_pos(ckpt.rng.word_pos);
        let videos = load_videos(manifest, &vocab, &config)?;
        let batches = make_batches(manifest, config.batch_size, ckpt.epoch_seed)?;
        Ok(Trainer {
            opt_all: Adam::with_state(config.lr_all, ckpt.opt_all.clone()),
            opt_meaning: Adam::with_state(config.lr_meaning, ckpt.opt_meaning.clone()),
            config,
            dims,
            vocab,
            params: ckpt.params.clone(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            rng,
            epoch_seed: ckpt.epoch_seed,
            batch_cursor: ckpt.batch_cursor as usize,
            batches,
            manifest: manifest.clone(),
            videos,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            dims: self.dims,
            vocab_tokens: self.vocab.tokens().to_vec(),
            epoch: self.epoch,
            step: self.step,
            epoch_seed: self.epoch_seed,
            batch_cursor: self.batch_cursor as u64,
            rng: RngState { seed: self.rng.get_seed(), word_pos: self.rng.get_word_pos() },
            params: self.params.clone(),
            opt_all: self.opt_all.state.clone(),
            opt_meaning: self.opt_meaning.state.clone(),
        }
    }

    /// Next batch in the deterministic schedule, rolling the epoch over
    /// (and drawing its shuffle seed) when the current one is exhausted.
    pub fn next_batch(&mut self) -> Batch {
        if self.batch_cursor >= self.batches.len() {
            self.epoch += 1;
            self.epoch_seed = self.rng.next_u64();
            self.batches = make_batches(&self.manifest, self.config.batch_size, self.epoch_seed)
                .expect("batch settings validated at construction");
            self.batch_cursor = 0;
        }
        let batch = self.batches[self.batch_cursor].clone();
        self.batch_cursor += 1;
        batch
    }

    fn inputs(&self, video_id: &str) -> &VideoInputs {
        self.videos.get(video_id).expect("video inputs preloaded")
    }

    /// Graph forward for one video's encoder, with object labels embedded
    /// through the E parameter so they stay trainable.
    fn encode_video(&self, g: &mut Graph, e_var: Var, video_id: &str) -> EncodedVars {
        let enc = bind_encoder(g, &self.params, &self.dims);
        let inputs = self.inputs(video_id);
        let cols: Vec<Var> = inputs.object_ids.iter().map(|&id| g.col(e_var, id)).collect();
        encode_vars(g, &enc, &self.dims, &inputs.features, &cols)
    }

    /// One word-by-word optimization step over a batch. Returns the batch
    /// loss (mean of per-caption summed cross entropies).
    fn word_step_on(&mut self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &self.params, &self.dims);
        let mut losses = Vec::with_capacity(batch.len());
        for item in batch {
            let enc = self.encode_video(&mut g, dec.e, &item.video_id);
            let wrapped = self.vocab.wrap(&item.caption.tokens);
            losses.push(teacher_forced_loss_vars(&mut g, &dec, &enc, &wrapped));
        }
        let loss = g.mean_scalars(&losses);
        let mut grads = g.backward(loss);
        grads.clip_global_norm(self.config.grad_clip);
        self.opt_all.step(&mut self.params, &grads);
        self.step += 1;
        Ok(g.scalar(loss))
    }

    pub fn word_step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        self.word_step_on(&batch)
    }

    /// Mean teacher-forced loss over a split, forward only, averaged over
    /// every caption of every video. Deterministic.
    pub fn split_loss(&self, split: Split) -> Result<f64> {
        let entries: Vec<_> = self.manifest.entries_for(split).collect();
        if entries.is_empty() {
            return Err(Error::Input(format!("split {split:?} is empty")));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for entry in entries {
            let mut g = Graph::new();
            let dec = bind_decoder(&mut g, &self.params, &self.dims);
            let enc = self.encode_video(&mut g, dec.e, &entry.video_id);
            for caption in &entry.captions {
                let wrapped = self.vocab.wrap(&caption.tokens);
                let loss = teacher_forced_loss_vars(&mut g, &dec, &enc, &wrapped);
                total += g.scalar(loss);
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Validation loss for early stopping; falls back to the train split
    /// when the dataset has no validation videos.
    pub fn validation_loss(&self) -> Result<f64> {
        if self.manifest.entries_for(Split::Val).next().is_some() {
            self.split_loss(Split::Val)
        } else {
            self.split_loss(Split::Train)
        }
    }

    fn batches_per_epoch(&self) -> usize {
        self.batches.len().max(1)
    }

    /// One triplet-pretraining step: anchors are generated-caption
    /// embeddings, positives the paired ground truths, negatives the other
    /// B−1 ground truths. Only `mean.*` parameters update.
    fn pretrain_step_on(&mut self, batch: &Batch) -> Result<PretrainStepReport> {
        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &self.params, &self.dims);
        let mv = bind_meaning(&mut g, &self.params, &self.dims);
        let mut v_gen = Vec::with_capacity(batch.len());
        let mut v_gt = Vec::with_capacity(batch.len());
        for item in batch {
            let enc = self.encode_video(&mut g, dec.e, &item.video_id);
            let (soft, _) = generate_soft_vars(&mut g, &dec, &enc, self.config.max_len);
            v_gen.push(embed_sentence_vars(&mut g, &mv, &self.dims, &soft));
            let gt_seq = self.gt_sequence(&mut g, dec.e, &item.caption.tokens);
            v_gt.push(embed_sentence_vars(&mut g, &mv, &self.dims, &gt_seq));
        }
        let mut per_anchor = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let negatives: Vec<Var> =
                (0..batch.len()).filter(|&j| j != i).map(|j| v_gt[j]).collect();
            per_anchor.push(triplet_loss_vars(
                &mut g,
                v_gen[i],
                v_gt[i],
                &negatives,
                self.config.triplet_margin,
            ));
        }
        let loss = g.mean_scalars(&per_anchor);
        let mut grads = g.backward(loss).restrict_to_prefix(MEANING_PREFIX);
        grads.clip_global_norm(self.config.grad_clip);
        self.opt_meaning.step(&mut self.params, &grads);
        self.step += 1;
        Ok(PretrainStepReport {
            loss: g.scalar(loss),
            anchors: batch.len(),
            negatives_per_anchor: batch.len() - 1,
        })
    }

    pub fn pretrain_step(&mut self) -> Result<PretrainStepReport> {
        let batch = self.next_batch();
        self.pretrain_step_on(&batch)
    }

    /// Ground-truth caption as embedding columns, terminated with the EOS
    /// embedding to mirror generated sequences.
    fn gt_sequence(&self, g: &mut Graph, e_var: Var, tokens: &[String]) -> Vec<Var> {
        let mut ids = self.vocab.ids(tokens);
        ids.push(EOS);
        ids.into_iter().map(|id| g.col(e_var, id)).collect()
    }

    /// One mixed-phase step: with probability `meaning_phase_probability`
    /// run a meaning step (similar term updates everything via
    /// optimizer_all, dissimilar term updates the meaning head via
    /// optimizer_meaning), otherwise a word-by-word step.
    pub fn mixed_step(&mut self) -> Result<MixedStepReport> {
        let batch = self.next_batch();
        let coin: f64 = self.rng.random();
        if coin < self.config.meaning_phase_probability {
            self.meaning_step_on(&batch, false)
        } else {
            let loss = self.word_step_on(&batch)?;
            Ok(MixedStepReport {
                used_meaning: false,
                loss,
                sim_term: None,
                dis_term: None,
                accounting: None,
                sentence_encodings: 0,
            })
        }
    }

    /// Meaning step over a batch. With `dissimilar_only` the similar term
    /// is evaluated but its update is skipped; the probe used to verify
    /// optimizer isolation.
    pub fn meaning_step_on(
        &mut self,
        batch: &Batch,
        dissimilar_only: bool,
    ) -> Result<MixedStepReport> {
        if batch.len() < 2 || !batch.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "meaning step needs an even batch of >= 2, got {}",
                batch.len()
            )));
        }
        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &self.params, &self.dims);
        let mv = bind_meaning(&mut g, &self.params, &self.dims);
        let mut v_gen = Vec::with_capacity(batch.len());
        let mut v_gt = Vec::with_capacity(batch.len());
        let mut sentence_encodings = 0usize;
        for item in batch {
            let enc = self.encode_video(&mut g, dec.e, &item.video_id);
            let (soft, _) = generate_soft_vars(&mut g, &dec, &enc, self.config.max_len);
            v_gen.push(embed_sentence_vars(&mut g, &mv, &self.dims, &soft));
            sentence_encodings += 1;
            let gt_seq = self.gt_sequence(&mut g, dec.e, &item.caption.tokens);
            v_gt.push(embed_sentence_vars(&mut g, &mv, &self.dims, &gt_seq));
            sentence_encodings += 1;
        }
        let ids: Vec<String> = batch.iter().map(|b| b.video_id.clone()).collect();
        let (sim, dis, accounting) = batch_meaning_loss_vars(
            &mut g,
            &v_gen,
            &v_gt,
            &ids,
            self.config.dissimilar_pairing,
        );

        // similar term first (trick 3), through optimizer_all
        if !dissimilar_only {
            let mut sim_grads = g.backward(sim);
            sim_grads.clip_global_norm(self.config.grad_clip);
            self.opt_all.step(&mut self.params, &sim_grads);
        }
        // dissimilar term through the meaning-scoped optimizer
        let mut dis_grads = g.backward(dis).restrict_to_prefix(MEANING_PREFIX);
        dis_grads.clip_global_norm(self.config.grad_clip);
        self.opt_meaning.step(&mut self.params, &dis_grads);

        self.step += 1;
        let sim_val = g.scalar(sim);
        let dis_val = g.scalar(dis);
        Ok(MixedStepReport {
            used_meaning: true,
            loss: sim_val + dis_val,
            sim_term: Some(sim_val),
            dis_term: Some(dis_val),
            accounting: Some(accounting),
            sentence_encodings,
        })
    }

    /// Similar and dissimilar terms measured on the train split in manifest
    /// order (first caption per video), forward only. Used to track what
    /// the meaning phase is doing.
    pub fn meaning_terms_on_train(&self) -> Result<(f64, f64)> {
        let entries: Vec<_> = self.manifest.entries_for(Split::Train).collect();
        let usable = entries.len() - entries.len() % 2;
        if usable < 2 {
            return Err(Error::Input("need at least two train videos".into()));
        }
        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &self.params, &self.dims);
        let mv = bind_meaning(&mut g, &self.params, &self.dims);
        let mut v_gen = Vec::with_capacity(usable);
        let mut v_gt = Vec::with_capacity(usable);
        let mut ids = Vec::with_capacity(usable);
        for entry in &entries[..usable] {
            let enc = self.encode_video(&mut g, dec.e, &entry.video_id);
            let (soft, _) = generate_soft_vars(&mut g, &dec, &enc, self.config.max_len);
            v_gen.push(embed_sentence_vars(&mut g, &mv, &self.dims, &soft));
            let gt_seq = self.gt_sequence(&mut g, dec.e, &entry.captions[0].tokens);
            v_gt.push(embed_sentence_vars(&mut g, &mv, &self.dims, &gt_seq));
            ids.push(entry.video_id.clone());
        }
        let (sim, dis, _) = batch_meaning_loss_vars(
            &mut g,
            &v_gen,
            &v_gt,
            &ids,
            self.config.dissimilar_pairing,
        );
        Ok((g.scalar(sim), g.scalar(dis)))
    }

    /// Greedy caption ids for one video under the current parameters.
    pub fn greedy_caption(&self, video_id: &str) -> Vec<usize> {
        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &self.params, &self.dims);
        let enc = self.encode_video(&mut g, dec.e, video_id);
        generate_greedy_vars(&mut g, &dec, &enc, self.config.max_len)
    }
}


/// Vocabulary id of each frame's dominant object; NOOBJ for detector
/// misses, UNK for labels outside the vocabulary.
pub fn object_ids_for_pack(pack: &crate::data::FeaturePack, vocab: &Vocabulary) -> Vec<usize> {
    pack.detections
        .iter()
        .map(|dets| match dominant_object(dets) {
            Some(label) => vocab.id(label),
            None => NOOBJ,
        })
        .collect()
}

fn load_videos(
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    config: &TrainingConfig,
) -> Result<BTreeMap<String, VideoInputs>> {
    let mut videos = BTreeMap::new();
    for entry in &manifest.entries {
        let pack = load_feature_pack(&manifest.pack_path(entry), config.max_frames)?;
        if pack.d_vis() != config.d_vis {
            return Err(Error::Config(format!(
                "video `{}` has d_vis {}, config says {}",
                entry.video_id,
                pack.d_vis(),
                config.d_vis
            )));
        }
        let features = pack.frame_features.mapv(f64::from);
        let object_ids = object_ids_for_pack(&pack, vocab);
        videos.insert(entry.video_id.clone(), VideoInputs { features, object_ids });
    }
    Ok(videos)
}

/// Phase 1: word-by-word training until the validation loss stops
/// improving for `patience` epochs (capped at `max_epochs_word`). Returns
/// the best-validation checkpoint.
pub fn train_word_phase(config: &TrainingConfig, manifest: &DatasetManifest) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config.clone(), manifest)?;
    run_word_phase(&mut trainer)
}

fn run_word_phase(trainer: &mut Trainer) -> Result<Checkpoint> {
    let mut best_loss = f64::INFINITY;
    let mut best = trainer.to_checkpoint();
    let mut since_best = 0usize;
    for _ in 0..trainer.config.max_epochs_word {
        let steps = trainer.batches_per_epoch();
        for _ in 0..steps {
            trainer.word_step()?;
        }
        let val = trainer.validation_loss()?;
        if val < best_loss {
            best_loss = val;
            best = trainer.to_checkpoint();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > trainer.config.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// Phase 1.5: triplet pretraining of the meaning head; everything outside
/// `mean.*` stays bitwise untouched.
pub fn pretrain_meaning(
    config: &TrainingConfig,
    manifest: &DatasetManifest,
    ckpt: &Checkpoint,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::from_checkpoint(config.clone(), manifest, ckpt)?;
    for _ in 0..config.pretrain_epochs {
        let steps = trainer.batches_per_epoch();
        for _ in 0..steps {
            trainer.pretrain_step()?;
        }
    }
    Ok(trainer.to_checkpoint())
}

/// Phase 2: `mixed_steps` stochastic steps mixing the meaning loss (at the
/// configured probability) with word-by-word steps.
pub fn train_mixed_phase(
    config: &TrainingConfig,
    manifest: &DatasetManifest,
    ckpt: &Checkpoint,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::from_checkpoint(config.clone(), manifest, ckpt)?;
    for _ in 0..config.mixed_steps {
        trainer.mixed_step()?;
    }
    Ok(trainer.to_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthSpec};
    use tempfile::tempdir;

    fn toy_config() -> TrainingConfig {
        TrainingConfig {
            batch_size: 4,
            max_frames: 8,
            hidden: 6,
            d_emb: 5,
            d_vis: 8,
            lr_all: 3e-3,
            lr_meaning: 3e-3,
            seed: 11,
            max_len: 8,
            max_epochs_word: 3,
            pretrain_epochs: 2,
            mixed_steps: 4,
            ..TrainingConfig::default()
        }
    }

    fn toy_dataset(dir: &std::path::Path, n: usize, seed: u64) -> DatasetManifest {
        let spec = SynthSpec {
            n_videos: n,
            vocab_events: 3,
            seed,
            d_vis: 8,
            min_frames: 2,
            max_frames: 4,
            ..Default::default()
        };
        generate_synthetic_dataset(dir, &spec).unwrap()
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Array2::from_elem((1, 2), 1.0));
        let mut g = Graph::new();
        let w = g.param(&params, "w");
        let sq = g.mul(w, w);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &grads);
        let w = params.get("w").unwrap();
        assert!(w.iter().all(|&x| x < 1.0), "Adam failed to descend: {w:?}");
    }

    #[test]
    fn adam_skips_unnamed_parameters() {
        let mut params = ParamStore::new();
        params.insert("touched", Array2::from_elem((1, 1), 1.0));
        params.insert("frozen", Array2::from_elem((1, 1), 1.0));
        let mut g = Graph::new();
        let w = g.param(&params, "touched");
        let loss = g.sum(w);
        let grads = g.backward(loss);
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &grads);
        assert_eq!(params.get("frozen").unwrap()[(0, 0)], 1.0);
        assert_ne!(params.get("touched").unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn config_hash_changes_with_fields() {
        let a = TrainingConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), TrainingConfig::default().hash());
    }

    #[test]
    fn word_steps_reduce_training_loss() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 3);
        let mut trainer = Trainer::new(toy_config(), &manifest).unwrap();
        let before = trainer.split_loss(Split::Train).unwrap();
        for _ in 0..30 {
            trainer.word_step().unwrap();
        }
        let after = trainer.split_loss(Split::Train).unwrap();
        assert!(after < before, "loss did not improve: {before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 5);
        let run = || {
            let mut t = Trainer::new(toy_config(), &manifest).unwrap();
            for _ in 0..5 {
                t.word_step().unwrap();
            }
            for _ in 0..3 {
                t.mixed_step().unwrap();
            }
            t.to_checkpoint()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_leaves_captioner_bitwise_unchanged() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 7);
        let config = toy_config();
        let word_ckpt = train_word_phase(&config, &manifest).unwrap();
        let after = pretrain_meaning(&config, &manifest, &word_ckpt).unwrap();
        for (name, value) in word_ckpt.params.iter() {
            if !name.starts_with(MEANING_PREFIX) {
                assert_eq!(
                    value,
                    after.params.get(name).unwrap(),
                    "parameter `{name}` changed during pretraining"
                );
            }
        }
        // and the meaning head did move
        let moved = word_ckpt
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(MEANING_PREFIX))
            .any(|(n, v)| v != after.params.get(n).unwrap());
        assert!(moved, "meaning head did not change during pretraining");
    }

    /// Triplet pretraining only separates anchors once the captioner
    /// generates video-specific captions, so it runs after the word phase
    /// (the order the training procedure prescribes).
    #[test]
    fn pretrain_uses_remaining_batch_as_negatives_and_improves() {
        let dir = tempdir().unwrap();
        let spec = SynthSpec {
            n_videos: 4,
            vocab_events: 4,
            seed: 8,
            d_vis: 8,
            min_frames: 2,
            max_frames: 4,
            ..Default::default()
        };
        let manifest = generate_synthetic_dataset(dir.path(), &spec).unwrap();
        let config = TrainingConfig {
            batch_size: 2,
            hidden: 16,
            d_emb: 8,
            d_vis: 8,
            seed: 11,
            max_len: 8,
            max_epochs_word: 150,
            patience: 300,
            ..toy_config()
        };
        let word = train_word_phase(&config, &manifest).unwrap();
        let mut trainer = Trainer::from_checkpoint(config, &manifest, &word).unwrap();
        let first = trainer.pretrain_step().unwrap();
        assert_eq!(first.negatives_per_anchor, first.anchors - 1);
        let mut last = first.clone();
        for _ in 0..29 {
            last = trainer.pretrain_step().unwrap();
        }
        assert!(
            last.loss < 0.5 * first.loss,
            "triplet loss did not decrease: {} -> {}",
            first.loss,
            last.loss
        );
    }

    #[test]
    fn dissimilar_only_steps_leave_captioner_bitwise_unchanged() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 9);
        let mut trainer = Trainer::new(toy_config(), &manifest).unwrap();
        let before = trainer.params.clone();
        for _ in 0..10 {
            let batch = trainer.next_batch();
            trainer.meaning_step_on(&batch, true).unwrap();
        }
        for (name, value) in before.iter() {
            if !name.starts_with(MEANING_PREFIX) {
                assert_eq!(
                    value,
                    trainer.params.get(name).unwrap(),
                    "parameter `{name}` touched by dissimilar-only updates"
                );
            }
        }
    }

    #[test]
    fn meaning_step_counts_encodings_and_pairs() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 13);
        let mut trainer = Trainer::new(toy_config(), &manifest).unwrap();
        let batch = trainer.next_batch();
        let report = trainer.meaning_step_on(&batch, false).unwrap();
        assert!(report.used_meaning);
        assert_eq!(report.sentence_encodings, 2 * batch.len());
        let acc = report.accounting.unwrap();
        assert_eq!(acc.similar_pairs, batch.len());
        assert_eq!(acc.dissimilar_pairs.len(), batch.len());
        for (a, b) in &acc.dissimilar_pairs {
            assert_ne!(a, b);
        }
    }

    #[test]
    fn similar_term_gradient_reaches_encoder() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 15);
        let mut trainer = Trainer::new(toy_config(), &manifest).unwrap();
        let before = trainer.params.get("enc.upper.wx").unwrap().clone();
        let batch = trainer.next_batch();
        trainer.meaning_step_on(&batch, false).unwrap();
        let after = trainer.params.get("enc.upper.wx").unwrap();
        assert_ne!(&before, after, "similar term did not move encoder parameters");
    }

    #[test]
    fn mixed_probability_zero_degenerates_to_word_steps() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 17);
        let mut config = toy_config();
        config.meaning_phase_probability = 0.0;
        let mut trainer = Trainer::new(config, &manifest).unwrap();
        for _ in 0..5 {
            let report = trainer.mixed_step().unwrap();
            assert!(!report.used_meaning);
        }
    }

    #[test]
    fn resume_mid_run_reproduces_unbroken_run() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 19);
        let config = toy_config();

        // unbroken: 4 mixed steps
        let mut full = Trainer::new(config.clone(), &manifest).unwrap();
        for _ in 0..2 {
            full.word_step().unwrap();
        }
        let mid = full.to_checkpoint();
        let mut full_reports = Vec::new();
        for _ in 0..3 {
            full_reports.push(full.mixed_step().unwrap().loss);
        }

        // resumed from the mid checkpoint
        let mut resumed = Trainer::from_checkpoint(config, &manifest, &mid).unwrap();
        let mut resumed_reports = Vec::new();
        for _ in 0..3 {
            resumed_reports.push(resumed.mixed_step().unwrap().loss);
        }
        assert_eq!(full_reports, resumed_reports);
        assert_eq!(full.to_checkpoint(), resumed.to_checkpoint());
    }

    #[test]
    fn from_checkpoint_refuses_altered_config() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 21);
        let config = toy_config();
        let trainer = Trainer::new(config.clone(), &manifest).unwrap();
        let ckpt = trainer.to_checkpoint();
        let mut altered = config;
        altered.lr_all *= 2.0;
        assert!(Trainer::from_checkpoint(altered, &manifest, &ckpt).is_err());
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let dir = tempdir().unwrap();
        let manifest = toy_dataset(dir.path(), 4, 23);
        let mut config = toy_config();
        config.patience = 0;
        config.max_epochs_word = 50;
        // learning rate so large the loss oscillates quickly
        config.lr_all = 0.5;
        let mut trainer = Trainer::new(config, &manifest).unwrap();
        run_word_phase(&mut trainer).unwrap();
        // must have stopped well before the epoch cap
        assert!(trainer.epoch < 50, "patience=0 did not stop early (epoch {})", trainer.epoch);
    }
}
