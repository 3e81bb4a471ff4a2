//! Dataset manifests, feature-pack ingestion, dominant-object selection,
//! batching, and a synthetic dataset generator for desk-scale experiments.
//!
//! On-disk layout, one directory per video:
//!   `meta.json`    {video_id, n_frames, d_vis}
//!   `frames.bin`   n_frames x d_vis little-endian f32, row-major
//!   `objects.json` array (length n_frames) of arrays of detections
//! plus, at the dataset root, `manifest.json` (entries and split) and
//! `captions.jsonl` (one {video_id, caption} per line, pre-tokenized by
//! whitespace after lowercasing and punctuation stripping).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_FRAMES: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub objectness: f64,
    pub bbox: [f64; 4],
}

/// Per-video bundle of frame CNN features plus per-frame detections.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub video_id: String,
    /// n_frames x d_vis. Stored as f32 to match the on-disk payload; the
    /// encoder widens to f64.
    pub frame_features: Array2<f32>,
    pub detections: Vec<Vec<Detection>>,
}

impl FeaturePack {
    pub fn n_frames(&self) -> usize {
        self.frame_features.nrows()
    }

    pub fn d_vis(&self) -> usize {
        self.frame_features.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Pack directory, relative to the dataset root.
    pub pack: PathBuf,
    pub split: Split,
    pub captions: Vec<CaptionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn pack_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.pack)
    }

    pub fn all_captions(&self) -> Vec<CaptionRecord> {
        self.entries.iter().flat_map(|e| e.captions.iter().cloned()).collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if !seen.insert(&entry.video_id) {
                return Err(Error::Format {
                    path: self.root.join("manifest.json"),
                    message: format!("duplicate video_id `{}`", entry.video_id),
                });
            }
            if entry.captions.is_empty() {
                return Err(Error::Format {
                    path: self.root.join("captions.jsonl"),
                    message: format!("video `{}` has no captions", entry.video_id),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub video_id: String,
    pub caption: CaptionRecord,
}

pub type Batch = Vec<BatchItem>;

// ---- on-disk records ----

#[derive(Serialize, Deserialize)]
struct PackMeta {
    video_id: String,
    n_frames: usize,
    d_vis: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    entries: Vec<ManifestFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFileEntry {
    video_id: String,
    pack: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    video_id: String,
    caption: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Evenly spaced frame indices when a stored pack exceeds `max_frames`:
/// constant stride `floor(n / max_frames)` starting at index 0, which keeps
/// the selection deterministic and order-preserving.
pub fn subsample_indices(n_frames: usize, max_frames: usize) -> Vec<usize> {
    if n_frames <= max_frames {
        return (0..n_frames).collect();
    }
    let stride = n_frames / max_frames;
    (0..max_frames).map(|i| i * stride).collect()
}

/// Load and validate one feature pack, capping the frame count at
/// `max_frames` by uniform subsampling.
pub fn load_feature_pack(dir: &Path, max_frames: usize) -> Result<FeaturePack> {
    let meta_path = dir.join("meta.json");
    let meta: PackMeta = read_json(&meta_path)?;
    if meta.n_frames == 0 {
        return Err(Error::format(&meta_path, "n_frames: must be >= 1"));
    }
    if meta.d_vis == 0 {
        return Err(Error::format(&meta_path, "d_vis: must be >= 1"));
    }

    let frames_path = dir.join("frames.bin");
    let mut file = fs::File::open(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(&frames_path, e))?;
    let expected = meta.n_frames * meta.d_vis * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &frames_path,
            format!(
                "frames.bin: expected {expected} bytes for {} x {} f32, found {}",
                meta.n_frames,
                meta.d_vis,
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(meta.n_frames * meta.d_vis);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(&frames_path, "frame_features: non-finite value"));
        }
        values.push(v);
    }
    let features = Array2::from_shape_vec((meta.n_frames, meta.d_vis), values)
        .expect("length checked above");

    let objects_path = dir.join("objects.json");
    let detections: Vec<Vec<Detection>> = read_json(&objects_path)?;
    if detections.len() != meta.n_frames {
        return Err(Error::format(
            &objects_path,
            format!(
                "detections: length {} does not match n_frames {}",
                detections.len(),
                meta.n_frames
            ),
        ));
    }
    for (i, frame) in detections.iter().enumerate() {
        for det in frame {
            if det.label.is_empty() {
                return Err(Error::format(&objects_path, format!("label: empty at frame {i}")));
            }
            if !(0.0..=1.0).contains(&det.objectness) || !det.objectness.is_finite() {
                return Err(Error::format(
                    &objects_path,
                    format!("objectness: {} out of [0,1] at frame {i}", det.objectness),
                ));
            }
        }
    }

    let indices = subsample_indices(meta.n_frames, max_frames);
    let pack = if indices.len() == meta.n_frames {
        FeaturePack { video_id: meta.video_id, frame_features: features, detections }
    } else {
        let mut sub = Array2::zeros((indices.len(), meta.d_vis));
        for (r, &i) in indices.iter().enumerate() {
            sub.row_mut(r).assign(&features.row(i));
        }
        let dets = indices.iter().map(|&i| detections[i].clone()).collect();
        FeaturePack { video_id: meta.video_id, frame_features: sub, detections: dets }
    };
    Ok(pack)
}

/// Write a pack in the on-disk format. Inverse of [`load_feature_pack`]
/// for packs within the frame cap.
pub fn write_feature_pack(dir: &Path, pack: &FeaturePack) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = PackMeta {
        video_id: pack.video_id.clone(),
        n_frames: pack.n_frames(),
        d_vis: pack.d_vis(),
    };
    write_json(&dir.join("meta.json"), &meta)?;

    let frames_path = dir.join("frames.bin");
    let mut file = fs::File::create(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let mut bytes = Vec::with_capacity(pack.frame_features.len() * 4);
    for &v in pack.frame_features.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes).map_err(|e| Error::io(&frames_path, e))?;

    write_json(&dir.join("objects.json"), &pack.detections)
}

/// Label of the highest-objectness detection; ties break toward the lowest
/// index, empty input yields `None`.
pub fn dominant_object(detections: &[Detection]) -> Option<&str> {
    let mut best: Option<&Detection> = None;
    for det in detections {
        if best.is_none_or(|b| det.objectness > b.objectness) {
            best = Some(det);
        }
    }
    best.map(|d| d.label.as_str())
}

/// Load `manifest.json` + `captions.jsonl` from a dataset root.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest_path = root.join("manifest.json");
    let file: ManifestFile = read_json(&manifest_path)?;

    let captions_path = root.join("captions.jsonl");
    let reader = BufReader::new(
        fs::File::open(&captions_path).map_err(|e| Error::io(&captions_path, e))?,
    );
    let mut captions: BTreeMap<String, Vec<CaptionRecord>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&captions_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaptionLine =
            serde_json::from_str(&line).map_err(|e| Error::json(&captions_path, e))?;
        let tokens: Vec<String> =
            parsed.caption.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::format(
                &captions_path,
                format!("caption: empty at line {}", lineno + 1),
            ));
        }
        captions
            .entry(parsed.video_id.clone())
            .or_default()
            .push(CaptionRecord { video_id: parsed.video_id, tokens });
    }

    let entries = file
        .entries
        .into_iter()
        .map(|e| {
            let captions = captions.remove(&e.video_id).unwrap_or_default();
            ManifestEntry {
                video_id: e.video_id,
                pack: PathBuf::from(e.pack),
                split: e.split,
                captions,
            }
        })
        .collect();
    let manifest = DatasetManifest { root: root.to_path_buf(), entries };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest) -> Result<()> {
    let file = ManifestFile {
        entries: manifest
            .entries
            .iter()
            .map(|e| ManifestFileEntry {
                video_id: e.video_id.clone(),
                pack: e.pack.to_string_lossy().into_owned(),
                split: e.split,
            })
            .collect(),
    };
    write_json(&manifest.root.join("manifest.json"), &file)?;

    let captions_path = manifest.root.join("captions.jsonl");
    let mut out = fs::File::create(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
    for entry in &manifest.entries {
        for caption in &entry.captions {
            let line = CaptionLine {
                video_id: caption.video_id.clone(),
                caption: caption.tokens.join(" "),
            };
            let json = serde_json::to_string(&line).map_err(|e| Error::json(&captions_path, e))?;
            writeln!(out, "{json}").map_err(|e| Error::io(&captions_path, e))?;
        }
    }
    Ok(())
}

/// Shuffle the train split and chunk it into batches of `batch_size`
/// distinct videos, sampling one caption per video. Pure function of
/// (manifest, batch_size, seed); a trailing partial batch is dropped.
pub fn make_batches(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || !batch_size.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch_size must be even and positive, got {batch_size}"
        )));
    }
    let train: Vec<&ManifestEntry> = manifest.entries_for(Split::Train).collect();
    if batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds {} train videos",
            train.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for chunk in order.chunks_exact(batch_size) {
        let mut batch = Vec::with_capacity(batch_size);
        for &idx in chunk {
            let entry = train[idx];
            let pick = rng.random_range(0..entry.captions.len());
            batch.push(BatchItem {
                video_id: entry.video_id.clone(),
                caption: entry.captions[pick].clone(),
            });
        }
        batches.push(batch);
    }
    Ok(batches)
}

// ---- synthetic dataset ----

const SYNTH_SUBJECTS: [&str; 10] =
    ["dog", "cat", "man", "woman", "bird", "horse", "baby", "monkey", "girl", "boy"];
const SYNTH_VERBS: [&str; 10] =
    ["walk", "jump", "play", "eat", "sleep", "climb", "sing", "read", "cook", "paint"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub vocab_events: usize,
    pub seed: u64,
    pub d_vis: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Fractions of videos assigned to val / test; the rest train.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 10,
            vocab_events: 5,
            seed: 0,
            d_vis: 16,
            min_frames: 4,
            max_frames: 8,
            val_fraction: 0.0,
            test_fraction: 0.0,
            noise: 0.05,
        }
    }
}

/// Latent event: one feature centroid plus a templated caption
/// ("a <subject> is <verb>ing").
pub struct SynthEvent {
    pub subject: &'static str,
    pub verb: &'static str,
    pub prototype: Vec<f32>,
}

pub fn synth_events(spec: &SynthSpec, rng: &mut ChaCha20Rng) -> Vec<SynthEvent> {
    (0..spec.vocab_events)
        .map(|e| {
            let subject = SYNTH_SUBJECTS[e % SYNTH_SUBJECTS.len()];
            let verb = SYNTH_VERBS[(e / SYNTH_SUBJECTS.len() + e) % SYNTH_VERBS.len()];
            let prototype =
                (0..spec.d_vis).map(|_| rng.random_range(-1.0f32..1.0f32)).collect();
            SynthEvent { subject, verb, prototype }
        })
        .collect()
}

fn synth_caption(event: &SynthEvent) -> Vec<String> {
    vec![
        "a".to_string(),
        event.subject.to_string(),
        "is".to_string(),
        format!("{}ing", event.verb),
    ]
}

/// Generate a synthetic dataset under `out_dir`: each video's frames are
/// drawn around one latent event prototype and its caption is a fixed
/// template of that event, so a captioner can overfit it exactly.
/// Byte-identical output for a fixed spec.
pub fn generate_synthetic_dataset(out_dir: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    if spec.n_videos < 2 || spec.vocab_events < 2 {
        return Err(Error::Config(
            "synthetic dataset needs n_videos >= 2 and vocab_events >= 2".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let events = synth_events(spec, &mut rng);

    let n_val = (spec.n_videos as f64 * spec.val_fraction).floor() as usize;
    let n_test = (spec.n_videos as f64 * spec.test_fraction).floor() as usize;

    let mut entries = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let event = &events[v % events.len()];
        let video_id = format!("synth{v:04}");
        let n_frames = rng.random_range(spec.min_frames..=spec.max_frames);

        let mut features = Array2::zeros((n_frames, spec.d_vis));
        for f in 0..n_frames {
            for d in 0..spec.d_vis {
                let jitter: f32 = rng.random_range(-1.0f32..1.0f32) * spec.noise as f32;
                features[(f, d)] = event.prototype[d] + jitter;
            }
        }

        let mut detections = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let mut frame = vec![Detection {
                label: event.subject.to_string(),
                objectness: rng.random_range(0.7..0.95),
                bbox: [0.25, 0.25, 0.5, 0.5],
            }];
            // occasional weaker distractor so dominant selection matters
            if rng.random_range(0.0..1.0) < 0.3 {
                let other = SYNTH_SUBJECTS[rng.random_range(0..SYNTH_SUBJECTS.len())];
                frame.push(Detection {
                    label: other.to_string(),
                    objectness: rng.random_range(0.1..0.5),
                    bbox: [0.1, 0.1, 0.2, 0.2],
                });
            }
            detections.push(frame);
        }

        let pack = FeaturePack { video_id: video_id.clone(), frame_features: features, detections };
        let rel = PathBuf::from("packs").join(&video_id);
        write_feature_pack(&out_dir.join(&rel), &pack)?;

        let split = if v < n_val {
            Split::Val
        } else if v < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            video_id: video_id.clone(),
            pack: rel,
            split,
            captions: vec![CaptionRecord { video_id, tokens: synth_caption(event) }],
        });
    }

    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    write_manifest(&manifest)?;
    Ok(manifest)
}
