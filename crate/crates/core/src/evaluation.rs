//! Caption-quality metrics (corpus BLEU-4, CIDEr, METEOR-lite) and the
//! evaluation report.
//!
//! METEOR-lite is a documented simplification of METEOR: exact and
//! suffix-stem unigram matching only, no synonym or paraphrase tables. It
//! is reported as `meteor_lite`, never as METEOR.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_feature_pack, DatasetManifest, Split};
use crate::decoder::{bind_decoder, generate_greedy_vars};
use crate::embeddings::{Vocabulary, BOS, EOS, NOOBJ, PAD};
use crate::encoder::{bind_encoder, encode_vars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::training::object_ids_for_pack;

pub type Sentence = Vec<String>;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_default() += 1;
        }
    }
    counts
}

fn validate_aligned(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Input(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::Input(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus-level BLEU-4: clipped n-gram precision with uniform 1–4-gram
/// weights and the brevity penalty. With `smoothing`, add-one smoothing is
/// applied to orders above one; otherwise any zero precision zeroes the
/// score (the strict definition).
pub fn bleu4_opts(
    candidates: &[Sentence],
    references: &[Vec<Sentence>],
    smoothing: bool,
) -> Result<f64> {
    validate_aligned(candidates, references)?;
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // closest reference length; ties break toward the shorter
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        ref_len += closest;

        for n in 1..=MAX_ORDER {
            let cand_grams = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = max_ref.entry(gram).or_default();
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_grams {
                let clip = max_ref.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(&clip);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (num, den) = if smoothing && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let precision_term = (log_sum / MAX_ORDER as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * precision_term)
}

pub fn bleu4(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    bleu4_opts(candidates, references, false)
}

/// Standard CIDEr: per n-gram order 1–4, length-normalized tf weighted by
/// log(|videos| / document frequency), cosine similarity against each
/// reference, averaged over references then orders, times 10, then
/// averaged over the corpus. Orders where either side has no n-grams
/// contribute zero.
pub fn cider(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    validate_aligned(candidates, references)?;
    let n_videos = candidates.len();
    if n_videos < 2 {
        return Err(Error::Input(
            "cider needs at least 2 videos for corpus tf-idf statistics".into(),
        ));
    }

    // document frequency: videos whose reference set contains the n-gram
    let mut df: Vec<BTreeMap<Vec<String>, usize>> = vec![BTreeMap::new(); MAX_ORDER];
    for refs in references {
        for n in 1..=MAX_ORDER {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for r in refs {
                for gram in ngram_counts(r, n).keys() {
                    seen.insert(gram.to_vec());
                }
            }
            for gram in seen {
                *df[n - 1].entry(gram).or_default() += 1;
            }
        }
    }

    let tfidf = |tokens: &[String], n: usize| -> BTreeMap<Vec<String>, f64> {
        let counts = ngram_counts(tokens, n);
        let total: usize = counts.values().sum();
        let mut vec = BTreeMap::new();
        if total == 0 {
            return vec;
        }
        for (gram, count) in counts {
            let d = df[n - 1].get(gram).copied().unwrap_or(0).max(1);
            let idf = (n_videos as f64 / d as f64).ln();
            vec.insert(gram.to_vec(), count as f64 / total as f64 * idf);
        }
        vec
    };

    let cosine = |a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(gram, x)| b.get(gram).map(|y| x * y))
            .sum();
        let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let mut corpus = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut over_orders = 0.0;
        for n in 1..=MAX_ORDER {
            let cand_vec = tfidf(cand, n);
            let mut over_refs = 0.0;
            for r in refs {
                over_refs += cosine(&cand_vec, &tfidf(r, n));
            }
            over_orders += over_refs / refs.len() as f64;
        }
        corpus += over_orders / MAX_ORDER as f64 * 10.0;
    }
    Ok(corpus / n_videos as f64)
}

/// Suffix-stripping stem: removes one of ing / es / ed / s when the
/// remaining stem keeps at least two characters.
fn stem(token: &str) -> &str {
    for suffix in ["ing", "es", "ed", "s"] {
        if let Some(stripped) = token.strip_suffix(suffix) {
            if stripped.len() >= 2 {
                return stripped;
            }
        }
    }
    token
}

/// Left-to-right greedy alignment: stage 1 exact, stage 2 stem, each
/// candidate and reference position used at most once. Returns matched
/// (candidate index, reference index) pairs sorted by candidate index.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_ref = vec![false; reference.len()];
    let mut matched_cand: Vec<Option<usize>> = vec![None; cand.len()];
    for stage in 0..2 {
        for (ci, ct) in cand.iter().enumerate() {
            if matched_cand[ci].is_some() {
                continue;
            }
            for (ri, rt) in reference.iter().enumerate() {
                if used_ref[ri] {
                    continue;
                }
                let hit = if stage == 0 { ct == rt } else { stem(ct) == stem(rt) };
                if hit {
                    matched_cand[ci] = Some(ri);
                    used_ref[ri] = true;
                    break;
                }
            }
        }
    }
    matched_cand
        .iter()
        .enumerate()
        .filter_map(|(ci, ri)| ri.map(|r| (ci, r)))
        .collect()
}

fn sentence_meteor(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let pairs = align(cand, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let precision = m as f64 / cand.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    // harmonic mean with alpha = 0.9 (recall-weighted, the METEOR default)
    let f_mean = precision * recall / (0.9 * precision + 0.1 * recall);
    // chunks: maximal runs contiguous in both sentences
    let mut chunks = 1;
    for w in pairs.windows(2) {
        let ((c0, r0), (c1, r1)) = (w[0], w[1]);
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR-lite: per candidate the best score over its references, averaged
/// over the corpus.
pub fn meteor_lite(candidates: &[Sentence], references: &[Vec<Sentence>]) -> Result<f64> {
    validate_aligned(candidates, references)?;
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let best = refs
            .iter()
            .map(|r| sentence_meteor(cand, r))
            .fold(0.0f64, f64::max);
        total += best;
    }
    Ok(total / candidates.len() as f64)
}

// ---- report ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub bleu4: f64,
    pub meteor_lite: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratedCaption {
    pub video_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub captions: Vec<GeneratedCaption>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-columns text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .chain(["model".len()])
            .max()
            .unwrap_or(5);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>11}  {:>8}", "model", "bleu4", "meteor_lite", "cider");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>11.4}  {:>8.4}",
                row.model, row.bleu4, row.meteor_lite, row.cider
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,bleu4,meteor_lite,cider\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", row.model, row.bleu4, row.meteor_lite, row.cider);
        }
        out
    }
}

/// Drop the structural tokens from a decoded id sequence; what remains is
/// the caption (UNK stays visible as its literal token).
pub fn caption_tokens(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS && id != NOOBJ)
        .map(|&id| vocab.token(id).to_string())
        .collect()
}

struct DecodedSplit {
    captions: Vec<GeneratedCaption>,
    candidates: Vec<Sentence>,
    references: Vec<Vec<Sentence>>,
}

fn decode_split(ckpt: &Checkpoint, manifest: &DatasetManifest, split: Split) -> Result<DecodedSplit> {
    let vocab = Vocabulary::from_tokens(ckpt.vocab_tokens.clone())?;
    let entries: Vec<_> = manifest.entries_for(split).collect();
    if entries.is_empty() {
        return Err(Error::Input(format!("split {split:?} has no videos")));
    }

    let mut out = DecodedSplit {
        captions: Vec::with_capacity(entries.len()),
        candidates: Vec::with_capacity(entries.len()),
        references: Vec::with_capacity(entries.len()),
    };
    for entry in entries {
        let pack = load_feature_pack(&manifest.pack_path(entry), ckpt.config.max_frames)?;
        let features = pack.frame_features.mapv(f64::from);
        let object_ids = object_ids_for_pack(&pack, &vocab);

        let mut g = Graph::new();
        let dec = bind_decoder(&mut g, &ckpt.params, &ckpt.dims);
        let enc = bind_encoder(&mut g, &ckpt.params, &ckpt.dims);
        let cols: Vec<Var> = object_ids.iter().map(|&id| g.col(dec.e, id)).collect();
        let encoded = encode_vars(&mut g, &enc, &ckpt.dims, &features, &cols);
        let ids = generate_greedy_vars(&mut g, &dec, &encoded, ckpt.config.max_len);

        let tokens = caption_tokens(&vocab, &ids);
        out.captions.push(GeneratedCaption {
            video_id: entry.video_id.clone(),
            caption: tokens.join(" "),
        });
        out.candidates.push(tokens);
        out.references.push(entry.captions.iter().map(|c| c.tokens.clone()).collect());
    }
    Ok(out)
}

/// Greedy-decode every video in the split without scoring it.
pub fn generate_captions(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<GeneratedCaption>> {
    Ok(decode_split(ckpt, manifest, split)?.captions)
}

/// Greedy-decode every video in the split and score against all its
/// references.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    model_label: &str,
) -> Result<EvalReport> {
    let decoded = decode_split(ckpt, manifest, split)?;
    let row = MetricsRow {
        model: model_label.to_string(),
        bleu4: bleu4(&decoded.candidates, &decoded.references)?,
        meteor_lite: meteor_lite(&decoded.candidates, &decoded.references)?,
        cider: cider(&decoded.candidates, &decoded.references)?,
    };
    Ok(EvalReport { rows: vec![row], captions: decoded.captions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Sentence {
        text.split_whitespace().map(str::to_string).collect()
    }

    /// Brute-force BLEU oracle, written independently of the main
    /// implementation: explicit n-gram enumeration with Vec scans instead
    /// of count maps.
    mod oracle {
        use super::Sentence;

        fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
            if tokens.len() < n {
                return Vec::new();
            }
            (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
        }

        fn count_of(haystack: &[Vec<String>], needle: &[String]) -> usize {
            haystack.iter().filter(|g| g.as_slice() == needle).count()
        }

        pub fn bleu4(cands: &[Sentence], refs: &[Vec<Sentence>], smoothing: bool) -> f64 {
            let mut cand_len = 0usize;
            let mut ref_len = 0usize;
            let mut matched = [0usize; 4];
            let mut total = [0usize; 4];
            for (cand, rlist) in cands.iter().zip(refs) {
                cand_len += cand.len();
                let mut best_diff = usize::MAX;
                let mut best_len = 0usize;
                for r in rlist {
                    let diff = r.len().abs_diff(cand.len());
                    if diff < best_diff || (diff == best_diff && r.len() < best_len) {
                        best_diff = diff;
                        best_len = r.len();
                    }
                }
                ref_len += best_len;
                for n in 1..=4 {
                    let cgrams = grams(cand, n);
                    total[n - 1] += cgrams.len();
                    // distinct candidate n-grams, clipped by best ref count
                    let mut seen: Vec<&[String]> = Vec::new();
                    for g in &cgrams {
                        if seen.contains(&g.as_slice()) {
                            continue;
                        }
                        seen.push(g);
                        let cand_count = count_of(&cgrams, g);
                        let best_ref = rlist
                            .iter()
                            .map(|r| count_of(&grams(r, n), g))
                            .max()
                            .unwrap_or(0);
                        matched[n - 1] += cand_count.min(best_ref);
                    }
                }
            }
            if cand_len == 0 {
                return 0.0;
            }
            let mut log_sum = 0.0;
            for n in 0..4 {
                let (num, den) = if smoothing && n > 0 {
                    (matched[n] + 1, total[n] + 1)
                } else {
                    (matched[n], total[n])
                };
                if num == 0 || den == 0 {
                    return 0.0;
                }
                log_sum += (num as f64).ln() - (den as f64).ln();
            }
            let bp = if cand_len >= ref_len {
                1.0
            } else {
                (1.0 - ref_len as f64 / cand_len as f64).exp()
            };
            bp * (log_sum / 4.0).exp()
        }
    }

    #[test]
    fn bleu_perfect_match_is_one() {
        let cands = vec![s("a man is walking"), s("a dog runs fast here")];
        let refs = vec![
            vec![s("a man is walking"), s("someone walks")],
            vec![s("a dog runs fast here")],
        ];
        assert!((bleu4(&cands, &refs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_zero_fourgram_overlap_is_zero_strict() {
        let cands = vec![s("a b c d e")];
        let refs = vec![vec![s("a b c x e f")]]; // shares up to 3-grams only
        assert_eq!(bleu4(&cands, &refs).unwrap(), 0.0);
        // smoothing rescues the zero
        assert!(bleu4_opts(&cands, &refs, true).unwrap() > 0.0);
    }

    #[test]
    fn bleu_matches_oracle_on_hand_corpus() {
        let cands = vec![s("the cat sat on the mat"), s("a dog barked")];
        let refs = vec![
            vec![s("the cat sat on a mat"), s("a cat was sitting on the mat")],
            vec![s("the dog barked loudly")],
        ];
        let ours = bleu4(&cands, &refs).unwrap();
        let expected = oracle::bleu4(&cands, &refs, false);
        assert!((ours - expected).abs() < 1e-9, "{ours} vs {expected}");
    }

    /// Deterministic sweep over candidate/reference length combinations
    /// from a 6-word vocabulary.
    #[test]
    fn bleu_matches_oracle_exhaustive_lengths() {
        let vocab = ["a", "b", "c", "d", "e", "f"];
        for cand_len in 1..=5usize {
            for ref_len in 1..=5usize {
                for offset in 0..3usize {
                    let cand: Sentence =
                        (0..cand_len).map(|i| vocab[(i + offset) % 6].to_string()).collect();
                    let reference: Sentence =
                        (0..ref_len).map(|i| vocab[(2 * i) % 6].to_string()).collect();
                    let cands = vec![cand];
                    let refs = vec![vec![reference]];
                    for smoothing in [false, true] {
                        let ours = bleu4_opts(&cands, &refs, smoothing).unwrap();
                        let expected = oracle::bleu4(&cands, &refs, smoothing);
                        assert!(
                            (ours - expected).abs() < 1e-9,
                            "cand_len={cand_len} ref_len={ref_len} offset={offset}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn cider_hand_computed_two_video_case() {
        // v1: cand "a c" vs ref "a b"; v2: cand "c d" = ref "c d".
        // All unigrams have df 1, idf ln 2.
        //   v1 unigram cosine: dot = (.5 ln2)^2 over shared "a";
        //     norms sqrt(2) * .5 ln2 each -> cos .25/.5 = 0.5; orders 2-4: 0.
        //   v1 score = (0.5 + 0 + 0 + 0) / 4 * 10 = 1.25
        //   v2: unigram and bigram cosines 1, orders 3-4 empty -> 0.
        //   v2 score = (1 + 1 + 0 + 0) / 4 * 10 = 5.0
        // corpus = (1.25 + 5.0) / 2 = 3.125
        let cands = vec![s("a c"), s("c d")];
        let refs = vec![vec![s("a b")], vec![s("c d")]];
        let got = cider(&cands, &refs).unwrap();
        assert!((got - 3.125).abs() < 1e-9, "{got}");
    }

    #[test]
    fn cider_disjoint_vocab_echo_is_ten() {
        // candidate = only reference, disjoint vocabularies: cosine 1 at
        // every order, so each video scores 10 before averaging.
        let cands = vec![s("a b c d"), s("e f g h")];
        let refs = vec![vec![s("a b c d")], vec![s("e f g h")]];
        let got = cider(&cands, &refs).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn cider_no_overlap_is_zero() {
        let cands = vec![s("x y z w"), s("e f g h")];
        let refs = vec![vec![s("a b c d")], vec![s("p q r t")]];
        assert_eq!(cider(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn cider_rejects_single_video() {
        let cands = vec![s("a b")];
        let refs = vec![vec![s("a b")]];
        assert!(cider(&cands, &refs).is_err());
    }

    #[test]
    fn cider_invariant_to_video_order() {
        let cands = vec![s("a b c"), s("c d e"), s("a d f")];
        let refs = vec![
            vec![s("a b c"), s("b c a")],
            vec![s("c d d e")],
            vec![s("f a d")],
        ];
        let base = cider(&cands, &refs).unwrap();
        let cands2 = vec![cands[2].clone(), cands[0].clone(), cands[1].clone()];
        let refs2 = vec![refs[2].clone(), refs[0].clone(), refs[1].clone()];
        let permuted = cider(&cands2, &refs2).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn meteor_identical_sentence_value() {
        // m = 3, one chunk: score = 1 - 0.5 * (1/3)^3 = 1 - 0.5/27
        let cands = vec![s("a b c")];
        let refs = vec![vec![s("a b c")]];
        let got = meteor_lite(&cands, &refs).unwrap();
        let expected = 1.0 - 0.5 / 27.0;
        assert!((got - expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn meteor_zero_overlap_is_zero() {
        let cands = vec![s("x y z")];
        let refs = vec![vec![s("a b c")]];
        assert_eq!(meteor_lite(&cands, &refs).unwrap(), 0.0);
    }

    #[test]
    fn meteor_scramble_lowers_score() {
        // all four words match; "b a c d" aligns as 3 chunks vs 1:
        // penalty 0.5*(3/4)^3 -> score 0.7890625
        let perfect = meteor_lite(&[s("a b c d")], &[vec![s("a b c d")]]).unwrap();
        let scrambled = meteor_lite(&[s("b a c d")], &[vec![s("a b c d")]]).unwrap();
        assert!((scrambled - 0.7890625).abs() < 1e-12, "{scrambled}");
        assert!(scrambled < perfect);
    }

    #[test]
    fn meteor_stem_matching_applies() {
        let no_stem = meteor_lite(&[s("dog barks")], &[vec![s("cat runs")]]).unwrap();
        assert_eq!(no_stem, 0.0);
        let stemmed = meteor_lite(&[s("dog walking")], &[vec![s("dog walk")]]).unwrap();
        assert!(stemmed > 0.9, "stem match failed: {stemmed}");
        // short tokens are protected from stripping: "is" stays "is"
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("walking"), "walk");
        assert_eq!(stem("cats"), "cat");
        assert_eq!(stem("boxes"), "box");
        assert_eq!(stem("jumped"), "jump");
    }

    #[test]
    fn report_formats_render() {
        let report = EvalReport {
            rows: vec![MetricsRow {
                model: "toy".into(),
                bleu4: 0.5,
                meteor_lite: 0.25,
                cider: 1.5,
            }],
            captions: vec![GeneratedCaption { video_id: "v0".into(), caption: "a dog".into() }],
        };
        let json = report.to_json();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, report);
        assert!(report.to_table().contains("bleu4"));
        assert!(report.to_csv().starts_with("model,bleu4"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        /// Criterion-style oracle sweep: corpora of up to 5 sentences over
        /// a 6-word vocabulary, sentence lengths <= 5, against the
        /// brute-force oracle to 1e-9.
        #[test]
        fn bleu_matches_oracle_on_random_corpora(
            corpus in proptest::collection::vec(
                (
                    proptest::collection::vec(0usize..6, 1..=5),
                    proptest::collection::vec(proptest::collection::vec(0usize..6, 1..=5), 1..=3),
                ),
                1..=5,
            ),
            smoothing in proptest::bool::ANY,
        ) {
            let vocab = ["a", "b", "c", "d", "e", "f"];
            let cands: Vec<Sentence> = corpus
                .iter()
                .map(|(c, _)| c.iter().map(|&i| vocab[i].to_string()).collect())
                .collect();
            let refs: Vec<Vec<Sentence>> = corpus
                .iter()
                .map(|(_, rs)| {
                    rs.iter()
                        .map(|r| r.iter().map(|&i| vocab[i].to_string()).collect())
                        .collect()
                })
                .collect();
            let ours = bleu4_opts(&cands, &refs, smoothing).unwrap();
            let expected = oracle::bleu4(&cands, &refs, smoothing);
            prop_assert!((ours - expected).abs() < 1e-9, "{} vs {}", ours, expected);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ours));
        }

        /// Metrics stay in range and ignore reference order.
        #[test]
        fn metrics_ranges_and_reference_order(
            seed_tokens in proptest::collection::vec(
                proptest::collection::vec(0usize..6, 1..=5), 2..=4),
        ) {
            let vocab = ["a", "b", "c", "d", "e", "f"];
            let to_sentence = |idx: &Vec<usize>| -> Sentence {
                idx.iter().map(|&i| vocab[i].to_string()).collect()
            };
            let cands: Vec<Sentence> = seed_tokens.iter().map(to_sentence).collect();
            let refs: Vec<Vec<Sentence>> = seed_tokens
                .iter()
                .map(|t| {
                    let a = to_sentence(t);
                    let mut b = a.clone();
                    b.reverse();
                    vec![a, b]
                })
                .collect();
            let b = bleu4(&cands, &refs).unwrap();
            let m = meteor_lite(&cands, &refs).unwrap();
            let c = cider(&cands, &refs).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
            prop_assert!(c >= 0.0);

            let refs_swapped: Vec<Vec<Sentence>> = refs
                .iter()
                .map(|r| r.iter().rev().cloned().collect())
                .collect();
            prop_assert_eq!(bleu4(&cands, &refs_swapped).unwrap(), b);
            prop_assert_eq!(meteor_lite(&cands, &refs_swapped).unwrap(), m);
            prop_assert!((cider(&cands, &refs_swapped).unwrap() - c).abs() < 1e-12);
        }
    }
}
