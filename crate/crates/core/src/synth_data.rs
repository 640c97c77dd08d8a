//! Seeded synthetic corpora in the on-disk record formats.
//!
//! Every entity owns a core token (`entA`, `entB`, ...) and three signature
//! words, one of them shared with its sibling entity. Attribute sentences
//! combine the core token, signature words and kind-specific filler; each
//! token is replaced by a noise word with probability σ. Image features are
//! a per-entity latent vector plus Gaussian noise of scale σ.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus_io::{DiseaseRecord, OncoTreeRecord, PairRecord, PatchRecord, WsiRecord};
use crate::error::{Error, Result};
use crate::evaluation::ClassSynonyms;
use crate::knowledge_tree::normalize_text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionStyle {
    /// Bare synonyms, attribute sentences and prefixed sentences.
    #[default]
    Mixed,
    /// Attribute sentences only.
    Sentence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub entities: usize,
    pub tissues: Vec<String>,
    /// Inclusive range.
    pub attributes_per_entity: (usize, usize),
    pub latent_dim: usize,
    pub caption_style: CaptionStyle,
    /// σ: token replacement rate and feature noise scale.
    pub noise: f64,
    pub pairs_per_entity: usize,
    /// The first `eval_classes` entities form the patch and slide classes.
    pub eval_classes: usize,
    pub patches_per_class: usize,
    pub slides_per_class: usize,
    pub patches_per_slide: usize,
    /// Patches per slide that carry the slide's class latent.
    pub true_patches_per_slide: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            entities: 60,
            tissues: ["lung", "breast", "kidney", "colon"].map(String::from).to_vec(),
            attributes_per_entity: (4, 8),
            latent_dim: 64,
            caption_style: CaptionStyle::Mixed,
            noise: 0.2,
            pairs_per_entity: 20,
            eval_classes: 6,
            patches_per_class: 20,
            slides_per_class: 4,
            patches_per_slide: 10,
            true_patches_per_slide: 3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.attributes_per_entity;
        let checks = [
            (self.entities >= 2, "entities must be at least 2"),
            (self.noise >= 0.0 && self.noise.is_finite(), "noise must be ≥ 0"),
            (!self.tissues.is_empty(), "at least one tissue is required"),
            (
                lo >= 1 && lo <= hi,
                "attributes_per_entity must be a range (lo ≥ 1, lo ≤ hi)",
            ),
            (self.latent_dim >= 1, "latent_dim must be positive"),
            (
                self.eval_classes <= self.entities,
                "eval_classes exceeds entities",
            ),
            (
                self.true_patches_per_slide <= self.patches_per_slide,
                "true_patches_per_slide exceeds patches_per_slide",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const TREE_STREAM: u64 = 1;
const LATENT_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// `entA`, ..., `entZ`, `entAA`, ... (bijective base 26).
pub fn core_token(index: usize) -> String {
    let mut n = index + 1;
    let mut letters = Vec::new();
    while n > 0 {
        n -= 1;
        letters.push(b'A' + (n % 26) as u8);
        n /= 26;
    }
    letters.reverse();
    format!("ent{}", String::from_utf8(letters).expect("ascii"))
}

const NOISE_WORDS: usize = 256;

fn noise_word(rng: &mut ChaCha8Rng) -> String {
    format!("nz{}", rng.random_range(0..NOISE_WORDS))
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmprstvz";
    const V: &[u8] = b"aeiou";
    let mut w = String::new();
    for _ in 0..2 {
        w.push(C[rng.random_range(0..C.len())] as char);
        w.push(V[rng.random_range(0..V.len())] as char);
    }
    w.push(C[rng.random_range(0..C.len())] as char);
    w
}

const DEFINITION_FILL: [&str; 6] = [
    "malignant",
    "benign",
    "epithelial",
    "mesenchymal",
    "rare",
    "aggressive",
];
const HISTOLOGY_FILL: [&str; 6] = [
    "glandular",
    "solid",
    "papillary",
    "nested",
    "trabecular",
    "cribriform",
];
const CYTOLOGY_FILL: [&str; 6] = [
    "enlarged",
    "pleomorphic",
    "round",
    "clear",
    "eosinophilic",
    "hyperchromatic",
];
const CAPTION_PREFIX: [&str; 3] = ["microscopy of", "this slide shows", "high power view of"];

struct Vocab {
    cores: Vec<String>,
    signatures: Vec<[String; 3]>,
}

fn vocab(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vocab {
    let cores: Vec<String> = (0..spec.entities).map(core_token).collect();
    let mut used: HashSet<String> = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let shared: Vec<String> = (0..spec.entities.div_ceil(2)).map(|_| fresh(rng)).collect();
    let signatures = (0..spec.entities)
        .map(|i| [fresh(rng), fresh(rng), shared[i / 2].clone()])
        .collect();
    Vocab { cores, signatures }
}

fn sentence(kind: usize, core: &str, sig: &[String; 3], rng: &mut ChaCha8Rng) -> String {
    let mut s = || sig[rng.random_range(0..3)].clone();
    let (a, b) = (s(), s());
    let mut pick = |fill: &[&'static str]| fill[rng.random_range(0..fill.len())];
    match kind {
        0 => match rng.random_range(0..3) {
            0 => core.to_string(),
            1 => format!("{core} {a}"),
            _ => format!("{a} {core} lesion"),
        },
        1 => format!(
            "{core} is a {} {} neoplasm characterized by {a} and {b}",
            pick(&DEFINITION_FILL),
            pick(&DEFINITION_FILL)
        ),
        2 => format!(
            "histologically {core} shows {} {a} pattern with {} {b}",
            pick(&HISTOLOGY_FILL),
            pick(&HISTOLOGY_FILL)
        ),
        _ => format!(
            "cells of {core} display {} nuclei and {a} {} cytoplasm",
            pick(&CYTOLOGY_FILL),
            pick(&CYTOLOGY_FILL)
        ),
    }
}

fn add_noise(text: &str, sigma: f64, rng: &mut ChaCha8Rng) -> String {
    text.split(' ')
        .map(|tok| {
            if sigma > 0.0 && rng.random::<f64>() < sigma {
                noise_word(rng)
            } else {
                tok.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Synthetic disease records, one per entity, in entity order.
///
/// Even-indexed entities carry a CUI matched by [`gen_oncotree`].
pub fn gen_knowledge_tree(spec: &SynthSpec) -> Vec<DiseaseRecord> {
    let mut rng = spec.rng(TREE_STREAM);
    let v = vocab(spec, &mut rng);
    let (lo, hi) = spec.attributes_per_entity;
    (0..spec.entities)
        .map(|i| {
            let count = rng.random_range(lo..=hi);
            let mut lists: [Vec<String>; 4] = Default::default();
            let mut seen = HashSet::new();
            for a in 0..count {
                let kind = if a == 0 { 0 } else { rng.random_range(0..4) };
                let mut text = String::new();
                for attempt in 0.. {
                    text = add_noise(
                        &sentence(kind, &v.cores[i], &v.signatures[i], &mut rng),
                        spec.noise,
                        &mut rng,
                    );
                    if attempt >= 50 {
                        text = format!("{text} {}", v.signatures[i][a % 3]);
                    }
                    if seen.insert((kind, normalize_text(&text))) {
                        break;
                    }
                }
                lists[kind].push(text);
            }
            let [synonyms, definitions, histology, cytology] = lists;
            DiseaseRecord {
                name: v.cores[i].clone(),
                synonyms,
                definitions,
                histology,
                cytology,
                tissue: spec.tissues[i % spec.tissues.len()].clone(),
                cui: (i % 2 == 0).then(|| synthetic_cui(i)),
                source: "synthetic".into(),
            }
        })
        .collect()
}

fn synthetic_cui(i: usize) -> String {
    format!("S{:07}", i)
}

/// OncoTree-style backbone nodes for the even-indexed entities.
pub fn gen_oncotree(spec: &SynthSpec) -> Vec<OncoTreeRecord> {
    (0..spec.entities)
        .step_by(2)
        .map(|i| OncoTreeRecord {
            name: core_token(i),
            cui: synthetic_cui(i),
            tissue: spec.tissues[i % spec.tissues.len()].clone(),
            parent: None,
            level: 1,
        })
        .collect()
}

/// One latent per entity plus a trailing background latent, each of norm
/// √D; mutually orthogonal when `entities + 1 ≤ D`.
pub fn gen_latents(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = spec.rng(LATENT_STREAM);
    let d = spec.latent_dim;
    let count = spec.entities + 1;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if out.len() < d {
            for u in &out {
                let p: f64 = crate::numerics::dot(&v, u) / d as f64;
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = crate::numerics::norm(&v);
        let s = (d as f64).sqrt() / n;
        v.iter_mut().for_each(|x| *x *= s);
        out.push(v);
    }
    out
}

fn noisy(latent: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    latent
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z
        })
        .collect()
}

fn attributes(r: &DiseaseRecord) -> Vec<&str> {
    [&r.synonyms, &r.definitions, &r.histology, &r.cytology]
        .into_iter()
        .flatten()
        .map(String::as_str)
        .collect()
}

fn caption(r: &DiseaseRecord, style: CaptionStyle, rng: &mut ChaCha8Rng) -> String {
    let attrs = attributes(r);
    let pick = |rng: &mut ChaCha8Rng| attrs[rng.random_range(0..attrs.len())].to_string();
    match style {
        CaptionStyle::Sentence => pick(rng),
        CaptionStyle::Mixed => match rng.random_range(0..3) {
            0 if !r.synonyms.is_empty() => r.synonyms[rng.random_range(0..r.synonyms.len())].clone(),
            1 => format!(
                "{} {}",
                CAPTION_PREFIX[rng.random_range(0..CAPTION_PREFIX.len())],
                pick(rng)
            ),
            _ => pick(rng),
        },
    }
}

/// `pairs_per_entity` image–caption pairs per record, shuffled.
pub fn gen_pairs(spec: &SynthSpec, diseases: &[DiseaseRecord]) -> Vec<PairRecord> {
    gen_pairs_stream(spec, diseases, PAIR_STREAM)
}

/// Like [`gen_pairs`] from an independent stream, for held-out pairs.
pub fn gen_heldout_pairs(spec: &SynthSpec, diseases: &[DiseaseRecord]) -> Vec<PairRecord> {
    gen_pairs_stream(spec, diseases, PAIR_STREAM + 100)
}

fn gen_pairs_stream(spec: &SynthSpec, diseases: &[DiseaseRecord], stream: u64) -> Vec<PairRecord> {
    let latents = gen_latents(spec);
    let mut rng = spec.rng(stream);
    let mut order: Vec<usize> = (0..diseases.len())
        .flat_map(|e| std::iter::repeat_n(e, spec.pairs_per_entity))
        .collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let r = &diseases[e];
            PairRecord {
                id: format!("pair{i:05}"),
                caption: caption(r, spec.caption_style, &mut rng),
                image_features: noisy(&latents[e % spec.entities], spec.noise, &mut rng),
                disease_label: Some(r.name.clone()),
            }
        })
        .collect()
}

/// Balanced patch and slide sets over the first `eval_classes` entities.
pub fn gen_eval_sets(spec: &SynthSpec, diseases: &[DiseaseRecord]) -> (Vec<PatchRecord>, Vec<WsiRecord>) {
    let latents = gen_latents(spec);
    let background = &latents[spec.entities];
    let mut rng = spec.rng(EVAL_STREAM);
    let classes = spec.eval_classes.min(diseases.len());
    let mut patches = Vec::new();
    let mut slides = Vec::new();
    for (c, r) in diseases.iter().take(classes).enumerate() {
        for j in 0..spec.patches_per_class {
            patches.push(PatchRecord {
                id: format!("patch{:03}_{j:03}", c),
                features: noisy(&latents[c], spec.noise, &mut rng),
                label: r.name.clone(),
            });
        }
        for j in 0..spec.slides_per_class {
            let mut feats: Vec<Vec<f64>> = (0..spec.patches_per_slide)
                .map(|p| {
                    let src = if p < spec.true_patches_per_slide {
                        &latents[c]
                    } else {
                        background
                    };
                    noisy(src, spec.noise, &mut rng)
                })
                .collect();
            feats.shuffle(&mut rng);
            slides.push(WsiRecord {
                slide_id: format!("slide{:03}_{j:03}", c),
                label: r.name.clone(),
                patch_features: feats,
            });
        }
    }
    (patches, slides)
}

/// Prompt-bank classes for the evaluation sets: the name plus its synonyms.
pub fn gen_class_synonyms(spec: &SynthSpec, diseases: &[DiseaseRecord]) -> Vec<ClassSynonyms> {
    diseases
        .iter()
        .take(spec.eval_classes)
        .map(|r| {
            let mut synonyms = vec![r.name.clone()];
            synonyms.extend(r.synonyms.iter().filter(|s| **s != r.name).cloned());
            ClassSynonyms {
                name: r.name.clone(),
                synonyms,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Tokenizer;
    use crate::evaluation::{
        balanced_accuracy, recall_at_k, topk_pool_slide, weighted_f1, zero_shot_classify, Pooling,
    };
    use crate::knowledge_tree::build_tree;
    use crate::numerics::Tensor2;

    fn clean(entities: usize) -> SynthSpec {
        SynthSpec {
            entities,
            noise: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn core_tokens() {
        assert_eq!(core_token(0), "entA");
        assert_eq!(core_token(25), "entZ");
        assert_eq!(core_token(26), "entAA");
        assert_eq!(core_token(27), "entAB");
    }

    #[test]
    fn clean_attributes_carry_only_their_core_token() {
        let recs = gen_knowledge_tree(&clean(2));
        for (i, r) in recs.iter().enumerate() {
            let own = core_token(i).to_lowercase();
            let other = core_token(1 - i).to_lowercase();
            for a in attributes(r) {
                let toks: Vec<String> = Tokenizer::tokens(a).collect();
                assert!(toks.contains(&own), "{a}");
                assert!(!toks.contains(&other), "{a}");
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = SynthSpec::default();
        let a = gen_knowledge_tree(&spec);
        assert_eq!(a, gen_knowledge_tree(&spec));
        assert_eq!(gen_pairs(&spec, &a), gen_pairs(&spec, &a));
        assert_eq!(gen_eval_sets(&spec, &a), gen_eval_sets(&spec, &a));
        for r in &a {
            let n = attributes(r).len();
            assert!((4..=8).contains(&n), "{n}");
        }
        let (tree, log) = build_tree(&a, &gen_oncotree(&spec));
        assert_eq!(tree.len(), 60);
        assert_eq!(log.merges, 30);
        assert_eq!(log.duplicate_attributes, 0);
        assert!(tree.nodes.iter().all(|n| (4..=8).contains(&n.attributes.len())));
        assert_ne!(gen_pairs(&spec, &a), gen_heldout_pairs(&spec, &a));
    }

    #[test]
    fn clean_pairs() {
        let spec = clean(5);
        let recs = gen_knowledge_tree(&spec);
        let pairs = gen_pairs(&spec, &recs);
        assert_eq!(pairs.len(), 5 * spec.pairs_per_entity);
        let latents = gen_latents(&spec);
        for p in &pairs {
            let e = recs
                .iter()
                .position(|r| Some(&r.name) == p.disease_label.as_ref())
                .unwrap();
            assert_eq!(p.image_features, latents[e]);
            let core = core_token(e).to_lowercase();
            assert!(Tokenizer::tokens(&p.caption).any(|t| t == core), "{}", p.caption);
        }
    }

    #[test]
    fn latents_are_orthogonal_with_norm_sqrt_d() {
        let spec = SynthSpec::default();
        let l = gen_latents(&spec);
        assert_eq!(l.len(), 61);
        for (i, a) in l.iter().enumerate() {
            assert!((crate::numerics::norm(a) - 8.0).abs() < 1e-9);
            for b in &l[..i] {
                assert!(crate::numerics::dot(a, b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eval_sets_are_balanced() {
        let spec = SynthSpec::default();
        let recs = gen_knowledge_tree(&spec);
        let (patches, slides) = gen_eval_sets(&spec, &recs);
        assert_eq!(patches.len(), 6 * 20);
        assert_eq!(slides.len(), 6 * 4);
        for r in &recs[..6] {
            assert_eq!(patches.iter().filter(|p| p.label == r.name).count(), 20);
            assert_eq!(slides.iter().filter(|s| s.label == r.name).count(), 4);
        }
        assert!(slides.iter().all(|s| s.patch_features.len() == 10));
    }

    /// Maps a feature vector to the one-hot of its nearest latent.
    fn oracle_image(latents: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = latents.iter().map(|l| crate::numerics::dot(l, x)).collect();
        let best = crate::evaluation::argmax(&scores);
        (0..latents.len())
            .map(|i| if i == best { 1.0 } else { 0.0 })
            .collect()
    }

    /// Maps a text to the one-hot of the first core token it contains.
    fn oracle_text(n: usize, text: &str) -> Vec<f64> {
        let toks: Vec<String> = Tokenizer::tokens(text).collect();
        let hit = (0..n).find(|&i| toks.contains(&core_token(i).to_lowercase()));
        (0..=n).map(|i| if Some(i) == hit { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn clean_sets_are_solvable_by_an_oracle_encoder() {
        let spec = clean(8);
        let recs = gen_knowledge_tree(&spec);
        let latents = gen_latents(&spec);
        let n = spec.entities;

        let pairs = gen_pairs(&spec, &recs);
        let captions = Tensor2::from_rows(
            &pairs
                .iter()
                .map(|p| oracle_text(n, &p.caption))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let labels =
            Tensor2::from_rows(&recs.iter().map(|r| oracle_text(n, &r.name)).collect::<Vec<_>>()).unwrap();
        let images = Tensor2::from_rows(
            &pairs
                .iter()
                .map(|p| oracle_image(&latents, &p.image_features))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let label_idx: Vec<usize> = pairs
            .iter()
            .map(|p| {
                recs.iter()
                    .position(|r| Some(&r.name) == p.disease_label.as_ref())
                    .unwrap()
            })
            .collect();
        let l2t: Vec<Vec<usize>> = (0..n)
            .map(|e| (0..pairs.len()).filter(|&i| label_idx[i] == e).collect())
            .collect();
        assert_eq!(recall_at_k(&labels, &captions, &l2t, 1), 1.0);
        let i2l: Vec<Vec<usize>> = label_idx.iter().map(|&e| vec![e]).collect();
        assert_eq!(recall_at_k(&images, &labels, &i2l, 1), 1.0);

        let (patches, slides) = gen_eval_sets(&spec, &recs);
        let classes = spec.eval_classes;
        let prompts = labels.select_rows(&(0..classes).collect::<Vec<_>>());
        let patch_embs = Tensor2::from_rows(
            &patches
                .iter()
                .map(|p| oracle_image(&latents, &p.features))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let truth: Vec<usize> = patches
            .iter()
            .map(|p| recs.iter().position(|r| r.name == p.label).unwrap())
            .collect();
        assert_eq!(
            weighted_f1(&zero_shot_classify(&patch_embs, &prompts), &truth),
            1.0
        );

        let preds: Vec<usize> = slides
            .iter()
            .map(|s| {
                let embs = Tensor2::from_rows(
                    &s.patch_features
                        .iter()
                        .map(|f| oracle_image(&latents, f))
                        .collect::<Vec<_>>(),
                )
                .unwrap();
                topk_pool_slide(&embs.matmul_nt(&prompts), 3, Pooling::Mean)
            })
            .collect();
        let truth: Vec<usize> = slides
            .iter()
            .map(|s| recs.iter().position(|r| r.name == s.label).unwrap())
            .collect();
        assert_eq!(balanced_accuracy(&preds, &truth), 1.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec {
            entities: 1,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            noise: -0.1,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }
}
