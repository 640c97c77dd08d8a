//! Zero-shot patch classification, Top-K slide pooling and retrieval.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{read_json, PairRecord, PatchRecord, WsiRecord};
use crate::encoders::{ImageEncoderParams, TextEncoderParams};
use crate::error::{Error, Result};
use crate::knowledge_tree::KnowledgeTree;
use crate::numerics::{dot, Tensor2};

/// Placeholder replaced by a class synonym.
pub const CLASSNAME: &str = "CLASSNAME";

/// The shipped prompt templates, in table order.
pub const SHIPPED_TEMPLATES: [&str; 22] = [
    "CLASSNAME.",
    "a photomicrograph showing CLASSNAME.",
    "a photomicrograph of CLASSNAME.",
    "an image of CLASSNAME.",
    "an image showing CLASSNAME.",
    "an example of CLASSNAME.",
    "CLASSNAME is shown.",
    "this is CLASSNAME.",
    "there is CLASSNAME.",
    "a histopathological image showing CLASSNAME.",
    "a histopathological image of CLASSNAME.",
    "a histopathological photograph of CLASSNAME.",
    "a histopathological photograph showing CLASSNAME.",
    "shows CLASSNAME.",
    "presence of CLASSNAME.",
    "CLASSNAME is present.",
    "an H&E stained image of CLASSNAME.",
    "an H&E stained image showing CLASSNAME.",
    "an H&E image showing CLASSNAME.",
    "an H&E image of CLASSNAME.",
    "CLASSNAME, H&E stain.",
    "CLASSNAME, H&E.",
];

/// Default Top-K list for slide-level evaluation.
pub const DEFAULT_TOPK: [usize; 4] = [1, 5, 10, 50];

pub fn render(template: &str, synonym: &str) -> String {
    template.replacen(CLASSNAME, synonym, 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSynonyms {
    pub name: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptBank {
    pub templates: Vec<String>,
    pub classes: Vec<ClassSynonyms>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    templates: Option<Vec<String>>,
    classes: Vec<ClassSynonyms>,
}

impl PromptBank {
    pub fn new(templates: Vec<String>, classes: Vec<ClassSynonyms>) -> Result<Self> {
        let bank = PromptBank { templates, classes };
        bank.validate()?;
        Ok(bank)
    }

    pub fn with_shipped_templates(classes: Vec<ClassSynonyms>) -> Result<Self> {
        Self::new(SHIPPED_TEMPLATES.iter().map(|t| t.to_string()).collect(), classes)
    }

    /// Reads `{"templates": [...]?, "classes": [...]}`; missing templates
    /// default to [`SHIPPED_TEMPLATES`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: BankFile = read_json(path)?;
        match file.templates {
            Some(t) => Self::new(t, file.classes),
            None => Self::with_shipped_templates(file.classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::PromptBank("no templates".into()));
        }
        for t in &self.templates {
            if t.matches(CLASSNAME).count() != 1 {
                return Err(Error::PromptBank(format!(
                    "template \"{t}\" must contain {CLASSNAME} exactly once"
                )));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::PromptBank("no classes".into()));
        }
        for c in &self.classes {
            if c.synonyms.iter().all(|s| s.trim().is_empty()) {
                return Err(Error::PromptBank(format!("class \"{}\" has no synonyms", c.name)));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTrial {
    pub trial: usize,
    /// One rendered prompt per class.
    pub prompts: Vec<String>,
    /// `(template, synonym)` index per class.
    pub choices: Vec<(usize, usize)>,
}

/// Draws a template and a synonym per class per trial, independently and
/// uniformly.
pub fn generate_prompts<R: Rng + ?Sized>(
    bank: &PromptBank,
    rng: &mut R,
    trials: usize,
) -> Result<Vec<PromptTrial>> {
    bank.validate()?;
    if trials == 0 {
        return Err(Error::EmptyInput("trials must be at least 1"));
    }
    Ok((0..trials)
        .map(|trial| {
            let mut prompts = Vec::with_capacity(bank.classes.len());
            let mut choices = Vec::with_capacity(bank.classes.len());
            for class in &bank.classes {
                let t = rng.random_range(0..bank.templates.len());
                let s = rng.random_range(0..class.synonyms.len());
                prompts.push(render(&bank.templates[t], &class.synonyms[s]));
                choices.push((t, s));
            }
            PromptTrial {
                trial,
                prompts,
                choices,
            }
        })
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn zero_shot_classify(images: &Tensor2, class_prompts: &Tensor2) -> Vec<usize> {
    images
        .iter_rows()
        .map(|v| {
            let scores: Vec<f64> = class_prompts.iter_rows().map(|c| dot(v, c)).collect();
            argmax(&scores)
        })
        .collect()
}

fn class_count(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().chain(labels).max().map_or(0, |m| m + 1)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "weighted_f1: length mismatch");
    assert!(!labels.is_empty(), "weighted_f1: no labels");
    let c = class_count(preds, labels);
    let (mut tp, mut predicted, mut support) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let mut total = 0.0;
    for i in 0..c {
        if support[i] == 0 {
            continue;
        }
        let precision = if predicted[i] > 0 {
            tp[i] as f64 / predicted[i] as f64
        } else {
            0.0
        };
        let recall = tp[i] as f64 / support[i] as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support[i] as f64 * f1;
    }
    total / labels.len() as f64
}

/// Unweighted mean of per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "balanced_accuracy: length mismatch");
    assert!(!labels.is_empty(), "balanced_accuracy: no labels");
    let c = class_count(preds, labels);
    let (mut hits, mut support) = (vec![0usize; c], vec![0usize; c]);
    for (&p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let present: Vec<usize> = (0..c).filter(|&i| support[i] > 0).collect();
    present
        .iter()
        .map(|&i| hits[i] as f64 / support[i] as f64)
        .sum::<f64>()
        / present.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean of each class's K largest patch scores.
    #[default]
    Mean,
    /// Vote among the K patches with the highest top score.
    MajorityVote,
}

fn top_k_desc(values: impl Iterator<Item = f64>, k: usize) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = values.enumerate().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// Slide prediction from a `patches × classes` score matrix.
pub fn topk_pool_slide(scores: &Tensor2, k: usize, pooling: Pooling) -> usize {
    assert!(
        scores.rows() >= 1 && scores.cols() >= 1,
        "topk_pool_slide: empty scores"
    );
    let k = k.clamp(1, scores.rows());
    match pooling {
        Pooling::Mean => {
            let pooled: Vec<f64> = (0..scores.cols())
                .map(|c| {
                    let top = top_k_desc((0..scores.rows()).map(|r| scores.get(r, c)), k);
                    top.iter().map(|(_, s)| s).sum::<f64>() / k as f64
                })
                .collect();
            argmax(&pooled)
        }
        Pooling::MajorityVote => {
            let best = scores.iter_rows().map(|r| {
                let i = argmax(r);
                r[i]
            });
            let mut votes = vec![0.0; scores.cols()];
            for (patch, _) in top_k_desc(best, k) {
                votes[argmax(scores.row(patch))] += 1.0;
            }
            argmax(&votes)
        }
    }
}

/// Gallery indices ranked by inner product, descending, ties by index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor2) -> Vec<usize> {
    top_k_desc(gallery.iter_rows().map(|g| dot(query, g)), gallery.rows())
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// Fraction of queries with at least one positive among the top `k`.
pub fn recall_at_k(query: &Tensor2, gallery: &Tensor2, positives: &[Vec<usize>], k: usize) -> f64 {
    assert_eq!(
        query.rows(),
        positives.len(),
        "recall_at_k: one positive set per query"
    );
    assert!(k >= 1 && query.rows() >= 1, "recall_at_k: empty input");
    let hits = query
        .iter_rows()
        .zip(positives)
        .filter(|(q, pos)| {
            let top = top_k_desc(gallery.iter_rows().map(|g| dot(q, g)), k);
            top.iter().any(|(i, _)| pos.contains(i))
        })
        .count();
    hits as f64 / query.rows() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear interpolation between order statistics at `(m − 1)·q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartile_report(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quartile_report needs at least one value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Quartiles {
        median: quantile_sorted(&sorted, 0.5),
        q1: quantile_sorted(&sorted, 0.25),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl EvalReport {
    pub fn from_values(metric: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let q = quartile_report(&values)?;
        Ok(EvalReport {
            metric: metric.into(),
            values,
            median: q.median,
            q1: q.q1,
            q3: q.q3,
        })
    }
}

fn class_labels<'a>(
    bank: &PromptBank,
    labels: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<Vec<usize>> {
    labels
        .map(|(id, label)| {
            bank.class_index(label).ok_or_else(|| Error::InvalidRecord {
                id: id.to_string(),
                message: format!("label \"{label}\" is not a class of the prompt bank"),
            })
        })
        .collect()
}

/// Prompt-ensembled zero-shot patch classification scored by weighted F1.
pub fn run_zeroshot_eval<R: Rng + ?Sized>(
    patches: &[PatchRecord],
    bank: &PromptBank,
    text: &TextEncoderParams,
    image: &ImageEncoderParams,
    trials: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("no patches to evaluate"));
    }
    let labels = class_labels(bank, patches.iter().map(|p| (p.id.as_str(), p.label.as_str())))?;
    let rows: Vec<&[f64]> = patches.iter().map(|p| p.features.as_slice()).collect();
    let images = image.encode_batch(&Tensor2::from_rows(&rows)?)?;
    let mut values = Vec::with_capacity(trials);
    for trial in generate_prompts(bank, rng, trials)? {
        let prompts = text.encode_batch(&trial.prompts)?;
        values.push(weighted_f1(&zero_shot_classify(&images, &prompts), &labels));
    }
    EvalReport::from_values("weighted_f1", values)
}

/// Slide subtyping by Top-K pooling, scored by balanced accuracy; one
/// report per K.
#[allow(clippy::too_many_arguments)]
pub fn run_wsi_eval<R: Rng + ?Sized>(
    slides: &[WsiRecord],
    bank: &PromptBank,
    text: &TextEncoderParams,
    image: &ImageEncoderParams,
    trials: usize,
    ks: &[usize],
    pooling: Pooling,
    rng: &mut R,
) -> Result<Vec<EvalReport>> {
    if slides.is_empty() {
        return Err(Error::EmptyInput("no slides to evaluate"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("top-K list must be non-empty and positive".into()));
    }
    let labels = class_labels(
        bank,
        slides.iter().map(|s| (s.slide_id.as_str(), s.label.as_str())),
    )?;
    let encoded: Vec<Tensor2> = slides
        .iter()
        .map(|s| {
            if s.patch_features.is_empty() {
                return Err(Error::InvalidRecord {
                    id: s.slide_id.clone(),
                    message: "slide has no patches".into(),
                });
            }
            image.encode_batch(&Tensor2::from_rows(&s.patch_features)?)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![Vec::with_capacity(trials); ks.len()];
    for trial in generate_prompts(bank, rng, trials)? {
        let prompts = text.encode_batch(&trial.prompts)?;
        let scores: Vec<Tensor2> = encoded.iter().map(|e| e.matmul_nt(&prompts)).collect();
        for (ki, &k) in ks.iter().enumerate() {
            let preds: Vec<usize> = scores.iter().map(|s| topk_pool_slide(s, k, pooling)).collect();
            values[ki].push(balanced_accuracy(&preds, &labels));
        }
    }
    ks.iter()
        .zip(values)
        .map(|(k, v)| EvalReport::from_values(format!("balanced_accuracy@{k}"), v))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalTask {
    /// Image → caption.
    I2t,
    /// Caption → image.
    T2i,
    /// Disease label → captions with that label.
    L2t,
    /// Image → its disease label.
    I2l,
}

impl std::str::FromStr for RetrievalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Self::I2t),
            "t2i" => Ok(Self::T2i),
            "l2t" => Ok(Self::L2t),
            "i2l" => Ok(Self::I2l),
            other => Err(Error::Config(format!(
                "unknown retrieval task \"{other}\" (expected i2t, t2i, l2t or i2l)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: RetrievalTask,
    pub queries: usize,
    pub gallery: usize,
    /// Recall@K keyed by K.
    pub recall: BTreeMap<usize, f64>,
}

/// Distinct disease labels in first-appearance order.
pub fn distinct_labels(pairs: &[PairRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in pairs.iter().filter_map(|p| p.disease_label.as_ref()) {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

/// Label prompts use the bare-name template.
pub fn label_prompt(label: &str) -> String {
    render(SHIPPED_TEMPLATES[0], label)
}

pub fn run_retrieval(
    pairs: &[PairRecord],
    text: &TextEncoderParams,
    image: &ImageEncoderParams,
    task: RetrievalTask,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no pairs to evaluate"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K list must be non-empty and positive".into()));
    }
    let image_embs = || -> Result<Tensor2> {
        let rows: Vec<&[f64]> = pairs.iter().map(|p| p.image_features.as_slice()).collect();
        image.encode_batch(&Tensor2::from_rows(&rows)?)
    };
    let captions: Vec<&str> = pairs.iter().map(|p| p.caption.as_str()).collect();
    let labels = distinct_labels(pairs);
    let label_of = |p: &PairRecord| {
        p.disease_label
            .as_ref()
            .and_then(|l| labels.iter().position(|x| x == l))
    };
    let label_embs = || -> Result<Tensor2> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("no pair carries a disease label"));
        }
        let prompts: Vec<String> = labels.iter().map(|l| label_prompt(l)).collect();
        text.encode_batch(&prompts)
    };

    let (query, gallery, positives) = match task {
        RetrievalTask::I2t => (
            image_embs()?,
            text.encode_batch(&captions)?,
            (0..pairs.len()).map(|i| vec![i]).collect::<Vec<_>>(),
        ),
        RetrievalTask::T2i => (
            text.encode_batch(&captions)?,
            image_embs()?,
            (0..pairs.len()).map(|i| vec![i]).collect(),
        ),
        RetrievalTask::L2t => {
            let mut pos = vec![Vec::new(); labels.len()];
            for (i, p) in pairs.iter().enumerate() {
                if let Some(l) = label_of(p) {
                    pos[l].push(i);
                }
            }
            (label_embs()?, text.encode_batch(&captions)?, pos)
        }
        RetrievalTask::I2l => {
            let labelled: Vec<usize> = (0..pairs.len())
                .filter(|&i| label_of(&pairs[i]).is_some())
                .collect();
            let pos = labelled
                .iter()
                .map(|&i| vec![label_of(&pairs[i]).unwrap()])
                .collect();
            (image_embs()?.select_rows(&labelled), label_embs()?, pos)
        }
    };
    Ok(RetrievalReport {
        task,
        queries: query.rows(),
        gallery: gallery.rows(),
        recall: ks
            .iter()
            .map(|&k| (k, recall_at_k(&query, &gallery, &positives, k)))
            .collect(),
    })
}

/// Recall@K of every tree attribute against the disease names.
pub fn attribute_entity_recall(tree: &KnowledgeTree, text: &TextEncoderParams, k: usize) -> Result<f64> {
    if tree.is_empty() {
        return Err(Error::EmptyInput("empty knowledge tree"));
    }
    let names: Vec<&str> = tree.nodes.iter().map(|n| n.name.as_str()).collect();
    let mut texts = Vec::new();
    let mut positives = Vec::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        for a in &node.attributes {
            texts.push(a.text.as_str());
            positives.push(vec![i]);
        }
    }
    Ok(recall_at_k(
        &text.encode_batch(&texts)?,
        &text.encode_batch(&names)?,
        &positives,
        k,
    ))
}
