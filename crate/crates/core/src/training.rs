//! Knowledge-encoder pretraining and knowledge-enhanced alignment loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::PairRecord;
use crate::encoders::{freeze, ImageEncoderParams, Parameters, TextEncoderParams, TextEncoderShape};
use crate::error::{Error, Result};
use crate::knowledge_tree::{sample_entity_batch, KnowledgeTree};
use crate::numerics::{Graph, Tensor2};
use crate::objectives::{
    adasp_loss, kep_loss, triplet_batchhard_loss, AlignedTriple, EmbeddingBatch, LossConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricLoss {
    Adasp,
    Triplet,
}

impl MetricLoss {
    pub fn label(self) -> &'static str {
        match self {
            MetricLoss::Adasp => "adasp",
            MetricLoss::Triplet => "triplet",
        }
    }
}

impl std::str::FromStr for MetricLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adasp" => Ok(MetricLoss::Adasp),
            "triplet" => Ok(MetricLoss::Triplet),
            other => Err(Error::Config(format!(
                "unknown metric loss \"{other}\" (expected adasp or triplet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Knowledge-encoder epochs; one epoch is `ke_batches_per_epoch` sampled
    /// entity batches.
    pub ke_epochs: usize,
    /// Defaults to `ceil(entities / entities_per_batch)` when unset.
    pub ke_batches_per_epoch: Option<usize>,
    pub entities_per_batch: usize,
    pub instances_per_entity: usize,
    /// Alignment epochs; one epoch is a shuffled pass over the pairs.
    pub kep_epochs: usize,
    pub pair_batch: usize,
    /// Toy-scale default; full-scale alignment used 1e-5.
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub alpha: f64,
    pub margin: f64,
    pub projection_head: bool,
    pub distillation: bool,
    pub metric: MetricLoss,
    pub text_buckets: usize,
    pub text_hidden: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            ke_epochs: 200,
            ke_batches_per_epoch: None,
            entities_per_batch: 32,
            instances_per_entity: 8,
            kep_epochs: 30,
            pair_batch: 256,
            lr: 1e-2,
            momentum: 0.9,
            tau: 0.04,
            alpha: 0.3,
            margin: 0.3,
            projection_head: true,
            distillation: true,
            metric: MetricLoss::Adasp,
            text_buckets: crate::encoders::DEFAULT_BUCKETS,
            text_hidden: crate::encoders::DEFAULT_HIDDEN,
            embed_dim: crate::EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("tau", self.tau)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if self.entities_per_batch < 2 || self.instances_per_entity < 2 {
            return Err(Error::Config(
                "entity batches need at least 2 entities and 2 instances".into(),
            ));
        }
        if self.pair_batch == 0 || self.text_buckets == 0 || self.text_hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "batch sizes and dimensions must be positive".into(),
            ));
        }
        if self.ke_batches_per_epoch == Some(0) {
            return Err(Error::Config("ke_batches_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// The α actually applied: zero when distillation is switched off.
    pub fn effective_alpha(&self) -> f64 {
        if self.distillation {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            alpha: self.effective_alpha(),
            margin: self.margin,
        }
    }

    pub fn text_shape(&self) -> TextEncoderShape {
        TextEncoderShape {
            buckets: self.text_buckets,
            hidden: self.text_hidden,
            embed_dim: self.embed_dim,
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_knowledge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// `"ke"` or `"kep"`.
    pub stage: String,
    /// Loss that produced the steps, e.g. `"adasp"` or `"kep"`.
    pub loss: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    /// Kept out of serialized histories so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunHistory {
    fn new(stage: &str, loss: &str, cfg: &TrainConfig) -> Self {
        RunHistory {
            stage: stage.into(),
            loss: loss.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            steps: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    /// Header line followed by one line per step.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            stage: &'a str,
            loss: &'a str,
            seed: u64,
            config: &'a TrainConfig,
        }
        let mut out = serde_json::to_string(&Header {
            stage: &self.stage,
            loss: &self.loss,
            seed: self.seed,
            config: &self.config,
        })
        .expect("history header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// `velocity = momentum·velocity + grad; param −= lr·velocity`, elementwise.
pub fn sgd_step(param: &mut Tensor2, grad: &Tensor2, velocity: &mut Tensor2, lr: f64, momentum: f64) {
    assert_eq!(param.shape(), grad.shape(), "sgd: gradient shape");
    assert_eq!(param.shape(), velocity.shape(), "sgd: velocity shape");
    for ((p, g), v) in param
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(velocity.as_mut_slice())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// SGD with momentum over one parameter set.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor2>,
}

impl Sgd {
    pub fn new(params: &impl Parameters, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params
                .params()
                .iter()
                .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, params: &mut impl Parameters, grads: &[Tensor2]) -> Result<()> {
        let mut targets = params.params_mut();
        assert_eq!(targets.len(), grads.len(), "one gradient per parameter");
        for ((name, _), g) in targets.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: name.to_string(),
                });
            }
        }
        for (((_, p), g), v) in targets.iter_mut().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, self.lr, self.momentum);
        }
        Ok(())
    }
}

fn finite(value: f64, name: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: "loss",
            name: name.to_string(),
        })
    }
}

/// Metric-learning pretraining of the knowledge encoder on entity batches.
pub fn train_knowledge_encoder<R: Rng + ?Sized>(
    tree: &KnowledgeTree,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(TextEncoderParams, RunHistory)> {
    cfg.validate()?;
    let (n, k) = (cfg.entities_per_batch, cfg.instances_per_entity);
    if tree.len() < n {
        return Err(Error::NotEnoughEntities {
            requested: n,
            available: tree.len(),
        });
    }
    let started = Instant::now();
    let mut params = TextEncoderParams::init(cfg.text_shape(), rng);
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum);
    let mut history = RunHistory::new("ke", cfg.metric.label(), cfg);
    let per_epoch = cfg.ke_batches_per_epoch.unwrap_or(tree.len().div_ceil(n));

    for epoch in 0..cfg.ke_epochs {
        for _ in 0..per_epoch {
            let batch = sample_entity_batch(tree, rng, n, k)?;
            let mut g = Graph::new();
            let fwd = params.forward(&mut g, &batch.texts)?;
            let emb = EmbeddingBatch::new_raw(n, k, g.value(fwd.output).clone())?;
            let out = match cfg.metric {
                MetricLoss::Adasp => adasp_loss(&emb, cfg.tau),
                MetricLoss::Triplet => triplet_batchhard_loss(&emb, cfg.margin),
            };
            let loss = finite(out.loss, cfg.metric.label())?;
            let grads = fwd.param_grads(&g, out.grad);
            opt.step(&mut params, &grads)?;
            history.steps.push(StepRecord {
                step: history.steps.len(),
                epoch,
                loss,
                image_text: None,
                text_knowledge: None,
                alpha: None,
            });
        }
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((params, history))
}

#[derive(Debug, Clone)]
pub struct KepOutcome {
    pub image: ImageEncoderParams,
    pub text: TextEncoderParams,
    pub history: RunHistory,
}

fn features_of(pairs: &[PairRecord], idx: &[usize]) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| pairs[i].image_features.as_slice()).collect();
    Tensor2::from_rows(&rows)
}

/// Image–text alignment with the text encoder initialized from `knowledge`
/// and a frozen copy of `knowledge` distilling into it.
///
/// Batches come from a per-epoch shuffle of the pairs; a trailing partial
/// batch is dropped. The batch size is capped at the number of pairs.
pub fn train_kep<R: Rng + ?Sized>(
    pairs: &[PairRecord],
    knowledge: &TextEncoderParams,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<KepOutcome> {
    cfg.validate()?;
    let first = pairs
        .first()
        .ok_or(Error::EmptyInput("train_kep needs at least one pair"))?;
    let input_dim = first.image_features.len();
    if let Some(bad) = pairs.iter().find(|p| p.image_features.len() != input_dim) {
        return Err(Error::InvalidRecord {
            id: bad.id.clone(),
            message: format!(
                "feature dimension {}, expected {input_dim}",
                bad.image_features.len()
            ),
        });
    }
    let started = Instant::now();
    let loss_cfg = cfg.loss_config();

    let frozen = freeze(knowledge.clone());
    let mut text = knowledge.clone();
    let mut image = ImageEncoderParams::init(input_dim, knowledge.embed_dim(), cfg.projection_head, rng);
    let mut text_opt = Sgd::new(&text, cfg.lr, cfg.momentum);
    let mut image_opt = Sgd::new(&image, cfg.lr, cfg.momentum);
    let mut history = RunHistory::new("kep", "kep", cfg);

    let batch = cfg.pair_batch.min(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.kep_epochs {
        order.shuffle(rng);
        for idx in order.chunks_exact(batch) {
            let captions: Vec<&str> = idx.iter().map(|&i| pairs[i].caption.as_str()).collect();

            let mut gi = Graph::new();
            let vf = image.forward(&mut gi, &features_of(pairs, idx)?)?;
            let mut gt = Graph::new();
            let tf = text.forward(&mut gt, &captions)?;
            let k_emb = frozen.encode_batch(&captions)?;

            let triple = AlignedTriple::new(gi.value(vf.output).clone(), gt.value(tf.output).clone(), k_emb)?;
            let out = kep_loss(&triple, &loss_cfg)?;
            finite(out.total, "kep")?;

            let image_grads = vf.param_grads(&gi, out.grad_image);
            let text_grads = tf.param_grads(&gt, out.grad_text);
            image_opt.step(&mut image, &image_grads)?;
            text_opt.step(&mut text, &text_grads)?;

            history.steps.push(StepRecord {
                step: history.steps.len(),
                epoch,
                loss: out.total,
                image_text: Some(out.image_text),
                text_knowledge: Some(out.text_knowledge),
                alpha: Some(out.alpha),
            });
        }
    }
    history.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(KepOutcome { image, text, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::RunMeta;
    use crate::knowledge_tree::build_tree;
    use crate::objectives::info_nce;
    use crate::synth_data::{gen_knowledge_tree, gen_pairs, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor2::zeros(1, 1);
        let g = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let mut v = Tensor2::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0);
        assert!((p.get(0, 0) + 0.1).abs() < 1e-15);

        let mut p = Tensor2::zeros(1, 1);
        let mut v = Tensor2::zeros(1, 1);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.9);
        assert!((p.get(0, 0) + 2.9).abs() < 1e-12);

        let mut p = Tensor2::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let mut v = Tensor2::zeros(1, 2);
        sgd_step(&mut p, &Tensor2::zeros(1, 2), &mut v, 0.3, 0.9);
        assert_eq!(p.as_slice(), &[0.5, -0.5]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = TextEncoderParams::init(
            TextEncoderShape {
                buckets: 4,
                hidden: 2,
                embed_dim: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        let before = params.clone();
        let mut opt = Sgd::new(&params, 0.1, 0.9);
        let mut grads: Vec<Tensor2> = params
            .params()
            .iter()
            .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        grads[2].as_mut_slice()[0] = f64::NAN;
        match opt.step(&mut params, &grads) {
            Err(Error::NonFinite { name, .. }) => assert_eq!(name, "text.hidden.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(params, before);
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            entities_per_batch: 4,
            instances_per_entity: 4,
            ke_epochs: 10,
            ke_batches_per_epoch: Some(5),
            kep_epochs: 25,
            pair_batch: 16,
            text_buckets: 512,
            text_hidden: 16,
            embed_dim: 32,
            ..TrainConfig::default()
        }
    }

    fn small_spec() -> SynthSpec {
        SynthSpec {
            entities: 8,
            latent_dim: 12,
            noise: 0.1,
            pairs_per_entity: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn knowledge_encoder_loss_decreases_and_is_deterministic() {
        let spec = small_spec();
        let (tree, _) = build_tree(&gen_knowledge_tree(&spec), &[]);
        let cfg = small_cfg();
        let (p1, h1) = train_knowledge_encoder(&tree, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (p2, _) = train_knowledge_encoder(&tree, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(h1.steps.len(), 50);
        let head: f64 = h1.steps[..5].iter().map(|s| s.loss).sum();
        let tail: f64 = h1.steps[45..].iter().map(|s| s.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
        let meta = RunMeta {
            kind: "ke".into(),
            seed: 1,
            config: serde_json::Value::Null,
        };
        assert_eq!(
            p1.to_checkpoint(meta.clone()).to_bytes(),
            p2.to_checkpoint(meta).to_bytes()
        );
    }

    #[test]
    fn triplet_run_is_labelled() {
        let (tree, _) = build_tree(&gen_knowledge_tree(&small_spec()), &[]);
        let cfg = TrainConfig {
            metric: MetricLoss::Triplet,
            ke_epochs: 1,
            ..small_cfg()
        };
        let (_, h) = train_knowledge_encoder(&tree, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(h.loss, "triplet");
        assert!(h.to_jsonl().lines().next().unwrap().contains("\"triplet\""));
    }

    #[test]
    fn kep_invariants() {
        let spec = small_spec();
        let diseases = gen_knowledge_tree(&spec);
        let (tree, _) = build_tree(&diseases, &[]);
        let pairs = gen_pairs(&spec, &diseases);
        let cfg = small_cfg();
        let (know, _) = train_knowledge_encoder(&tree, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let meta = RunMeta {
            kind: "k".into(),
            seed: 0,
            config: serde_json::Value::Null,
        };
        let before = know.to_checkpoint(meta.clone()).to_bytes();
        let out = train_kep(&pairs, &know, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(know.to_checkpoint(meta).to_bytes(), before);

        for s in &out.history.steps {
            let parts = s.image_text.unwrap() + s.alpha.unwrap() * s.text_knowledge.unwrap();
            assert!((s.loss - parts).abs() <= 1e-12);
        }

        // step 0: the text encoder is still a clone of the knowledge encoder
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _ = ImageEncoderParams::init(pairs[0].image_features.len(), know.embed_dim(), true, &mut rng);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let caps: Vec<&str> = order[..16].iter().map(|&i| pairs[i].caption.as_str()).collect();
        let k = know.encode_batch(&caps).unwrap();
        let expect = info_nce(&k, &k, cfg.tau).unwrap().loss;
        assert_eq!(out.history.steps[0].text_knowledge.unwrap(), expect);

        let vt: Vec<f64> = out.history.steps.iter().map(|s| s.image_text.unwrap()).collect();
        let n = vt.len();
        let head: f64 = vt[..4].iter().sum::<f64>() / 4.0;
        let tail: f64 = vt[n - 4..].iter().sum::<f64>() / 4.0;
        assert!(tail < head, "L_vt {head} -> {tail}");
    }

    #[test]
    fn distillation_off_equals_alpha_zero() {
        let spec = small_spec();
        let diseases = gen_knowledge_tree(&spec);
        let pairs = gen_pairs(&spec, &diseases);
        let know = TextEncoderParams::init(small_cfg().text_shape(), &mut ChaCha8Rng::seed_from_u64(9));
        let off = TrainConfig {
            distillation: false,
            kep_epochs: 3,
            ..small_cfg()
        };
        let zero = TrainConfig {
            alpha: 0.0,
            kep_epochs: 3,
            ..small_cfg()
        };
        let a = train_kep(&pairs, &know, &off, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = train_kep(&pairs, &know, &zero, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.image.flatten(), b.image.flatten());
        assert_eq!(a.text.flatten(), b.text.flatten());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"bogus": 1}"#);
        assert!(parsed.is_err());
        assert_eq!("triplet".parse::<MetricLoss>().unwrap(), MetricLoss::Triplet);
    }
}
