//! Small trainable text and image encoders.
//!
//! The text encoder hashes lowercase alphanumeric tokens into a fixed number
//! of buckets, mean-pools their embeddings and applies a two-layer tanh MLP.
//! The image encoder is a linear trunk with an optional linear projection
//! head. Both outputs are l2-normalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{Checkpoint, NamedTensor, RunMeta};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, NodeId, Tensor2};
use crate::EMBED_DIM;

pub const DEFAULT_BUCKETS: usize = 4096;
pub const DEFAULT_HIDDEN: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub buckets: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            buckets: DEFAULT_BUCKETS,
        }
    }
}

impl Tokenizer {
    pub fn new(buckets: usize) -> Self {
        assert!(buckets > 0, "tokenizer needs at least one bucket");
        Tokenizer { buckets }
    }

    /// Lowercased maximal runs of alphanumeric characters.
    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.buckets as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::tokens(text).map(|t| self.token_id(&t)).collect()
    }
}

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor2 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: init_uniform(rng, fan_in, fan_out, fan_in),
            bias: init_uniform(rng, 1, fan_out, fan_in),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> (NodeId, [NodeId; 2]) {
        let w = g.leaf(self.weight.clone());
        let b = g.leaf(self.bias.clone());
        let xw = g.matmul(x, w);
        (g.add(xw, b), [w, b])
    }
}

/// Parameter tensors in a fixed order, with stable names.
pub trait Parameters {
    fn params(&self) -> Vec<(&'static str, &Tensor2)>;
    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor2)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// All parameters concatenated in order.
    fn flatten(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`Parameters::flatten`].
    fn unflatten(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count(), "flat parameter length");
        let mut off = 0;
        for (_, t) in self.params_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }
}

/// A forward pass recorded on a graph: the output rows plus the leaf ids of
/// every parameter, in [`Parameters`] order.
#[derive(Debug)]
pub struct Forward {
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

impl Forward {
    /// Backpropagate `grad_output` and collect one gradient per parameter.
    pub fn param_grads(&self, g: &Graph, grad_output: Tensor2) -> Vec<Tensor2> {
        let mut grads: Gradients = g.backward(self.output, grad_output);
        self.params
            .iter()
            .map(|&id| grads.take_or_zeros(id, g.value(id).shape()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    pub tokenizer: Tokenizer,
    /// buckets x hidden
    pub embed: Tensor2,
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderShape {
    pub buckets: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for TextEncoderShape {
    fn default() -> Self {
        TextEncoderShape {
            buckets: DEFAULT_BUCKETS,
            hidden: DEFAULT_HIDDEN,
            embed_dim: EMBED_DIM,
        }
    }
}

impl TextEncoderParams {
    pub fn init<R: Rng + ?Sized>(shape: TextEncoderShape, rng: &mut R) -> Self {
        TextEncoderParams {
            tokenizer: Tokenizer::new(shape.buckets),
            // one-hot lookup: fan-in of 1
            embed: init_uniform(rng, shape.buckets, shape.hidden, 1),
            hidden: Linear::init(rng, shape.hidden, shape.hidden),
            output: Linear::init(rng, shape.hidden, shape.embed_dim),
        }
    }

    pub fn shape(&self) -> TextEncoderShape {
        TextEncoderShape {
            buckets: self.embed.rows(),
            hidden: self.embed.cols(),
            embed_dim: self.output.weight.cols(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.output.weight.cols()
    }

    fn token_groups<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<usize>>> {
        texts
            .iter()
            .map(|t| {
                let ids = self.tokenizer.encode(t.as_ref());
                if ids.is_empty() {
                    Err(Error::EmptyText(t.as_ref().to_string()))
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }

    /// Record the batch forward pass on `g`; one output row per text.
    pub fn forward<S: AsRef<str>>(&self, g: &mut Graph, texts: &[S]) -> Result<Forward> {
        let groups = self.token_groups(texts)?;
        let table = g.leaf(self.embed.clone());
        let pooled = g.mean_pool(table, groups);
        let (h, [w1, b1]) = self.hidden.forward(g, pooled);
        let h = g.tanh(h);
        let (o, [w2, b2]) = self.output.forward(g, h);
        let output = g.l2_normalize_rows(o)?;
        Ok(Forward {
            output,
            params: vec![table, w1, b1, w2, b2],
        })
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, texts)?;
        Ok(g.value(f.output).clone())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[text])?.into_vec())
    }

    pub fn to_checkpoint(&self, meta: RunMeta) -> Checkpoint {
        Checkpoint {
            token_buckets: Some(self.tokenizer.buckets),
            meta,
            tensors: named(self),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.tensor(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor \"{name}\"")))
        };
        let embed = get("text.embed")?;
        let buckets = ckpt.token_buckets.unwrap_or(embed.rows());
        if buckets != embed.rows() {
            return Err(Error::Checkpoint(format!(
                "{buckets} token buckets but embedding table has {} rows",
                embed.rows()
            )));
        }
        let params = TextEncoderParams {
            tokenizer: Tokenizer::new(buckets),
            embed,
            hidden: Linear {
                weight: get("text.hidden.weight")?,
                bias: get("text.hidden.bias")?,
            },
            output: Linear {
                weight: get("text.output.weight")?,
                bias: get("text.output.bias")?,
            },
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let s = self.shape();
        let ok = self.hidden.weight.shape() == (s.hidden, s.hidden)
            && self.hidden.bias.shape() == (1, s.hidden)
            && self.output.weight.rows() == s.hidden
            && self.output.bias.shape() == (1, s.embed_dim);
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("inconsistent text encoder shapes".into()))
        }
    }
}

impl Parameters for TextEncoderParams {
    fn params(&self) -> Vec<(&'static str, &Tensor2)> {
        vec![
            ("text.embed", &self.embed),
            ("text.hidden.weight", &self.hidden.weight),
            ("text.hidden.bias", &self.hidden.bias),
            ("text.output.weight", &self.output.weight),
            ("text.output.bias", &self.output.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor2)> {
        vec![
            ("text.embed", &mut self.embed),
            ("text.hidden.weight", &mut self.hidden.weight),
            ("text.hidden.bias", &mut self.hidden.bias),
            ("text.output.weight", &mut self.output.weight),
            ("text.output.bias", &mut self.output.bias),
        ]
    }
}

fn named(p: &impl Parameters) -> Vec<NamedTensor> {
    p.params()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            tensor: t.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams {
    /// input_dim x embed_dim
    pub trunk: Linear,
    /// embed_dim x embed_dim, present when the projection head is enabled.
    pub head: Option<Linear>,
}

impl ImageEncoderParams {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        embed_dim: usize,
        head_enabled: bool,
        rng: &mut R,
    ) -> Self {
        let trunk = Linear::init(rng, input_dim, embed_dim);
        let head = head_enabled.then(|| Linear::init(rng, embed_dim, embed_dim));
        ImageEncoderParams { trunk, head }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.trunk.weight.cols()
    }

    pub fn head_enabled(&self) -> bool {
        self.head.is_some()
    }

    /// Record the forward pass for a batch of feature rows.
    pub fn forward(&self, g: &mut Graph, features: &Tensor2) -> Result<Forward> {
        if features.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "image features have dimension {}, encoder expects {}",
                features.cols(),
                self.input_dim()
            )));
        }
        let x = g.leaf(features.clone());
        let (mut out, trunk_ids) = self.trunk.forward(g, x);
        let mut params = trunk_ids.to_vec();
        if let Some(head) = &self.head {
            let (o, ids) = head.forward(g, out);
            out = o;
            params.extend(ids);
        }
        let output = g.l2_normalize_rows(out)?;
        Ok(Forward { output, params })
    }

    pub fn encode_batch(&self, features: &Tensor2) -> Result<Tensor2> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, features)?;
        Ok(g.value(f.output).clone())
    }

    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        let row = Tensor2::from_vec(1, features.len(), features.to_vec())?;
        Ok(self.encode_batch(&row)?.into_vec())
    }

    pub fn to_checkpoint(&self, meta: RunMeta) -> Checkpoint {
        Checkpoint {
            token_buckets: None,
            meta,
            tensors: named(self),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.tensor(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor \"{name}\"")))
        };
        let trunk = Linear {
            weight: get("image.trunk.weight")?,
            bias: get("image.trunk.bias")?,
        };
        let head = match (ckpt.tensor("image.head.weight"), ckpt.tensor("image.head.bias")) {
            (Some(w), Some(b)) => Some(Linear {
                weight: w.clone(),
                bias: b.clone(),
            }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete projection head".into())),
        };
        let d = trunk.weight.cols();
        let head_ok = head
            .as_ref()
            .is_none_or(|h| h.weight.shape() == (d, d) && h.bias.shape() == (1, d));
        if trunk.bias.shape() != (1, d) || !head_ok {
            return Err(Error::Checkpoint("inconsistent image encoder shapes".into()));
        }
        Ok(ImageEncoderParams { trunk, head })
    }
}

impl Parameters for ImageEncoderParams {
    fn params(&self) -> Vec<(&'static str, &Tensor2)> {
        let mut v = vec![
            ("image.trunk.weight", &self.trunk.weight),
            ("image.trunk.bias", &self.trunk.bias),
        ];
        if let Some(h) = &self.head {
            v.push(("image.head.weight", &h.weight));
            v.push(("image.head.bias", &h.bias));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor2)> {
        let mut v = vec![
            ("image.trunk.weight", &mut self.trunk.weight),
            ("image.trunk.bias", &mut self.trunk.bias),
        ];
        if let Some(h) = &mut self.head {
            v.push(("image.head.weight", &mut h.weight));
            v.push(("image.head.bias", &mut h.bias));
        }
        v
    }
}

/// Read-only wrapper: the inner parameters can be used for forward passes
/// but never handed out mutably.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder<P> {
    inner: P,
}

impl<P> FrozenEncoder<P> {
    pub fn get(&self) -> &P {
        &self.inner
    }
}

pub fn freeze<P>(params: P) -> FrozenEncoder<P> {
    FrozenEncoder { inner: params }
}

impl FrozenEncoder<TextEncoderParams> {
    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor2> {
        self.inner.encode_batch(texts)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.inner.encode(text)
    }
}
