//! Pre-norm transformer encoder with per-layer head aggregation and a
//! mean-pooled MLP classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{concat_heads_batched, aggregate, Aggregator, AggregatorParams, AttentionParams};
use crate::error::{Error, Result};
use crate::params::{scaled_normal, Bound, ParamId, ParamStore};
use crate::routing::RoutingConfig;
use crate::tape::{Tape, Var};
use crate::tasks::Example;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const MASK_LOGIT: f64 = -1e9;

/// Encoder shape. `routing` carries `N`, `T`, `λ` and numeric floors;
/// its kind is set per layer from `aggregators`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// One aggregator per layer, bottom layer first.
    pub aggregators: Vec<Aggregator>,
    pub routing: RoutingConfig,
    pub positional: Positional,
}

/// Position signal added to the token embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    None,
    /// A trainable `[max_len, d]` table.
    #[default]
    Learned,
    /// Fixed `sin`/`cos` features at geometric wavelengths.
    Sinusoidal,
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, width: usize) -> Tensor {
    Tensor::from_fn([len, width], |k| {
        let (p, i) = (k / width, k % width);
        let angle = p as f64 / 10000f64.powf((i - i % 2) as f64 / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.aggregators.len() != self.layers {
            return Err(Error::Config(format!(
                "{} aggregators given for {} layers",
                self.aggregators.len(),
                self.layers
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.ffn_width == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        if self.routing.width != self.width || self.routing.input_caps != self.heads {
            return Err(Error::Config(format!(
                "routing settings (d={}, H={}) disagree with the encoder (d={}, H={})",
                self.routing.width, self.routing.input_caps, self.width, self.heads
            )));
        }
        if self.aggregators.iter().any(|a| a.routing_kind().is_some()) {
            self.routing.validate()?;
        }
        Ok(())
    }

    /// Change in parameter count when one layer's aggregator goes from
    /// `from` to `to`: `H·N` vote matrices, the `H` input transforms and the
    /// `β`s (EM) replace `W^O`.
    pub fn aggregator_param_delta(&self, from: Aggregator, to: Aggregator) -> i64 {
        let size = |a: Aggregator| -> i64 {
            match a.routing_kind() {
                None => (self.width * self.width) as i64,
                Some(kind) => {
                    let mut r = self.routing.clone();
                    r.kind = kind;
                    r.param_count() as i64
                }
            }
        };
        size(to) - size(from)
    }
}

/// Input and output sizes fixed by the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub max_len: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gain: store.insert(format!("{prefix}.gain"), Tensor::ones([width]))?,
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros([width]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let n = tape.mul(n, b.var(self.gain))?;
        tape.add(n, b.var(self.bias))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Affine {
            w: store.insert(format!("{prefix}.w"), scaled_normal(&[fan_in, fan_out], fan_in, rng))?,
            b: store.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]))?,
        })
    }

    fn apply(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.w))?;
        tape.add(y, b.var(self.b))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln_attn: LayerNormParams,
    attention: AttentionParams,
    aggregator: AggregatorParams,
    ln_ffn: LayerNormParams,
    ffn_in: Affine,
    ffn_out: Affine,
}

/// Hidden affine, tanh, output affine to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    hidden: Affine,
    output: Affine,
}

impl ClassifierHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(ClassifierHead {
            hidden: Affine::init(store, "classifier.hidden", width, width, rng)?,
            output: Affine::init(store, "classifier.output", width, classes, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, b: &Bound, pooled: Var) -> Result<Var> {
        let h = self.hidden.apply(tape, b, pooled)?;
        let h = tape.tanh(h)?;
        self.output.apply(tape, b, h)
    }

    /// `(hidden_w, hidden_b, output_w, output_b)` handles.
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.hidden.w, self.hidden.b, self.output.w, self.output.b]
    }
}

/// Token ids padded to a rectangle, with lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl Batch {
    /// Pads with token 0; padding never influences real positions.
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let cols = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        if cols == 0 {
            return Err(Error::Data("batch contains an empty sequence".into()));
        }
        let mut tokens = vec![0; examples.len() * cols];
        let mut lengths = Vec::with_capacity(examples.len());
        for (r, e) in examples.iter().enumerate() {
            if e.tokens.is_empty() {
                return Err(Error::Data("empty sequence".into()));
            }
            tokens[r * cols..r * cols + e.tokens.len()].copy_from_slice(&e.tokens);
            lengths.push(e.tokens.len());
        }
        Ok(Batch {
            tokens,
            lengths,
            labels: examples.iter().map(|e| e.label).collect(),
            rows: examples.len(),
            cols,
        })
    }
}

/// Stacked encoder plus classifier, with its own parameter store.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    embed: ParamId,
    position: Option<ParamId>,
    sinusoid: Option<Tensor>,
    layers: Vec<EncoderLayer>,
    head: ClassifierHead,
}

impl Encoder {
    /// Parameters are drawn from `rng` in a fixed order: embeddings, then
    /// each layer bottom-up, then the classifier.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, dims: ModelDims, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if dims.vocab_size == 0 || dims.max_len == 0 || dims.classes < 2 {
            return Err(Error::Config(format!("invalid model dimensions {dims:?}")));
        }
        let d = config.width;
        let mut params = ParamStore::new();
        let embed = params.insert("embed.tokens", Tensor::randn([dims.vocab_size, d], 1.0, rng))?;
        let position = match config.positional {
            Positional::Learned => Some(params.insert("embed.positions", Tensor::randn([dims.max_len, d], 1.0, rng))?),
            _ => None,
        };
        let sinusoid = (config.positional == Positional::Sinusoidal).then(|| sinusoidal_table(dims.max_len, d));
        let mut layers = Vec::with_capacity(config.layers);
        for (l, &kind) in config.aggregators.iter().enumerate() {
            let p = format!("layer{l}");
            let ln_attn = LayerNormParams::init(&mut params, &format!("{p}.ln_attn"), d)?;
            let attention = AttentionParams::init(&mut params, &format!("{p}.attention"), d, config.heads, rng)?;
            let aggregator = AggregatorParams::init(&mut params, &format!("{p}.aggregate"), kind, d, &config.routing, rng)?;
            let ln_ffn = LayerNormParams::init(&mut params, &format!("{p}.ln_ffn"), d)?;
            let ffn_in = Affine::init(&mut params, &format!("{p}.ffn_in"), d, config.ffn_width, rng)?;
            let ffn_out = Affine::init(&mut params, &format!("{p}.ffn_out"), config.ffn_width, d, rng)?;
            layers.push(EncoderLayer { ln_attn, attention, aggregator, ln_ffn, ffn_in, ffn_out });
        }
        let head = ClassifierHead::init(&mut params, d, dims.classes, rng)?;
        Ok(Encoder { config, dims, params, embed, position, sinusoid, layers, head })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Replaces every parameter with the matching entry of `other`; names
    /// and shapes must agree one-to-one.
    pub fn load_params(&mut self, other: ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        for ((_, name, value), (_, oname, ovalue)) in self.params.iter().zip(other.iter()) {
            if name != oname || value.shape() != ovalue.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: model {name} {:?} vs checkpoint {oname} {:?}",
                    value.shape(),
                    ovalue.shape()
                )));
            }
        }
        self.params = other;
        Ok(())
    }

    /// Output of the top layer, `[B, J, d]`.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, batch: &Batch) -> Result<Var> {
        let (rows, cols, d) = (batch.rows, batch.cols, self.config.width);
        if cols > self.dims.max_len {
            return Err(Error::Data(format!("sequence length {cols} exceeds maximum {}", self.dims.max_len)));
        }
        let emb = tape.gather_rows(b.var(self.embed), &batch.tokens)?;
        let mut x = tape.reshape(emb, &[rows, cols, d])?;
        if let Some(pos) = self.position {
            let ids: Vec<usize> = (0..cols).collect();
            let p = tape.gather_rows(b.var(pos), &ids)?;
            x = tape.add(x, p)?;
        }
        if let Some(table) = &self.sinusoid {
            let rows = Tensor::new([cols, d], table.data()[..cols * d].to_vec())?;
            let p = tape.constant(rows);
            x = tape.add(x, p)?;
        }
        let mask = padding_mask(batch);
        let mask = if mask.data().iter().any(|&m| m != 0.0) { Some(tape.constant(mask)) } else { None };
        for layer in &self.layers {
            let h = layer.ln_attn.apply(tape, b, x)?;
            let o_hat = concat_heads_batched(tape, h, h, h, &layer.attention.bind(b), mask)?;
            let a = aggregate(tape, o_hat, &layer.aggregator.bind(b))?;
            x = tape.add(x, a)?;
            let h = layer.ln_ffn.apply(tape, b, x)?;
            let f = layer.ffn_in.apply(tape, b, h)?;
            let f = tape.relu(f)?;
            let f = layer.ffn_out.apply(tape, b, f)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }

    /// Mean over each sequence's real positions, then the MLP head:
    /// `[B, J, d]` to `[B, classes]`.
    pub fn classify(&self, tape: &mut Tape, b: &Bound, states: Var, batch: &Batch) -> Result<Var> {
        let weights = Tensor::from_fn([batch.rows, batch.cols, 1], |i| {
            let (r, c) = (i / batch.cols, i % batch.cols);
            if c < batch.lengths[r] {
                1.0 / batch.lengths[r] as f64
            } else {
                0.0
            }
        });
        let w = tape.constant(weights);
        let weighted = tape.mul(states, w)?;
        let pooled = tape.sum(weighted, 1)?;
        self.head.apply(tape, b, pooled)
    }

    pub fn logits(&self, tape: &mut Tape, b: &Bound, batch: &Batch) -> Result<Var> {
        let states = self.encode(tape, b, batch)?;
        self.classify(tape, b, states, batch)
    }
}

/// `[B, 1, 1, J]` additive attention mask, `-1e9` on padded keys.
fn padding_mask(batch: &Batch) -> Tensor {
    Tensor::from_fn([batch.rows, 1, 1, batch.cols], |i| {
        let (r, c) = (i / batch.cols, i % batch.cols);
        if c < batch.lengths[r] {
            0.0
        } else {
            MASK_LOGIT
        }
    })
}

/// Mean cross-entropy of `logits: [B, C]` against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lp, labels)?;
    let mean = tape.mean(picked, 0)?;
    tape.neg(mean)
}

/// Predicted class per row (first maximum wins).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank >= 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RoutingKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn config(aggs: &[Aggregator]) -> EncoderConfig {
        EncoderConfig {
            layers: aggs.len(),
            width: 8,
            heads: 2,
            ffn_width: 16,
            aggregators: aggs.to_vec(),
            routing: RoutingConfig::new(RoutingKind::Em, 2, 4, 2, 8).unwrap(),
            positional: Positional::Learned,
        }
    }

    const DIMS: ModelDims = ModelDims { vocab_size: 10, max_len: 6, classes: 3 };

    fn batch() -> Batch {
        let a = Example { tokens: vec![1, 2, 3], label: 0 };
        let b = Example { tokens: vec![4, 5, 6, 7, 8], label: 2 };
        Batch::from_examples(&[&a, &b]).unwrap()
    }

    #[test]
    fn mixed_aggregators_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(config(&[Aggregator::Em, Aggregator::Em, Aggregator::Linear]), DIMS, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = enc.params.bind(&mut tape, false);
        let logits = enc.logits(&mut tape, &b, &batch()).unwrap();
        assert_eq!(tape.shape(logits), &[2, 3]);
    }

    #[test]
    fn zeroed_blocks_pass_embeddings_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = Encoder::new(config(&[Aggregator::Linear]), DIMS, &mut rng).unwrap();
        for name in ["layer0.aggregate.w_o", "layer0.ffn_out.w", "layer0.ffn_out.b"] {
            let id = enc.params.id(name).unwrap();
            let shape = enc.params.get(id).shape().to_vec();
            enc.params.set(id, Tensor::zeros(shape)).unwrap();
        }
        let bt = batch();
        let mut tape = Tape::new();
        let b = enc.params.bind(&mut tape, false);
        let out = enc.encode(&mut tape, &b, &bt).unwrap();
        let emb = enc.params.get(enc.params.id("embed.tokens").unwrap());
        let pos = enc.params.get(enc.params.id("embed.positions").unwrap());
        let out = tape.value(out);
        for r in 0..2 {
            for c in 0..bt.cols {
                let tok = bt.tokens[r * bt.cols + c];
                for k in 0..8 {
                    let expected = emb.at(&[tok, k]) + pos.at(&[c, k]);
                    assert_eq!(out.at(&[r, c, k]), expected);
                }
            }
        }
    }

    #[test]
    fn out_of_range_ids_and_lengths_are_data_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(config(&[Aggregator::Simple]), DIMS, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = enc.params.bind(&mut tape, false);
        let bad = Example { tokens: vec![1, 99], label: 0 };
        let bt = Batch::from_examples(&[&bad]).unwrap();
        assert!(matches!(enc.logits(&mut tape, &b, &bt), Err(Error::Data(_))));
        let long = Example { tokens: vec![1; 7], label: 0 };
        let bt = Batch::from_examples(&[&long]).unwrap();
        assert!(matches!(enc.logits(&mut tape, &b, &bt), Err(Error::Data(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = config(&[Aggregator::Em]);
        c.layers = 2;
        assert!(c.validate().is_err());
        let mut c = config(&[Aggregator::Em]);
        c.routing.input_caps = 4;
        assert!(c.validate().is_err());
        let mut c = config(&[Aggregator::Linear]);
        c.layers = 0;
        c.aggregators.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn padding_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in Aggregator::ALL {
            let enc = Encoder::new(config(&[kind, kind]), DIMS, &mut rng).unwrap();
            let short = Example { tokens: vec![3, 1, 4], label: 0 };
            let long = Example { tokens: vec![1, 5, 9, 2, 6, 5], label: 1 };
            let alone = Batch::from_examples(&[&short]).unwrap();
            let padded = Batch::from_examples(&[&short, &long]).unwrap();
            let run = |bt: &Batch| {
                let mut tape = Tape::new();
                let b = enc.params.bind(&mut tape, false);
                let l = enc.logits(&mut tape, &b, bt).unwrap();
                tape.value(l).data()[..3].to_vec()
            };
            assert_eq!(run(&alone), run(&padded), "{kind}");
        }
    }
}
