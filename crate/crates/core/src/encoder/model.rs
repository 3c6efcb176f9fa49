use super::attention::{AttentionCache, SelfAttention};
use super::block::{MemoryBlock, MemoryBlockCache};
use super::config::{special, EncoderConfig, Phase};
use super::dropout::Dropout;
use super::heads::{ClassifierCache, ClassifierHead, MlmHead, MlmHeadCache};
use super::mlm::MlmBatch;
use crate::error::{Error, Result};
use crate::numerics::{check_finite, softmax_cross_entropy, LayerNorm, LayerNormCache, Rng, Scalar, Tensor};
use crate::params::{join, Gradients, ParamKind, Parameters};
use crate::pkm::MemoryAccess;

/// Row-major `[batch × seq]` token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq {
            return Err(Error::shape("token batch", &[batch, seq], &[tokens.len()]));
        }
        Ok(Self { tokens, batch, seq })
    }

    /// Pads rows to the longest one with `PAD`.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            tokens.extend_from_slice(r);
            tokens.extend(std::iter::repeat_n(special::PAD, seq - r.len()));
        }
        Self {
            tokens,
            batch: rows.len(),
            seq,
        }
    }

    pub fn positions(&self) -> usize {
        self.batch * self.seq
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq..(b + 1) * self.seq]
    }

    /// `true` at padding positions.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t == special::PAD).collect()
    }
}

/// Memory access of one memory layer (1-based index) during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerAccess {
    pub layer: usize,
    pub access: MemoryAccess,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub attention: SelfAttention<T>,
    pub attention_norm: LayerNorm<T>,
    pub block: MemoryBlock<T>,
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    attention: AttentionCache<T>,
    dropout: Dropout<T>,
    norm: LayerNormCache<T>,
    block: MemoryBlockCache<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    tokens: Vec<u32>,
    seq: usize,
    emb_norm: LayerNormCache<T>,
    emb_dropout: Dropout<T>,
    layers: Vec<LayerCache<T>>,
}

pub struct EncoderOutput<T> {
    /// `[B·T × d_model]`
    pub hidden: Vec<T>,
    pub accesses: Vec<LayerAccess>,
    pub cache: EncoderCache<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub emb_norm: LayerNorm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_head: MlmHead<T>,
    pub cls_head: Option<ClassifierHead<T>>,
}

/// Loss, gradients and the forward state needed to refresh batch-norm statistics.
pub struct StepOutput<T> {
    pub loss: f64,
    pub accesses: Vec<LayerAccess>,
    pub grads: Gradients<T>,
    pub cache: EncoderCache<T>,
    /// Predicted class per sequence (classification steps only).
    pub predictions: Vec<usize>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, std) = (config.d_model, config.init_std);
        let tok_emb = Tensor::randn(&[config.vocab_size, d], std, rng);
        let pos_emb = Tensor::randn(&[config.max_len, d], std, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 1..=config.layers {
            layers.push(EncoderLayer {
                attention: SelfAttention::new(d, config.attn_heads, std, rng),
                attention_norm: LayerNorm::new(d),
                block: MemoryBlock::new(d, config.ffn_dim, config.block_at(l), &config.memory, std, rng)?,
            });
        }
        let mlm_head = MlmHead::new(d, config.vocab_size, std, rng);
        let cls_head = config.n_classes.map(|n| ClassifierHead::new(d, n, std, rng));
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            emb_norm: LayerNorm::new(d),
            layers,
            mlm_head,
            cls_head,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Attaches a freshly initialized classification head.
    pub fn attach_classifier(&mut self, classes: usize, rng: &mut Rng) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
        }
        self.config.n_classes = Some(classes);
        self.cls_head = Some(ClassifierHead::new(self.d_model(), classes, self.config.init_std, rng));
        Ok(())
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.tokens.len() != batch.batch * batch.seq {
            return Err(Error::shape("token batch", &[batch.batch, batch.seq], &[batch.tokens.len()]));
        }
        if batch.seq > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = batch.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states of every position plus one access record per memory layer.
    pub fn forward(&self, batch: &TokenBatch, phase: Phase, mut rng: Option<&mut Rng>) -> Result<EncoderOutput<T>> {
        self.check_batch(batch)?;
        let d = self.d_model();
        let n = batch.positions();
        let p = if phase.dropout() { self.config.dropout } else { 0.0 };
        let mut emb = vec![T::zero(); n * d];
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let t = i % batch.seq;
            let row = &mut emb[i * d..(i + 1) * d];
            for ((e, &a), &b) in row.iter_mut().zip(self.tok_emb.row(tok as usize)).zip(self.pos_emb.row(t)) {
                *e = a + b;
            }
        }
        let (mut h, emb_norm) = self.emb_norm.forward(&emb);
        let emb_dropout = Dropout::sample(h.len(), p, rng.as_deref_mut());
        emb_dropout.apply(&mut h);

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut accesses = Vec::new();
        if n == 0 {
            return Ok(EncoderOutput {
                hidden: h,
                accesses,
                cache: EncoderCache {
                    tokens: Vec::new(),
                    seq: batch.seq,
                    emb_norm,
                    emb_dropout,
                    layers,
                },
            });
        }
        let key_mask = batch.padding_mask();
        for (l, layer) in self.layers.iter().enumerate() {
            let (mut a, attention) = layer.attention.forward(&h, batch.batch, batch.seq, &key_mask);
            let dropout = Dropout::sample(a.len(), p, rng.as_deref_mut());
            dropout.apply(&mut a);
            for (av, &hv) in a.iter_mut().zip(&h) {
                *av = hv + *av;
            }
            let (h1, norm) = layer.attention_norm.forward(&a);
            let out = layer.block.forward(&h1, phase.norm_mode(), p, rng.as_deref_mut())?;
            if let Some(access) = out.access {
                accesses.push(LayerAccess { layer: l + 1, access });
            }
            h = out.output;
            layers.push(LayerCache {
                attention,
                dropout,
                norm,
                block: out.cache,
            });
        }
        check_finite(&h, "encoder hidden states")?;
        Ok(EncoderOutput {
            hidden: h,
            accesses,
            cache: EncoderCache {
                tokens: batch.tokens.clone(),
                seq: batch.seq,
                emb_norm,
                emb_dropout,
                layers,
            },
        })
    }

    /// Back-propagates `d_hidden` through the trunk, adding named gradients to `grads`.
    pub fn backward(&self, cache: &EncoderCache<T>, d_hidden: &[T], grads: &mut Gradients<T>) -> Result<()> {
        let d = self.d_model();
        if d_hidden.len() != cache.tokens.len() * d {
            return Err(Error::shape("encoder backward", &[cache.tokens.len(), d], &[d_hidden.len()]));
        }
        let mut dh = d_hidden.to_vec();
        for (l, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let prefix = format!("layers.{l}");
            let dh1 = layer.block.backward(&c.block, &dh, &join(&prefix, "block"), grads)?;
            let (ds, dg, db) = layer.attention_norm.backward(&c.norm, &dh1);
            grads.insert(&prefix, "attention_norm.gain", dg);
            grads.insert(&prefix, "attention_norm.bias", db);
            let mut da = ds.clone();
            c.dropout.apply(&mut da);
            let dx = layer.attention.backward(&c.attention, &da, &join(&prefix, "attention"), grads);
            dh = ds;
            for (a, b) in dh.iter_mut().zip(dx) {
                *a += b;
            }
        }
        cache.emb_dropout.apply(&mut dh);
        let (demb, dg, db) = self.emb_norm.backward(&cache.emb_norm, &dh);
        grads.insert("", "emb_norm.gain", dg);
        grads.insert("", "emb_norm.bias", db);
        let mut dtok = Tensor::zeros(self.tok_emb.shape());
        let mut dpos = Tensor::zeros(self.pos_emb.shape());
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let g = &demb[i * d..(i + 1) * d];
            for (a, &b) in dtok.row_mut(tok as usize).iter_mut().zip(g) {
                *a += b;
            }
            for (a, &b) in dpos.row_mut(i % cache.seq).iter_mut().zip(g) {
                *a += b;
            }
        }
        grads.insert("", "tok_emb", dtok);
        grads.insert("", "pos_emb", dpos);
        Ok(())
    }

    /// Folds the batch statistics of a `Phase::Train` pass into the running averages.
    pub fn update_norm_stats(&mut self, cache: &EncoderCache<T>) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(m), Some(mc)) = (&mut layer.block.memory, &c.block.memory) {
                m.update_running_stats(mc);
            }
        }
    }

    fn gather_rows(&self, hidden: &[T], positions: &[usize]) -> Vec<T> {
        let d = self.d_model();
        let mut out = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            out.extend_from_slice(&hidden[p * d..(p + 1) * d]);
        }
        out
    }

    /// Vocabulary logits `[P × V]` at the given flat positions.
    pub fn mlm_logits(&self, hidden: &[T], positions: &[usize]) -> (Vec<T>, MlmHeadCache<T>) {
        self.mlm_head.forward(&self.gather_rows(hidden, positions))
    }

    fn mlm_targets(&self, batch: &MlmBatch) -> Result<()> {
        if batch.positions.is_empty() {
            return Err(Error::EmptyTargets);
        }
        if let Some(&t) = batch.targets.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TargetOutOfRange {
                target: t,
                classes: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Mean cross-entropy over the masked positions; perplexity is `exp` of it.
    pub fn mlm_loss(&self, batch: &MlmBatch, phase: Phase, rng: Option<&mut Rng>) -> Result<(f64, Vec<LayerAccess>)> {
        self.mlm_targets(batch)?;
        let out = self.forward(&batch.input, phase, rng)?;
        let (logits, _) = self.mlm_logits(&out.hidden, &batch.positions);
        let logits = Tensor::new(vec![batch.positions.len(), self.config.vocab_size], logits)?;
        let active = vec![true; batch.targets.len()];
        let (loss, _) = softmax_cross_entropy(&logits, &batch.targets, &active)?;
        Ok((loss, out.accesses))
    }

    pub fn mlm_step(&self, batch: &MlmBatch, phase: Phase, rng: Option<&mut Rng>) -> Result<StepOutput<T>> {
        self.mlm_targets(batch)?;
        let out = self.forward(&batch.input, phase, rng)?;
        let (logits, head_cache) = self.mlm_logits(&out.hidden, &batch.positions);
        let logits = Tensor::new(vec![batch.positions.len(), self.config.vocab_size], logits)?;
        let active = vec![true; batch.targets.len()];
        let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.targets, &active)?;
        let mut grads = Gradients::default();
        let drows = self.mlm_head.backward(&head_cache, dlogits.data(), "mlm_head", &mut grads);
        let d = self.d_model();
        let mut dh = vec![T::zero(); out.hidden.len()];
        for (r, &p) in batch.positions.iter().enumerate() {
            for (a, &b) in dh[p * d..(p + 1) * d].iter_mut().zip(&drows[r * d..(r + 1) * d]) {
                *a += b;
            }
        }
        self.backward(&out.cache, &dh, &mut grads)?;
        Ok(StepOutput {
            loss,
            accesses: out.accesses,
            grads,
            cache: out.cache,
            predictions: Vec::new(),
        })
    }

    fn head(&self) -> Result<&ClassifierHead<T>> {
        self.cls_head.as_ref().ok_or(Error::MissingHead)
    }

    fn first_positions(&self, batch: &TokenBatch) -> Vec<usize> {
        (0..batch.batch).map(|b| b * batch.seq).collect()
    }

    /// Class logits `[B × n_classes]` from the pooled first position.
    pub fn classify_forward(&self, batch: &TokenBatch, phase: Phase, rng: Option<&mut Rng>) -> Result<(Vec<T>, Vec<LayerAccess>)> {
        let head = self.head()?;
        let out = self.forward(batch, phase, rng)?;
        let (logits, _) = head.forward(&self.gather_rows(&out.hidden, &self.first_positions(batch)));
        Ok((logits, out.accesses))
    }

    fn classify_loss_inner(
        &self,
        batch: &TokenBatch,
        labels: &[usize],
        phase: Phase,
        rng: Option<&mut Rng>,
    ) -> Result<(f64, Tensor<T>, Vec<usize>, EncoderOutput<T>, ClassifierCache<T>)> {
        let head = self.head()?;
        if labels.len() != batch.batch {
            return Err(Error::shape("class labels", &[batch.batch], &[labels.len()]));
        }
        let out = self.forward(batch, phase, rng)?;
        let (logits, cache) = head.forward(&self.gather_rows(&out.hidden, &self.first_positions(batch)));
        let classes = head.classes();
        let logits = Tensor::new(vec![batch.batch, classes], logits)?;
        let predictions = (0..batch.batch).map(|b| argmax(logits.row(b))).collect();
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels, &vec![true; labels.len()])?;
        Ok((loss, dlogits, predictions, out, cache))
    }

    pub fn classify_loss(&self, batch: &TokenBatch, labels: &[usize], phase: Phase, rng: Option<&mut Rng>) -> Result<f64> {
        Ok(self.classify_loss_inner(batch, labels, phase, rng)?.0)
    }

    pub fn classify_step(&self, batch: &TokenBatch, labels: &[usize], phase: Phase, rng: Option<&mut Rng>) -> Result<StepOutput<T>> {
        let (loss, dlogits, predictions, out, head_cache) = self.classify_loss_inner(batch, labels, phase, rng)?;
        let mut grads = Gradients::default();
        let dfirst = self.head()?.backward(&head_cache, dlogits.data(), "cls_head", &mut grads);
        let d = self.d_model();
        let mut dh = vec![T::zero(); out.hidden.len()];
        for (b, p) in self.first_positions(batch).into_iter().enumerate() {
            dh[p * d..(p + 1) * d].copy_from_slice(&dfirst[b * d..(b + 1) * d]);
        }
        self.backward(&out.cache, &dh, &mut grads)?;
        Ok(StepOutput {
            loss,
            accesses: out.accesses,
            grads,
            cache: out.cache,
            predictions,
        })
    }
}

/// Index of the largest value, lower index on ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&join(prefix, "tok_emb"), ParamKind::Dense, &self.tok_emb);
        f(&join(prefix, "pos_emb"), ParamKind::Dense, &self.pos_emb);
        f(&join(prefix, "emb_norm.gain"), ParamKind::Dense, &self.emb_norm.gain);
        f(&join(prefix, "emb_norm.bias"), ParamKind::Dense, &self.emb_norm.bias);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{l}"));
            layer.attention.visit(&join(&p, "attention"), f);
            f(&join(&p, "attention_norm.gain"), ParamKind::Dense, &layer.attention_norm.gain);
            f(&join(&p, "attention_norm.bias"), ParamKind::Dense, &layer.attention_norm.bias);
            layer.block.visit(&join(&p, "block"), f);
        }
        self.mlm_head.visit(&join(prefix, "mlm_head"), f);
        if let Some(h) = &self.cls_head {
            h.visit(&join(prefix, "cls_head"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "tok_emb"), ParamKind::Dense, &mut self.tok_emb);
        f(&join(prefix, "pos_emb"), ParamKind::Dense, &mut self.pos_emb);
        f(&join(prefix, "emb_norm.gain"), ParamKind::Dense, &mut self.emb_norm.gain);
        f(&join(prefix, "emb_norm.bias"), ParamKind::Dense, &mut self.emb_norm.bias);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{l}"));
            layer.attention.visit_mut(&join(&p, "attention"), f);
            f(&join(&p, "attention_norm.gain"), ParamKind::Dense, &mut layer.attention_norm.gain);
            f(&join(&p, "attention_norm.bias"), ParamKind::Dense, &mut layer.attention_norm.bias);
            layer.block.visit_mut(&join(&p, "block"), f);
        }
        self.mlm_head.visit_mut(&join(prefix, "mlm_head"), f);
        if let Some(h) = &mut self.cls_head {
            h.visit_mut(&join(prefix, "cls_head"), f);
        }
    }
}
