//! Tiny trainable transformers: a bidirectional encoder and a KV-cached
//! causal decoder, both pre-norm with learned absolute positions.
//!
//! Decoder attention keys come from two places: entries the decoder produced
//! itself and entries injected from outside (see [`crate::bottleneck`]).
//! Injected entries carry no position; every generated position may attend
//! them, subject to the [`Placement`] schedule.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnBlock, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl LmConfig {
    /// Desk-scale defaults: 2 layers, width 64, 4 heads, 16 positions.
    pub fn toy(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 16,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config("n_layers and d_ff must be positive".into()));
        }
        for id in [self.pad_id, self.bos_id, self.eos_id] {
            if id as usize >= self.vocab_size {
                return Err(Error::Config(format!(
                    "special id {id} outside vocab {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Parameter count of one encoder or decoder stack with this config.
    pub fn num_parameters(&self, with_lm_head: bool) -> usize {
        let d = self.d_model;
        let block = 4 * (d * d + d) + 2 * 2 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        let head = if with_lm_head {
            d * self.vocab_size + self.vocab_size
        } else {
            0
        };
        self.vocab_size * d + self.max_len * d + self.n_layers * block + 2 * d + head
    }
}

/// Where injected cache entries sit relative to generated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// All injected entries precede generated ones in every layer.
    #[default]
    Prefix,
    /// One injected entry before every `every` generated entries, drawn
    /// round-robin from the injected pool; the first precedes position 0.
    Interleave { every: usize },
}

impl Placement {
    pub fn validate(&self) -> Result<()> {
        match self {
            Placement::Interleave { every: 0 } => {
                Err(Error::Config("interleave period must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Injected slots (indices into the pool, in cache order) visible to a
    /// generated position, for a pool of `n_entries`.
    fn slots_for(&self, n_entries: usize, n_positions: usize) -> Vec<usize> {
        if n_entries == 0 {
            return Vec::new();
        }
        match *self {
            Placement::Prefix => (0..n_entries).collect(),
            Placement::Interleave { every } => {
                let n_slots = n_positions.saturating_sub(1) / every + 1;
                (0..n_slots).map(|m| m % n_entries).collect()
            }
        }
    }

    /// Whether slot `m` (cache order) is visible to generated position `pos`.
    fn slot_visible(&self, m: usize, pos: usize) -> bool {
        match *self {
            Placement::Prefix => true,
            Placement::Interleave { every } => m * every <= pos,
        }
    }
}

// ── layers ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
        let b = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layernorm(x, g, b)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

/// Output of one block: new residual stream plus this layer's keys/values.
struct BlockOut {
    x: Var,
    k: Var,
    v: Var,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let out_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        Ok(Block {
            ln1: Norm::new(store, &format!("{name}.ln1"), d)?,
            wq: Linear::new(store, &format!("{name}.attn.q"), d, d, std, true, rng)?,
            wk: Linear::new(store, &format!("{name}.attn.k"), d, d, std, true, rng)?,
            wv: Linear::new(store, &format!("{name}.attn.v"), d, d, std, true, rng)?,
            wo: Linear::new(store, &format!("{name}.attn.o"), d, d, out_std, true, rng)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, &format!("{name}.mlp.fc"), d, cfg.d_ff, std, true, rng)?,
            ff2: Linear::new(
                store,
                &format!("{name}.mlp.proj"),
                cfg.d_ff,
                d,
                out_std / 2.0,
                true,
                rng,
            )?,
        })
    }

    /// `extra` key/value rows are appended after this layer's own rows;
    /// `blocks` index into that concatenation.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        heads: usize,
        blocks: Arc<Vec<AttnBlock>>,
        extra: Option<(Var, Var)>,
    ) -> Result<BlockOut> {
        let h = self.ln1.forward(tape, store, x)?;
        let q = self.wq.forward(tape, store, h)?;
        let k = self.wk.forward(tape, store, h)?;
        let v = self.wv.forward(tape, store, h)?;
        let (keys, values) = match extra {
            Some((ek, ev)) => (tape.concat_rows(&[k, ek])?, tape.concat_rows(&[v, ev])?),
            None => (k, v),
        };
        let a = tape.attention(q, keys, values, heads, blocks)?;
        let a = self.wo.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.forward(tape, store, h)?;
        let x = tape.add(x, h)?;
        Ok(BlockOut { x, k, v })
    }
}

/// Token + position embedding lookup for a batch of sequences laid end to end.
fn embed(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &LmConfig,
    tok: ParamId,
    pos: ParamId,
    seqs: &[&[u32]],
    first_position: usize,
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for s in seqs {
        if first_position + s.len() > cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                first_position + s.len(),
                cfg.max_len
            )));
        }
        for (i, &t) in s.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {t} outside vocab {}",
                    cfg.vocab_size
                )));
            }
            ids.push(t as usize);
            positions.push(first_position + i);
        }
    }
    let tok = tape.param(store, tok);
    let pos = tape.param(store, pos);
    let te = tape.gather_rows(tok, &ids)?;
    let pe = tape.gather_rows(pos, &positions)?;
    tape.add(te, pe)
}

fn offsets(seqs: &[&[u32]]) -> Vec<(usize, usize)> {
    let mut off = 0;
    seqs.iter()
        .map(|s| {
            let o = (off, s.len());
            off += s.len();
            o
        })
        .collect()
}

// ── encoder ───────────────────────────────────────────────────────────

/// Per-token states of one encoded sentence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden_states: Tensor,
    pub cls_state: Tensor,
    pub last_state: Tensor,
    pub attention_mask: Vec<bool>,
}

/// Batched encoder states as tape nodes.
pub struct EncodedBatch {
    pub hidden: Var,
    /// `(first row, length)` of every sequence in `hidden`.
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: LmConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.insert(format!("{name}.tok_emb"), Tensor::randn(&[cfg.vocab_size, d], 0.1, rng))?;
        let pos_emb = store.insert(format!("{name}.pos_emb"), Tensor::randn(&[cfg.max_len, d], 0.1, rng))?;
        let blocks = (0..cfg.n_layers)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let ln_f = Norm::new(store, &format!("{name}.ln_f"), d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Bidirectional forward over several sequences; masked positions are
    /// never attended.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[u32]],
        masks: &[&[bool]],
    ) -> Result<EncodedBatch> {
        if seqs.len() != masks.len() || seqs.iter().zip(masks).any(|(s, m)| s.len() != m.len()) {
            return Err(Error::shape("encode", "every sequence needs a mask of equal length"));
        }
        let spans = offsets(seqs);
        let blocks: Vec<AttnBlock> = spans
            .iter()
            .zip(masks)
            .map(|(&(off, len), mask)| {
                let keys = (0..len).filter(|&j| mask[j]).map(|j| off + j).collect();
                AttnBlock::full(off, len, keys)
            })
            .collect();
        let blocks = Arc::new(blocks);
        let mut x = embed(tape, store, &self.cfg, self.tok_emb, self.pos_emb, seqs, 0)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x, self.cfg.n_heads, blocks.clone(), None)?.x;
        }
        let hidden = self.ln_f.forward(tape, store, x)?;
        Ok(EncodedBatch { hidden, spans })
    }

    /// Inference-only encoding of one sentence.
    pub fn encode(&self, store: &ParamStore, tokens: &[u32], mask: &[bool]) -> Result<EncoderOutput> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, store, &[tokens], &[mask])?;
        let hidden_states = tape.value(out.hidden).clone();
        let d = self.cfg.d_model;
        let row = |i: usize| Tensor::vector(hidden_states.row_slice(i).to_vec());
        let cls_state = if tokens.is_empty() { Tensor::zeros(&[d]) } else { row(0) };
        let last_state = mask
            .iter()
            .rposition(|&m| m)
            .map_or_else(|| Tensor::zeros(&[d]), row);
        Ok(EncoderOutput {
            hidden_states,
            cls_state,
            last_state,
            attention_mask: mask.to_vec(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend([self.ln_f.gain, self.ln_f.bias]);
        ids
    }
}

impl Block {
    fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gain, self.ln1.bias, self.ln2.gain, self.ln2.bias];
        for l in [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.ff2] {
            ids.extend(l.params());
        }
        ids
    }
}

// ── KV cache ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Injected,
    Generated,
}

#[derive(Debug, Clone, Default)]
pub struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    tags: Vec<Provenance>,
    visible: Vec<bool>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[Provenance] {
        &self.tags
    }

    pub fn keys(&self, d_model: usize) -> Tensor {
        Tensor::new(vec![self.len(), d_model], self.keys.clone()).expect("cache rows")
    }

    pub fn values(&self, d_model: usize) -> Tensor {
        Tensor::new(vec![self.len(), d_model], self.values.clone()).expect("cache rows")
    }

    fn push(&mut self, key: &[f64], value: &[f64], tag: Provenance, visible: bool) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.tags.push(tag);
        self.visible.push(visible);
    }
}

/// Injected key/value entries for every layer, before placement.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedEntries {
    /// Per layer: `(keys [S, d], values [S, d])`.
    pub layers: Vec<(Tensor, Tensor)>,
    pub placement: Placement,
}

impl InjectedEntries {
    pub fn n_entries(&self) -> usize {
        self.layers.first().map_or(0, |(k, _)| k.rows())
    }

    /// Flat `[L·S·2, d]` rows in `[layer, entry, key|value]` order.
    pub fn to_rows(&self) -> Result<Tensor> {
        let d = self.layers.first().map_or(0, |(k, _)| k.cols());
        let mut data = Vec::new();
        for (k, v) in &self.layers {
            for s in 0..k.rows() {
                data.extend_from_slice(k.row_slice(s));
                data.extend_from_slice(v.row_slice(s));
            }
        }
        let n = data.len() / d.max(1);
        Tensor::new(vec![n, d], data)
    }
}

#[derive(Debug, Clone)]
struct PendingPool {
    entries: InjectedEntries,
    every: usize,
}

/// Per-layer key/value store of a decoding session.
#[derive(Debug, Clone)]
pub struct KvCache {
    d_model: usize,
    layers: Vec<LayerCache>,
    pending: Option<PendingPool>,
    generated: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache {
            d_model,
            layers: vec![LayerCache::default(); n_layers],
            pending: None,
            generated: 0,
        }
    }

    /// Cache pre-populated according to the entries' placement policy.
    pub fn with_injection(d_model: usize, entries: &InjectedEntries) -> Self {
        let mut cache = KvCache::new(entries.layers.len(), d_model);
        if entries.n_entries() == 0 {
            return cache;
        }
        match entries.placement {
            Placement::Prefix => {
                for (layer, (k, v)) in cache.layers.iter_mut().zip(&entries.layers) {
                    for s in 0..k.rows() {
                        layer.push(k.row_slice(s), v.row_slice(s), Provenance::Injected, true);
                    }
                }
            }
            Placement::Interleave { every } => {
                cache.pending = Some(PendingPool {
                    entries: entries.clone(),
                    every,
                });
                cache.place_slot(0);
            }
        }
        cache
    }

    fn place_slot(&mut self, slot: usize) {
        if let Some(pool) = &self.pending {
            let s = slot % pool.entries.n_entries();
            for (layer, (k, v)) in self.layers.iter_mut().zip(&pool.entries.layers) {
                layer.push(k.row_slice(s), v.row_slice(s), Provenance::Injected, true);
            }
        }
    }

    /// Interleaved injection: place the next slot before `pos` if due.
    fn before_position(&mut self, pos: usize) {
        let due = match &self.pending {
            Some(pool) if pos > 0 && pos.is_multiple_of(pool.every) => Some(pos / pool.every),
            _ => None,
        };
        if let Some(slot) = due {
            self.place_slot(slot);
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    /// Number of generated positions so far.
    pub fn generated_len(&self) -> usize {
        self.generated
    }

    pub fn injected_len(&self, layer: usize) -> usize {
        self.layers[layer]
            .tags
            .iter()
            .filter(|&&t| t == Provenance::Injected)
            .count()
    }

    /// Append an injected entry to every layer that no query may attend
    /// (its attention logit is treated as −∞).
    pub fn push_hidden_injected(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<()> {
        if keys.len() != self.layers.len() || values.len() != self.layers.len() {
            return Err(Error::shape("push_hidden_injected", "one key/value per layer"));
        }
        for ((layer, k), v) in self.layers.iter_mut().zip(keys).zip(values) {
            if k.len() != self.d_model || v.len() != self.d_model {
                return Err(Error::shape("push_hidden_injected", "entry width must be d_model"));
            }
            layer.push(k, v, Provenance::Injected, false);
        }
        Ok(())
    }
}

/// Per-layer attention bookkeeping of one decode step.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Attention mass on injected entries, per head.
    pub injected_mass: Vec<f64>,
    /// `Σ p_j v_j` over injected entries only (pre output projection).
    pub injected_contribution: Vec<f64>,
}

// ── decoder ───────────────────────────────────────────────────────────

/// Injected rows on the tape for a training batch.
pub struct DecoderInjection {
    /// `[B·L·S·2, d]` rows, `[sequence, layer, entry, key|value]` order.
    pub rows: Var,
    pub n_entries: usize,
    pub placement: Placement,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: LmConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    lm_head: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &LmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.insert(format!("{name}.tok_emb"), Tensor::randn(&[cfg.vocab_size, d], 0.1, rng))?;
        let pos_emb = store.insert(format!("{name}.pos_emb"), Tensor::randn(&[cfg.max_len, d], 0.1, rng))?;
        let blocks = (0..cfg.n_layers)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), cfg, rng))
            .collect::<Result<_>>()?;
        let ln_f = Norm::new(store, &format!("{name}.ln_f"), d)?;
        let lm_head = Linear::new(
            store,
            &format!("{name}.lm_head"),
            d,
            cfg.vocab_size,
            1.0 / (d as f64).sqrt(),
            true,
            rng,
        )?;
        Ok(Decoder {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            lm_head,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            ids.extend(b.params());
        }
        ids.extend([self.ln_f.gain, self.ln_f.bias]);
        ids.extend(self.lm_head.params());
        ids
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.n_layers, self.cfg.d_model)
    }

    /// Teacher-forced causal forward over several sequences laid end to end,
    /// optionally attending injected entries. Returns logits `[Σt, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[u32]],
        injection: Option<&DecoderInjection>,
    ) -> Result<Var> {
        let spans = offsets(seqs);
        let n_rows: usize = seqs.iter().map(|s| s.len()).sum();
        let l_total = self.cfg.n_layers;
        let (n_entries, placement) = injection.map_or((0, Placement::Prefix), |i| (i.n_entries, i.placement));
        if let Some(inj) = injection {
            let expected = seqs.len() * l_total * n_entries * 2;
            let shape = tape.shape(inj.rows).to_vec();
            if n_entries > 0 && shape != [expected, self.cfg.d_model] {
                return Err(Error::shape(
                    "decoder",
                    format!("injected rows {shape:?}, expected [{expected}, {}]", self.cfg.d_model),
                ));
            }
        }

        // Key list per sequence: injected slots first, then generated rows.
        let blocks: Vec<AttnBlock> = spans
            .iter()
            .enumerate()
            .map(|(b, &(off, len))| {
                let slots = placement.slots_for(n_entries, len);
                let mut keys: Vec<usize> = slots.iter().map(|&s| n_rows + b * n_entries + s).collect();
                keys.extend(off..off + len);
                let nk = keys.len();
                let mut mask = vec![false; len * nk];
                for qi in 0..len {
                    for m in 0..slots.len() {
                        mask[qi * nk + m] = placement.slot_visible(m, qi);
                    }
                    for j in 0..=qi {
                        mask[qi * nk + slots.len() + j] = true;
                    }
                }
                AttnBlock {
                    q_start: off,
                    q_len: len,
                    keys,
                    mask: Some(mask),
                }
            })
            .collect();
        let blocks = Arc::new(blocks);

        let mut x = embed(tape, store, &self.cfg, self.tok_emb, self.pos_emb, seqs, 0)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let extra = match injection {
                Some(inj) if n_entries > 0 => {
                    let row = |b: usize, s: usize, kv: usize| ((b * l_total + l) * n_entries + s) * 2 + kv;
                    let kidx: Vec<usize> = (0..seqs.len())
                        .flat_map(|b| (0..n_entries).map(move |s| row(b, s, 0)))
                        .collect();
                    let vidx: Vec<usize> = kidx.iter().map(|&i| i + 1).collect();
                    let ek = tape.gather_rows(inj.rows, &kidx)?;
                    let ev = tape.gather_rows(inj.rows, &vidx)?;
                    Some((ek, ev))
                }
                _ => None,
            };
            x = block.forward(tape, store, x, self.cfg.n_heads, blocks.clone(), extra)?.x;
        }
        let h = self.ln_f.forward(tape, store, x)?;
        self.lm_head.forward(tape, store, h)
    }

    /// Inference causal forward of one sequence, optionally with injected
    /// entries. Returns logits `[t, vocab]`.
    pub fn full_forward(
        &self,
        store: &ParamStore,
        tokens: &[u32],
        injected: Option<&InjectedEntries>,
    ) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let injection = match injected {
            Some(e) if e.n_entries() > 0 => {
                self.check_entries(e)?;
                Some(DecoderInjection {
                    rows: tape.constant(e.to_rows()?)?,
                    n_entries: e.n_entries(),
                    placement: e.placement,
                })
            }
            _ => None,
        };
        let logits = self.forward(&mut tape, store, &[tokens], injection.as_ref())?;
        Ok(tape.value(logits).clone())
    }

    fn check_entries(&self, e: &InjectedEntries) -> Result<()> {
        e.placement.validate()?;
        if e.layers.len() != self.cfg.n_layers {
            return Err(Error::Config(format!(
                "injection has {} layers, decoder has {}",
                e.layers.len(),
                self.cfg.n_layers
            )));
        }
        let s = e.n_entries();
        for (k, v) in &e.layers {
            if k.shape() != [s, self.cfg.d_model] || v.shape() != [s, self.cfg.d_model] {
                return Err(Error::shape("injection", "entries must be [S, d_model] per layer"));
            }
        }
        Ok(())
    }

    /// Feed one token, append its key/value to every layer of `cache`, and
    /// return next-token logits `[vocab]`.
    pub fn decode_step(&self, store: &ParamStore, token: u32, cache: &mut KvCache) -> Result<Tensor> {
        self.decode_step_traced(store, token, cache).map(|(logits, _)| logits)
    }

    pub fn decode_step_traced(
        &self,
        store: &ParamStore,
        token: u32,
        cache: &mut KvCache,
    ) -> Result<(Tensor, Vec<StepTrace>)> {
        if cache.n_layers() != self.cfg.n_layers || cache.d_model != self.cfg.d_model {
            return Err(Error::Config(format!(
                "cache has {} layers of width {}, decoder expects {} of width {}",
                cache.n_layers(),
                cache.d_model,
                self.cfg.n_layers,
                self.cfg.d_model
            )));
        }
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "token id {token} outside vocab {}",
                self.cfg.vocab_size
            )));
        }
        let pos = cache.generated_len();
        if pos >= self.cfg.max_len {
            return Err(Error::Invalid(format!("cache already holds max_len {pos} positions")));
        }
        cache.before_position(pos);
        let d = self.cfg.d_model;
        let mut tape = Tape::no_grad();
        let mut x = embed(&mut tape, store, &self.cfg, self.tok_emb, self.pos_emb, &[&[token]], pos)?;
        let mut traces = Vec::with_capacity(self.cfg.n_layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let layer = &cache.layers[l];
            let n = layer.len();
            let mut keys: Vec<usize> = (1..=n).collect();
            keys.push(0);
            let mut mask = layer.visible.clone();
            mask.push(true);
            let blocks = Arc::new(vec![AttnBlock {
                q_start: 0,
                q_len: 1,
                keys,
                mask: Some(mask),
            }]);
            let extra = if n > 0 {
                let ek = tape.constant(layer.keys(d))?;
                let ev = tape.constant(layer.values(d))?;
                Some((ek, ev))
            } else {
                None
            };
            let out = block.forward(&mut tape, store, x, self.cfg.n_heads, blocks, extra)?;
            traces.push(self.trace(&tape, block, store, x, layer)?);
            let k = tape.value(out.k).data().to_vec();
            let v = tape.value(out.v).data().to_vec();
            cache.layers[l].push(&k, &v, Provenance::Generated, true);
            x = out.x;
        }
        cache.generated += 1;
        let h = self.ln_f.forward(&mut tape, store, x)?;
        let logits = self.lm_head.forward(&mut tape, store, h)?;
        let logits = tape.value(logits).reshape(&[self.cfg.vocab_size])?;
        Ok((logits, traces))
    }

    /// Recompute the attention split for the trace (values only, no tape).
    fn trace(
        &self,
        tape: &Tape,
        block: &Block,
        store: &ParamStore,
        x: Var,
        layer: &LayerCache,
    ) -> Result<StepTrace> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let mut t = Tape::no_grad();
        let xv = t.constant(tape.value(x).clone())?;
        let h = block.ln1.forward(&mut t, store, xv)?;
        let q = block.wq.forward(&mut t, store, h)?;
        let k = block.wk.forward(&mut t, store, h)?;
        let q = t.value(q).data().to_vec();
        let kself = t.value(k).data().to_vec();
        let mut mass = vec![0.0; heads];
        let mut contribution = vec![0.0; d];
        for hd in 0..heads {
            let c = hd * dh..(hd + 1) * dh;
            let dot = |key: &[f64]| {
                q[c.clone()].iter().zip(&key[c.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
            };
            let mut scores: Vec<(f64, Option<usize>)> = (0..layer.len())
                .filter(|&j| layer.visible[j])
                .map(|j| (dot(&layer.keys[j * d..(j + 1) * d]), Some(j)))
                .collect();
            scores.push((dot(&kself), None));
            let max = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.0 - max).exp()).sum();
            for (s, j) in scores {
                let Some(j) = j else { continue };
                if layer.tags[j] != Provenance::Injected {
                    continue;
                }
                let p = (s - max).exp() / z;
                mass[hd] += p;
                for cc in c.clone() {
                    contribution[cc] += p * layer.values[j * d + cc];
                }
            }
        }
        Ok(StepTrace {
            injected_mass: mass,
            injected_contribution: contribution,
        })
    }

    /// Greedy (or temperature-sampled) continuation from BOS until EOS or
    /// `max_tokens`. The returned ids exclude BOS and EOS.
    pub fn generate<R: Rng>(
        &self,
        store: &ParamStore,
        mut cache: KvCache,
        max_tokens: usize,
        sampling: Sampling,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut token = self.cfg.bos_id;
        let limit = max_tokens.min(self.cfg.max_len);
        while out.len() < limit {
            let logits = self.decode_step(store, token, &mut cache)?;
            let next = sampling.pick(&logits, rng) as u32;
            if next == self.cfg.eos_id {
                break;
            }
            out.push(next);
            token = next;
        }
        Ok(out)
    }
}

/// Next-token selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Sampling {
    #[default]
    Greedy,
    Temperature(f64),
}

impl Sampling {
    pub fn pick<R: Rng>(&self, logits: &Tensor, rng: &mut R) -> usize {
        match *self {
            Sampling::Greedy => logits.argmax(),
            Sampling::Temperature(t) => {
                let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.data().iter().map(|x| ((x - max) / t).exp()).collect();
                let total: f64 = w.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (i, wi) in w.iter().enumerate() {
                    u -= wi;
                    if u <= 0.0 {
                        return i;
                    }
                }
                w.len() - 1
            }
        }
    }
}

#[cfg(test)]
mod tests;
