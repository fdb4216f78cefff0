//! Assembly of encoder, bottleneck and decoder into one LM-VAE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::bottleneck::{
    kl_on_tape, pool_on_tape, reparameterize, reparameterize_on_tape, CacheInjector, InjectorConfig, LatentCode,
    PoolingMode, Projection,
};
use crate::corpus::{FactorSentence, Role, Tokenizer};
use crate::error::{Error, Result};
use crate::minilm::{Decoder, Encoder, InjectedEntries, KvCache, LmConfig, Placement, Sampling};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: LmConfig,
    pub decoder: LmConfig,
    pub latent_dim: usize,
    /// Injected cache entries per decoder layer.
    pub n_injected: usize,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub pooling: PoolingMode,
    /// Feed pooled role annotations to the projection.
    #[serde(default)]
    pub annotations: bool,
}

impl ModelConfig {
    /// Toy encoder and decoder, latent size 16, four injected entries.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            encoder: LmConfig::toy(vocab_size),
            decoder: LmConfig::toy(vocab_size),
            latent_dim: 16,
            n_injected: 4,
            placement: Placement::Prefix,
            pooling: PoolingMode::Mean,
            annotations: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.placement.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let (e, d) = (&self.encoder, &self.decoder);
        if e.vocab_size != d.vocab_size || (e.pad_id, e.bos_id, e.eos_id) != (d.pad_id, d.bos_id, d.eos_id) {
            return Err(Error::Config("encoder and decoder must share a vocabulary".into()));
        }
        Ok(())
    }

    pub fn injector(&self) -> InjectorConfig {
        InjectorConfig {
            latent_dim: self.latent_dim,
            n_injected: self.n_injected,
            n_layers: self.decoder.n_layers,
            d_model: self.decoder.d_model,
        }
    }

    pub fn projection_in_dim(&self) -> usize {
        self.encoder.d_model + if self.annotations { Role::COUNT } else { 0 }
    }
}

/// Total and trainable parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

impl ParamCount {
    fn new(total: usize, trainable: usize) -> Self {
        ParamCount {
            total,
            trainable,
            ratio: trainable as f64 / total as f64,
        }
    }
}

/// Closed-form parameter accounting for a configuration, without building it.
pub fn count_parameters_for(cfg: &ModelConfig, freeze_base: bool) -> ParamCount {
    let bottleneck = Projection::num_parameters(cfg.projection_in_dim(), cfg.latent_dim) + cfg.injector().num_parameters();
    let total = cfg.encoder.num_parameters(false) + cfg.decoder.num_parameters(true) + bottleneck;
    ParamCount::new(total, if freeze_base { bottleneck } else { total })
}

/// A sentence ready for the model: token ids with BOS/EOS and one
/// role row per token (all-zero where unannotated).
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub tokens: Vec<u32>,
    pub roles: Tensor,
}

impl Prepared {
    pub fn new(tokenizer: &Tokenizer, text: &str, roles: Option<&[Role]>) -> Result<Self> {
        let tokens = tokenizer.encode(text);
        let mut rows = Tensor::zeros(&[tokens.len(), Role::COUNT]);
        if let Some(roles) = roles {
            if roles.len() + 2 != tokens.len() {
                return Err(Error::Invalid(format!(
                    "{} roles for {} words",
                    roles.len(),
                    tokens.len() - 2
                )));
            }
            for (i, r) in roles.iter().enumerate() {
                rows.data_mut()[(i + 1) * Role::COUNT + r.index()] = 1.0;
            }
        }
        Ok(Prepared { tokens, roles: rows })
    }

    pub fn from_sentence(tokenizer: &Tokenizer, s: &FactorSentence) -> Result<Self> {
        Prepared::new(tokenizer, &s.text, Some(&s.roles))
    }

    fn mask(&self) -> Vec<bool> {
        vec![true; self.tokens.len()]
    }

    fn pooled_roles(&self) -> Vec<f64> {
        crate::bottleneck::pool_annotations(&self.roles, &self.mask())
            .map(Tensor::into_data)
            .unwrap_or_else(|_| vec![0.0; Role::COUNT])
    }
}

/// Tape nodes of one batch forward pass.
pub struct BatchForward {
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    pub recon: Var,
    /// `[1, D]` batch-mean KL per dimension.
    pub kl_per_dim: Var,
}

/// The assembled model and its parameters.
#[derive(Debug, Clone)]
pub struct LmVae {
    cfg: ModelConfig,
    tokenizer: Tokenizer,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    projection: Projection,
    injector: CacheInjector,
}

impl LmVae {
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tokenizer.vocab_size() != cfg.encoder.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} ids, model vocab is {}",
                tokenizer.vocab_size(),
                cfg.encoder.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "encoder", &cfg.encoder, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", &cfg.decoder, &mut rng)?;
        let projection = Projection::new(&mut store, "projection", cfg.projection_in_dim(), cfg.latent_dim, &mut rng)?;
        let injector = CacheInjector::new(&mut store, "injector", cfg.injector(), cfg.placement, &mut rng)?;
        Ok(LmVae {
            cfg,
            tokenizer,
            store,
            encoder,
            decoder,
            projection,
            injector,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn injector(&self) -> &CacheInjector {
        &self.injector
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.params();
        ids.extend(self.decoder.params());
        ids
    }

    pub fn bottleneck_params(&self) -> Vec<ParamId> {
        let mut ids = self.projection.params();
        ids.push(self.injector.w_m());
        ids
    }

    /// Freeze or unfreeze every encoder and decoder weight.
    pub fn set_freeze_base(&mut self, freeze: bool) {
        for id in self.base_params() {
            self.store.set_requires_grad(id, !freeze);
        }
        for id in self.bottleneck_params() {
            self.store.set_requires_grad(id, true);
        }
    }

    pub fn base_frozen(&self) -> bool {
        self.base_params().iter().all(|&id| !self.store.requires_grad(id))
    }

    /// Names of parameters that currently receive gradients.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(_, p)| p.name().to_string())
            .collect()
    }

    /// SHA-256 over the names and raw bytes of every encoder and decoder weight.
    pub fn base_weight_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.base_params() {
            let p = self.store.param(id);
            h.update(p.name().as_bytes());
            h.update(p.value().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn count_parameters(&self) -> ParamCount {
        ParamCount::new(self.store.num_elements(), self.store.num_trainable())
    }

    pub fn prepare(&self, s: &FactorSentence) -> Result<Prepared> {
        Prepared::from_sentence(&self.tokenizer, s)
    }

    pub fn prepare_text(&self, text: &str) -> Result<Prepared> {
        Prepared::new(&self.tokenizer, text, None)
    }

    /// Pooled encoder output of one sentence; constant while the encoder is
    /// frozen, so the trainer may cache it.
    pub fn pooled_encoding(&self, x: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let mask = x.mask();
        let out = self.encoder.forward(&mut tape, &self.store, &[&x.tokens], &[&mask])?;
        let pooled = pool_on_tape(&mut tape, out.hidden, &out.spans, &[&mask], self.cfg.pooling)?;
        tape.value(pooled).reshape(&[self.cfg.encoder.d_model])
    }

    /// `(mu, log_var)` for a batch, each `[B, D]`. `pooled` replaces the
    /// encoder pass with precomputed rows.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        batch: &[&Prepared],
        pooled: Option<&[Tensor]>,
    ) -> Result<(Var, Var)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let pooled = match pooled {
            Some(rows) => {
                let rows: Vec<Vec<f64>> = rows.iter().map(|t| t.data().to_vec()).collect();
                tape.constant(Tensor::from_rows(&rows)?)?
            }
            None => {
                let masks: Vec<Vec<bool>> = batch.iter().map(|x| x.mask()).collect();
                let seqs: Vec<&[u32]> = batch.iter().map(|x| x.tokens.as_slice()).collect();
                let mrefs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
                let out = self.encoder.forward(tape, &self.store, &seqs, &mrefs)?;
                pool_on_tape(tape, out.hidden, &out.spans, &mrefs, self.cfg.pooling)?
            }
        };
        let input = if self.cfg.annotations {
            let rows: Vec<Vec<f64>> = batch.iter().map(|x| x.pooled_roles()).collect();
            let ann = tape.constant(Tensor::from_rows(&rows)?)?;
            tape.concat_cols(&[pooled, ann])?
        } else {
            pooled
        };
        self.projection.forward(tape, &self.store, input)
    }

    /// Full teacher-forced pass: posterior, sample with `eps` (`[B, D]`),
    /// inject, decode. `recon` is the per-sentence summed NLL averaged over
    /// the batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &[&Prepared],
        eps: Tensor,
        pooled: Option<&[Tensor]>,
    ) -> Result<BatchForward> {
        let (mu, log_var) = self.posterior(tape, batch, pooled)?;
        let z = reparameterize_on_tape(tape, mu, log_var, eps)?;
        let injection = self.injector.forward(tape, &self.store, z)?;
        let inputs: Vec<&[u32]> = batch.iter().map(|x| &x.tokens[..x.tokens.len() - 1]).collect();
        let targets: Vec<usize> = batch
            .iter()
            .flat_map(|x| x.tokens[1..].iter().map(|&t| t as usize))
            .collect();
        let logits = self.decoder.forward(tape, &self.store, &inputs, Some(&injection))?;
        let ce = tape.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
        let recon = tape.scale(ce, targets.len() as f64 / batch.len() as f64)?;
        let kl = kl_on_tape(tape, mu, log_var)?;
        let kl = tape.sum_rows(kl)?;
        let kl_per_dim = tape.scale(kl, 1.0 / batch.len() as f64)?;
        Ok(BatchForward {
            mu,
            log_var,
            z,
            recon,
            kl_per_dim,
        })
    }

    /// Deterministic posterior of one sentence (`z = mu`).
    pub fn encode(&self, x: &Prepared) -> Result<LatentCode> {
        let mut tape = Tape::no_grad();
        let (mu, lv) = self.posterior(&mut tape, &[x], None)?;
        let d = [self.cfg.latent_dim];
        reparameterize(&tape.value(mu).reshape(&d)?, &tape.value(lv).reshape(&d)?, None)
    }

    pub fn entries(&self, z: &Tensor) -> Result<InjectedEntries> {
        self.injector.entries(&self.store, z)
    }

    pub fn inject(&self, z: &Tensor) -> Result<KvCache> {
        self.injector.inject(&self.store, z)
    }

    /// Greedy decoding from `z` until EOS or `max_tokens`.
    pub fn generate(&self, z: &Tensor, max_tokens: usize) -> Result<Vec<u32>> {
        let cache = self.inject(z)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.decoder
            .generate(&self.store, cache, max_tokens, Sampling::Greedy, &mut rng)
    }

    pub fn generate_text(&self, z: &Tensor) -> Result<String> {
        let ids = self.generate(z, self.cfg.decoder.max_len)?;
        Ok(self.tokenizer.decode(&ids))
    }

    /// Encode deterministically and decode greedily.
    pub fn reconstruct(&self, x: &Prepared) -> Result<String> {
        let code = self.encode(x)?;
        self.generate_text(&code.z)
    }

    /// Replace parameter values by name; shapes must match exactly.
    pub fn load_params<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = 0;
        for (name, value) in params {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.store.value(id).shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.store.value(id).shape()
                )));
            }
            self.store.set_value(id, value.clone())?;
            seen += 1;
        }
        if seen != self.store.len() {
            return Err(Error::Config(format!(
                "{seen} parameters supplied, model has {}",
                self.store.len()
            )));
        }
        Ok(())
    }
}
