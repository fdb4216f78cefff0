//! End-to-end runs: corpus, model, training, evaluation and the
//! configuration grid. A run is reproducible from its config alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{generate_corpus, split, FactorSentence, FactorSpec, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::{bleu, collect_codes, disentanglement_report, DisentanglementReport, MetricConfig, TableRow};
use crate::minilm::LmConfig;
use crate::probes::{traverse, ProbeReport};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};
use crate::vae::{LmVae, ModelConfig, Prepared};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub spec: FactorSpec,
    pub n: usize,
    #[serde(default)]
    pub with_replacement: bool,
    pub train_frac: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            spec: FactorSpec::default(),
            n: 600,
            with_replacement: false,
            train_frac: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Traversed dimensions; `None` means all of them.
    pub dims: Option<Vec<usize>>,
    pub sample_size: usize,
    /// Training sentences used as traversal seeds.
    pub n_seeds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            dims: None,
            sample_size: 10,
            n_seeds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The desk-scale reference run: 600 sentences, toy encoder and decoder,
    /// frozen base with a language-model-pretrained decoder.
    pub fn toy() -> Self {
        let spec = FactorSpec::default();
        let vocab = spec.words().len() + 4;
        ExperimentConfig {
            name: "toy".into(),
            seed: 0,
            corpus: CorpusConfig { spec, ..CorpusConfig::default() },
            model: ModelConfig::toy(vocab),
            train: TrainConfig {
                freeze_base: true,
                pretrain_epochs: 20,
                learning_rate: 3e-3,
                target_kl: 16.0,
                ..TrainConfig::default()
            },
            metrics: MetricConfig::default(),
            probes: ProbeConfig::default(),
            out_dir: None,
        }
    }

    /// Same config with every seed (corpus, split, init, training, metrics) set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.metrics.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.spec.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let vocab = Tokenizer::from_spec(&self.corpus.spec)?.vocab_size();
        if self.model.encoder.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model vocabulary {} does not match the corpus tokenizer ({vocab})",
                self.model.encoder.vocab_size
            )));
        }
        if self.corpus.n == 0 {
            return Err(Error::Config("corpus size must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Corpus draw and split for a config.
pub fn build_corpus(cfg: &ExperimentConfig) -> Result<(Vec<FactorSentence>, Vec<FactorSentence>)> {
    let c = &cfg.corpus;
    let corpus = generate_corpus(&c.spec, c.n, cfg.seed, c.with_replacement)?;
    split(&corpus, c.train_frac, cfg.seed)
}

pub struct RunOutput {
    pub trainer: Trainer,
    pub train: Vec<FactorSentence>,
    pub validation: Vec<FactorSentence>,
}

/// Build the corpus and model, then train for the configured epochs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, validation) = build_corpus(cfg)?;
    let tokenizer = Tokenizer::from_spec(&cfg.corpus.spec)?;
    let model = LmVae::new(cfg.model.clone(), tokenizer, cfg.seed)?;
    let data = prepare_all(&model, &train)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), data.len())?;
    trainer.train(&data)?;
    Ok(RunOutput { trainer, train, validation })
}

pub fn prepare_all(model: &LmVae, sentences: &[FactorSentence]) -> Result<Vec<Prepared>> {
    sentences.iter().map(|s| model.prepare(s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub bleu: f64,
    pub exact_match: f64,
    /// Teacher-forced NLL per predicted token at `z = mu`.
    pub token_nll: f64,
    pub disentanglement: Option<DisentanglementReport>,
}

/// Teacher-forced reconstruction NLL per predicted token with `z = mu`.
pub fn token_nll(model: &LmVae, data: &[Prepared]) -> Result<f64> {
    let d = model.config().latent_dim;
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in data.chunks(64) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let mut tape = Tape::no_grad();
        let out = model.forward_batch(&mut tape, &batch, Tensor::zeros(&[batch.len(), d]), None)?;
        total += tape.value(out.recon).item() * batch.len() as f64;
        tokens += chunk.iter().map(|x| x.tokens.len() - 1).sum::<usize>();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Reconstruction scores over `sentences`, plus disentanglement scores
/// when `metrics` is given.
pub fn evaluate(
    model: &LmVae,
    spec: &FactorSpec,
    sentences: &[FactorSentence],
    metrics: Option<&MetricConfig>,
) -> Result<EvalReport> {
    if sentences.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let data = prepare_all(model, sentences)?;
    let mut outputs = Vec::with_capacity(data.len());
    for x in &data {
        outputs.push(model.reconstruct(x)?);
    }
    let refs: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    let exact = outputs.iter().zip(&refs).filter(|(o, r)| o == *r).count();
    let disentanglement = match metrics {
        Some(m) => Some(disentanglement_report(&collect_codes(model, spec, sentences)?, m)?),
        None => None,
    };
    Ok(EvalReport {
        n: sentences.len(),
        bleu: bleu(&outputs, &refs, 4)?,
        exact_match: exact as f64 / sentences.len() as f64,
        token_nll: token_nll(model, &data)?,
        disentanglement,
    })
}

/// Traversal over the first `n_seeds` sentences as configured.
pub fn traversal_probe(model: &LmVae, sentences: &[FactorSentence], probes: &ProbeConfig) -> Result<ProbeReport> {
    let dims: Vec<usize> = match &probes.dims {
        Some(d) => d.clone(),
        None => (0..model.config().latent_dim).collect(),
    };
    let n = probes.n_seeds.min(sentences.len());
    traverse(model, &prepare_all(model, &sentences[..n])?, &dims, probes.sample_size)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLm {
    pub name: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl NamedLm {
    fn apply(&self, lm: &mut LmConfig) {
        lm.d_model = self.d_model;
        lm.n_layers = self.n_layers;
        lm.n_heads = self.n_heads;
        lm.d_ff = self.d_ff;
    }
}

/// Cartesian product of encoder sizes, decoder sizes and annotation use,
/// each cell averaged over `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub encoders: Vec<NamedLm>,
    pub decoders: Vec<NamedLm>,
    pub annotations: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl GridConfig {
    /// Two encoder sizes × two decoder sizes × annotation on/off, with
    /// a shortened schedule so the whole grid stays in the minutes range.
    pub fn toy() -> Self {
        let mut base = ExperimentConfig::toy();
        base.name = "grid".into();
        base.train.epochs = 25;
        base.train.pretrain_epochs = 10;
        base.train.n_cycles = 10;
        base.metrics.n_votes = 400;
        let lm = |name: &str, d_model, n_layers| NamedLm {
            name: name.into(),
            d_model,
            n_layers,
            n_heads: 4,
            d_ff: 2 * d_model,
        };
        GridConfig {
            base,
            encoders: vec![lm("enc-s", 32, 1), lm("enc-m", 48, 2)],
            decoders: vec![lm("dec-s", 32, 1), lm("dec-m", 48, 2)],
            annotations: vec![true, false],
            seeds: vec![0, 1, 2],
        }
    }

    pub fn cells(&self) -> Vec<(ExperimentConfig, &NamedLm, &NamedLm, bool)> {
        let mut out = Vec::new();
        for e in &self.encoders {
            for d in &self.decoders {
                for &a in &self.annotations {
                    let mut c = self.base.clone();
                    e.apply(&mut c.model.encoder);
                    d.apply(&mut c.model.decoder);
                    c.model.annotations = a;
                    c.name = format!("{}_{}_{}", e.name, d.name, if a { "annot" } else { "plain" });
                    out.push((c, e, d, a));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.encoders.is_empty() || self.decoders.is_empty() || self.annotations.is_empty() {
            return Err(Error::Config("grid needs at least one seed, encoder, decoder and annotation setting".into()));
        }
        self.cells().iter().try_for_each(|(c, ..)| c.validate())
    }
}

/// Per-seed training-split scores of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub eval: EvalReport,
}

/// Run every cell for every seed. Returns one seed-averaged table row per
/// cell and the per-seed runs behind them.
pub fn run_grid(grid: &GridConfig) -> Result<(Vec<TableRow>, Vec<CellRun>)> {
    grid.validate()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (cfg, enc, dec, annot) in grid.cells() {
        let mut acc = [0.0; 4];
        for &seed in &grid.seeds {
            let c = cfg.clone().with_seed(seed);
            let out = run(&c)?;
            let eval = evaluate(&out.trainer.model, &c.corpus.spec, &out.train, Some(&c.metrics))?;
            log::info!("{} seed {seed}: bleu {:.4}", c.name, eval.bleu);
            let d = eval.disentanglement.as_ref().expect("metrics requested");
            for (a, v) in acc.iter_mut().zip([eval.bleu, d.z_diff, d.z_min_var, d.dci_informativeness]) {
                *a += v / grid.seeds.len() as f64;
            }
            runs.push(CellRun { cell: cfg.name.clone(), seed, eval });
        }
        rows.push(TableRow {
            encoder_cfg: enc.name.clone(),
            decoder_cfg: dec.name.clone(),
            annot,
            bleu: acc[0],
            z_diff: acc[1],
            z_min_var: acc[2],
            informativeness: acc[3],
        });
    }
    Ok((rows, runs))
}

/// Annotated-versus-plain BLEU per (encoder, decoder, seed). Returns
/// `(wins, comparisons)` where a win means annotation BLEU ≥ plain BLEU.
pub fn annotation_wins(grid: &GridConfig, runs: &[CellRun]) -> (usize, usize) {
    let mut wins = 0;
    let mut total = 0;
    for e in &grid.encoders {
        for d in &grid.decoders {
            let name = |tag: &str| format!("{}_{}_{tag}", e.name, d.name);
            for &seed in &grid.seeds {
                let find = |cell: String| runs.iter().find(|r| r.cell == cell && r.seed == seed);
                if let (Some(a), Some(p)) = (find(name("annot")), find(name("plain"))) {
                    total += 1;
                    wins += usize::from(a.eval.bleu >= p.eval.bleu);
                }
            }
        }
    }
    (wins, total)
}
