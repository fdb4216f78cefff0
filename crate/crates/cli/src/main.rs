use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentforge::checkpoint::Checkpoint;
use latentforge::corpus::{generate_corpus, load_jsonl, marginals, save_jsonl, FactorSpec};
use latentforge::experiment::{
    annotation_wins, evaluate, run, traversal_probe, ExperimentConfig, GridConfig, ProbeConfig,
};
use latentforge::metrics::{collect_codes, pca_project, write_projection_dat, write_table_csv, TableRow};
use latentforge::probes::{arithmetic, interpolate, ProbeReport};
use latentforge::trainer::write_log_csv;
use latentforge::vae::LmVae;

const SEED_ENV: &str = "LATENTFORGE_SEED";

#[derive(Parser)]
#[command(name = "latentforge", version, about = "Train and probe LM-VAEs with KV-cache latent injection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample a synthetic factor corpus as JSON lines and print its marginals.
    GenCorpus {
        /// Factor spec JSON (defaults to the built-in grammar).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        with_replacement: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes the checkpoint, metric log and corpus split.
    Train {
        /// Experiment config JSON (defaults to the toy run).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        latent_size: Option<usize>,
        #[arg(long)]
        target_kl: Option<f64>,
        #[arg(long)]
        max_beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction BLEU and disentanglement scores for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Skip the disentanglement metrics.
        #[arg(long)]
        no_disentanglement: bool,
        /// Factor whose values label the 2D projection export.
        #[arg(long, default_value = "negation")]
        label_factor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generative probes over a checkpoint.
    Probe {
        #[command(subcommand)]
        probe: ProbeCmd,
    },
    /// Encoder × decoder × annotation grid; writes one table row per cell.
    Grid {
        /// Grid config JSON (defaults to the 2×2×2 toy grid).
        #[arg(long = "configs")]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ProbeCommon {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Sweep single latent dimensions over ±3σ of each seed's posterior.
    Traverse {
        #[command(flatten)]
        common: ProbeCommon,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// `all`, a range `0..16`, or a list `0,3,5`.
        #[arg(long, default_value = "all")]
        dims: String,
        #[arg(long, default_value_t = 10)]
        sample_size: usize,
        /// Number of corpus sentences used as seeds.
        #[arg(long, default_value_t = 5)]
        n_seeds: usize,
    },
    /// Decode along the straight line between two sentences' latents.
    Interpolate {
        #[command(flatten)]
        common: ProbeCommon,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
    },
    /// Decode a signed sum of sentence latents; terms start with `+` or `-`.
    Arith {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "term", required = true, allow_hyphen_values = true)]
        terms: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| latentforge::Error::Config(format!("{SEED_ENV}={v} is not an integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn load_spec(path: Option<&Path>) -> anyhow::Result<FactorSpec> {
    let spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| latentforge::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FactorSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

fn load_model(path: &Path) -> anyhow::Result<LmVae> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

fn parse_dims(s: &str, latent_dim: usize) -> anyhow::Result<Vec<usize>> {
    let bad = || latentforge::Error::Config(format!("cannot parse dims {s:?}"));
    if s == "all" {
        return Ok((0..latent_dim).collect());
    }
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    Ok(s.split(',').map(|d| d.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?)
}

fn save_report(report: &ProbeReport, dir: &Path, stem: &str, format: Format) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(match format {
        Format::Csv => format!("{stem}.csv"),
        Format::Jsonl => format!("{stem}.jsonl"),
    });
    report.save(&path)?;
    Ok(path)
}

fn gen_corpus(spec: Option<PathBuf>, n: usize, seed: u64, with_replacement: bool, out: &Path) -> anyhow::Result<()> {
    let spec = load_spec(spec.as_deref())?;
    let seed = env_seed()?.unwrap_or(seed);
    let corpus = generate_corpus(&spec, n, seed, with_replacement)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_jsonl(&spec, &corpus, out).with_context(|| format!("writing {}", out.display()))?;
    println!("factor,value,count,fraction");
    for (f, counts) in spec.factors.iter().zip(marginals(&spec, &corpus)) {
        for (v, c) in f.values.iter().zip(counts) {
            let label = if v.is_empty() { "<none>" } else { v.as_str() };
            println!("{},{label},{c},{:.4}", f.name, c as f64 / n.max(1) as f64);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    latent_size: Option<usize>,
    target_kl: Option<f64>,
    max_beta: Option<f64>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = env_seed()?.or(seed) {
        cfg = cfg.with_seed(s);
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = latent_size {
        cfg.model.latent_dim = d;
    }
    if let Some(t) = target_kl {
        cfg.train.target_kl = t;
    }
    if let Some(b) = max_beta {
        cfg.train.max_beta = b;
    }
    cfg.out_dir = Some(out.to_path_buf());
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let result = run(&cfg)?;
    cfg.save(&out.join("config.json"))?;
    Checkpoint::from_trainer(&result.trainer).save(&out.join("model.lvf"))?;
    write_log_csv(result.trainer.log(), fs::File::create(out.join("train_log.csv"))?)?;
    save_jsonl(&cfg.corpus.spec, &result.train, &out.join("corpus_train.jsonl"))?;
    save_jsonl(&cfg.corpus.spec, &result.validation, &out.join("corpus_val.jsonl"))?;
    if cfg.probes.n_seeds > 0 {
        let report = traversal_probe(&result.trainer.model, &result.train, &cfg.probes)?;
        report.save(&out.join("traverse.csv"))?;
    }
    if let Some(last) = result.trainer.log().last() {
        println!(
            "trained {} steps: recon_nll {:.4}, kl {:.4}, beta {:.3}",
            result.trainer.step(),
            last.recon_nll,
            last.kl_raw,
            last.beta
        );
    }
    Ok(())
}

fn eval(
    ckpt: &Path,
    corpus: &Path,
    spec: Option<PathBuf>,
    no_disentanglement: bool,
    label_factor: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let spec = load_spec(spec.as_deref())?;
    let model = load_model(ckpt)?;
    let sentences = load_jsonl(&spec, corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let mut metrics = latentforge::metrics::MetricConfig::default();
    if let Some(s) = env_seed()? {
        metrics.seed = s;
    }
    let report = evaluate(&model, &spec, &sentences, (!no_disentanglement).then_some(&metrics))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    let cfg = model.config();
    let describe = |lm: &latentforge::minilm::LmConfig| format!("d{}-l{}", lm.d_model, lm.n_layers);
    let d = report.disentanglement.as_ref();
    let row = TableRow {
        encoder_cfg: describe(&cfg.encoder),
        decoder_cfg: describe(&cfg.decoder),
        annot: cfg.annotations,
        bleu: report.bleu,
        z_diff: d.map_or(f64::NAN, |d| d.z_diff),
        z_min_var: d.map_or(f64::NAN, |d| d.z_min_var),
        informativeness: d.map_or(f64::NAN, |d| d.dci_informativeness),
    };
    write_table_csv(&[row], fs::File::create(out.join("eval.csv"))?)?;

    let k = spec
        .names()
        .iter()
        .position(|n| *n == label_factor)
        .ok_or_else(|| latentforge::Error::Config(format!("unknown factor {label_factor}")))?;
    let codes = collect_codes(&model, &spec, &sentences)?;
    if codes.len() > 2 && codes.latent_dim() >= 2 {
        let pca = pca_project(codes.codes(), 2)?;
        let labels: Vec<String> = sentences
            .iter()
            .map(|s| {
                let v = &spec.factors[k].values[s.factors[k]];
                if v.is_empty() { "<none>".to_string() } else { v.clone() }
            })
            .collect();
        write_projection_dat(fs::File::create(out.join("projection.dat"))?, &pca.projected, &labels)?;
    }
    println!("bleu {:.4}  exact_match {:.4}  token_nll {:.4}", report.bleu, report.exact_match, report.token_nll);
    if let Some(d) = &report.disentanglement {
        for (name, v) in d.scores() {
            println!("{name} {v:.4}");
        }
    }
    Ok(())
}

fn probe(cmd: ProbeCmd) -> anyhow::Result<()> {
    match cmd {
        ProbeCmd::Traverse { common, corpus, spec, dims, sample_size, n_seeds } => {
            let spec = load_spec(spec.as_deref())?;
            let model = load_model(&common.ckpt)?;
            let sentences = load_jsonl(&spec, &corpus)?;
            let probes = ProbeConfig {
                dims: Some(parse_dims(&dims, model.config().latent_dim)?),
                sample_size,
                n_seeds,
            };
            let report = traversal_probe(&model, &sentences, &probes)?;
            let path = save_report(&report, &common.out, "traverse", common.format)?;
            println!("{} rows written to {}", report.len(), path.display());
        }
        ProbeCmd::Interpolate { common, source, target, steps } => {
            let model = load_model(&common.ckpt)?;
            let (s, t) = (model.prepare_text(&source)?, model.prepare_text(&target)?);
            let report = interpolate(&model, &s, &t, steps)?;
            for r in &report.rows {
                println!("{}\t{}", r.key, r.generated);
            }
            save_report(&report, &common.out, "interpolate", common.format)?;
        }
        ProbeCmd::Arith { ckpt, terms, out } => {
            let model = load_model(&ckpt)?;
            let mut parsed = Vec::with_capacity(terms.len());
            for t in &terms {
                let (sign, text) = match t.trim_start().split_at(1) {
                    ("+", rest) => (1.0, rest),
                    ("-", rest) => (-1.0, rest),
                    _ => bail!(latentforge::Error::Config(format!("term {t:?} must start with + or -"))),
                };
                parsed.push((sign, model.prepare_text(text.trim())?));
            }
            let refs: Vec<(f64, &_)> = parsed.iter().map(|(s, p)| (*s, p)).collect();
            let text = arithmetic(&model, &refs)?;
            println!("{text}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("arith.txt"), format!("{text}\n"))?;
            }
        }
    }
    Ok(())
}

fn grid(config: Option<PathBuf>, seeds: Option<Vec<u64>>, out: &Path) -> anyhow::Result<()> {
    let mut grid = match config {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| latentforge::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GridConfig::toy(),
    };
    if let Some(s) = seeds {
        grid.seeds = s;
    }
    if let Some(s) = env_seed()? {
        grid.seeds = vec![s];
    }
    grid.validate()?;
    fs::create_dir_all(out)?;
    let (rows, runs) = latentforge::experiment::run_grid(&grid)?;
    write_table_csv(&rows, fs::File::create(out.join("table.csv"))?)?;
    let mut lines = String::new();
    for r in &runs {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    fs::write(out.join("runs.jsonl"), lines)?;
    fs::write(out.join("grid.json"), serde_json::to_string_pretty(&grid)?)?;
    let (wins, total) = annotation_wins(&grid, &runs);
    println!("annotation BLEU >= plain BLEU in {wins}/{total} (encoder, decoder, seed) comparisons");
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenCorpus { spec, n, seed, with_replacement, out } => gen_corpus(spec, n, seed, with_replacement, &out),
        Cmd::Train { config, seed, epochs, latent_size, target_kl, max_beta, out } => {
            train(config, seed, epochs, latent_size, target_kl, max_beta, &out)
        }
        Cmd::Eval { ckpt, corpus, spec, no_disentanglement, label_factor, out } => {
            eval(&ckpt, &corpus, spec, no_disentanglement, &label_factor, &out)
        }
        Cmd::Probe { probe: p } => probe(p),
        Cmd::Grid { config, seeds, out } => grid(config, seeds, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| c.downcast_ref::<latentforge::Error>().is_some_and(|e| e.is_config()));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
