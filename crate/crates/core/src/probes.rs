//! Generative probes over a trained model: latent traversal, interpolation
//! and vector arithmetic. All of them decode greedily from `z = mu`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::{LmVae, Prepared};

/// Half-width of the traversal range in posterior standard deviations.
pub const TRAVERSAL_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub seed: String,
    /// Traversed dimension or interpolation weight.
    pub key: String,
    pub distance: f64,
    pub generated: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes CSV or JSON lines depending on the extension (`.jsonl` or anything else).
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e == "jsonl") {
            self.write_jsonl(f)
        } else {
            self.write_csv(f)
        }
    }
}

fn seed_text(model: &LmVae, x: &Prepared) -> String {
    model.tokenizer().decode(&x.tokens)
}

/// Offsets `σ·(−3 + 6i/(n−1))`; a single sample sits at zero.
pub fn traversal_offsets(sigma: f64, sample_size: usize) -> Vec<f64> {
    if sample_size == 1 {
        return vec![0.0];
    }
    let span = 2.0 * TRAVERSAL_SIGMAS;
    (0..sample_size)
        .map(|i| sigma * (-TRAVERSAL_SIGMAS + span * i as f64 / (sample_size - 1) as f64))
        .collect()
}

/// Decode with one latent coordinate moved across ±3σ of the sentence's
/// own posterior. Rows come out grouped by sentence, then dimension, with
/// increasing signed offset.
pub fn traverse(model: &LmVae, sentences: &[Prepared], dims: &[usize], sample_size: usize) -> Result<ProbeReport> {
    let d = model.config().latent_dim;
    if let Some(&bad) = dims.iter().find(|&&k| k >= d) {
        return Err(Error::Invalid(format!("dimension {bad} out of range for latent size {d}")));
    }
    if sample_size == 0 {
        return Err(Error::Invalid("sample_size must be positive".into()));
    }
    let mut rows = Vec::with_capacity(sentences.len() * dims.len() * sample_size);
    for x in sentences {
        let seed = seed_text(model, x);
        let code = model.encode(x)?;
        for &k in dims {
            let sigma = (0.5 * code.log_var.data()[k]).exp();
            for delta in traversal_offsets(sigma, sample_size) {
                let mut z = code.z.clone();
                z.data_mut()[k] += delta;
                rows.push(ProbeRow {
                    seed: seed.clone(),
                    key: k.to_string(),
                    distance: delta,
                    generated: model.generate_text(&z)?,
                });
            }
        }
    }
    Ok(ProbeReport { rows })
}

fn euclidean(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Linear path between two posterior means, decoded at `steps` evenly
/// spaced weights including both endpoints.
pub fn interpolate(model: &LmVae, source: &Prepared, target: &Prepared, steps: usize) -> Result<ProbeReport> {
    if steps < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let zs = model.encode(source)?.z;
    let zt = model.encode(target)?.z;
    let distance = euclidean(&zs, &zt);
    let seed = seed_text(model, source);
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = i as f64 / (steps - 1) as f64;
        let z = Tensor::vector(
            zs.data()
                .iter()
                .zip(zt.data())
                .map(|(s, t)| (1.0 - alpha) * s + alpha * t)
                .collect(),
        );
        rows.push(ProbeRow {
            seed: seed.clone(),
            key: format!("{alpha}"),
            distance,
            generated: model.generate_text(&z)?,
        });
    }
    Ok(ProbeReport { rows })
}

/// Sum of `sign · mu(x)` over the terms, decoded greedily. Signs must be ±1.
pub fn arithmetic(model: &LmVae, terms: &[(f64, &Prepared)]) -> Result<String> {
    if terms.is_empty() {
        return Err(Error::Invalid("empty latent expression".into()));
    }
    let mut acc: Option<Tensor> = None;
    for &(sign, x) in terms {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::Invalid(format!("term weight {sign} is not ±1")));
        }
        let z = model.encode(x)?.z.map(|v| sign * v);
        match acc.as_mut() {
            None => acc = Some(z),
            Some(a) => a.add_assign(&z),
        }
    }
    model.generate_text(&acc.expect("non-empty"))
}
