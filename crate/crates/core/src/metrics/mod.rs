//! Reconstruction, disentanglement and interpolation metrics, plus PCA for
//! projection plots.

mod bleu;
mod disentangle;
mod interp;
mod linear;
mod pca;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, SMOOTHING_EPS};
pub use disentangle::{
    dci, dci_from_importance, equal_frequency_bins, mig, min_var_dim, mutual_information, z_diff, z_min_var,
    CodesFactors, DciScores, MetricConfig,
};
pub use interp::{interpolation_metrics, levenshtein, normalized_levenshtein, InterpolationScores};
pub use pca::{pca_project, write_projection_dat, Pca};

use crate::corpus::{FactorSentence, FactorSpec};
use crate::error::Result;
use crate::vae::LmVae;

/// Stored with every report: the score is an accuracy even though the
/// tabular column header carries a down arrow.
pub const Z_MIN_VAR_NOTE: &str =
    "z_min_var is the raw majority-vote accuracy (higher is better); the z-m-var column label is kept for table parity only";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub z_diff: f64,
    pub z_min_var: f64,
    pub mig: f64,
    pub dci_disentanglement: f64,
    pub dci_completeness: f64,
    pub dci_informativeness: f64,
    pub z_min_var_orientation: String,
}

impl DisentanglementReport {
    pub fn scores(&self) -> [(&'static str, f64); 6] {
        [
            ("z_diff", self.z_diff),
            ("z_min_var", self.z_min_var),
            ("mig", self.mig),
            ("dci_disentanglement", self.dci_disentanglement),
            ("dci_completeness", self.dci_completeness),
            ("dci_informativeness", self.dci_informativeness),
        ]
    }
}

pub fn disentanglement_report(data: &CodesFactors, cfg: &MetricConfig) -> Result<DisentanglementReport> {
    let d = dci(data, cfg)?;
    Ok(DisentanglementReport {
        z_diff: z_diff(data, cfg)?,
        z_min_var: z_min_var(data, cfg)?,
        mig: mig(data, cfg.n_bins)?,
        dci_disentanglement: d.disentanglement,
        dci_completeness: d.completeness,
        dci_informativeness: d.informativeness,
        z_min_var_orientation: Z_MIN_VAR_NOTE.to_string(),
    })
}

/// Posterior means of `sentences` paired with their factor indices.
pub fn collect_codes(model: &LmVae, spec: &FactorSpec, sentences: &[FactorSentence]) -> Result<CodesFactors> {
    let mut codes = Vec::with_capacity(sentences.len());
    for s in sentences {
        codes.push(model.encode(&model.prepare(s)?)?.mu.into_data());
    }
    let factors = sentences.iter().map(|s| s.factors.clone()).collect();
    CodesFactors::new(codes, factors, Some(spec.names().into_iter().map(String::from).collect()))
}

/// One line of the configuration-grid table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub encoder_cfg: String,
    pub decoder_cfg: String,
    pub annot: bool,
    pub bleu: f64,
    pub z_diff: f64,
    pub z_min_var: f64,
    pub informativeness: f64,
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
