//! Supervised disentanglement scores over deterministic codes: z-diff,
//! z-min-var, MIG and DCI.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::{fit_softmax, FitOptions, Standardizer};
use crate::error::{Error, Result};

/// Codes `[n, D]` paired with ground-truth factor indices `[n, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodesFactors {
    codes: Vec<Vec<f64>>,
    factors: Vec<Vec<usize>>,
    names: Vec<String>,
}

impl CodesFactors {
    pub fn new(codes: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, names: Option<Vec<String>>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Invalid("no samples".into()));
        }
        if codes.len() != factors.len() {
            return Err(Error::Invalid(format!(
                "{} code rows but {} factor rows",
                codes.len(),
                factors.len()
            )));
        }
        let d = codes[0].len();
        let f = factors[0].len();
        if d == 0 || f == 0 {
            return Err(Error::Invalid("codes and factors need at least one column".into()));
        }
        if codes.iter().any(|r| r.len() != d) || factors.iter().any(|r| r.len() != f) {
            return Err(Error::Invalid("ragged code or factor rows".into()));
        }
        if codes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite code value".into()));
        }
        let names = names.unwrap_or_else(|| (0..f).map(|k| format!("factor{k}")).collect());
        if names.len() != f {
            return Err(Error::Invalid(format!("{} names for {f} factors", names.len())));
        }
        Ok(CodesFactors { codes, factors, names })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.codes[0].len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors[0].len()
    }

    pub fn codes(&self) -> &[Vec<f64>] {
        &self.codes
    }

    pub fn factors(&self) -> &[Vec<usize>] {
        &self.factors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Factors that take more than one value; the rest are skipped with a warning.
    pub fn usable_factors(&self) -> Vec<usize> {
        (0..self.n_factors())
            .filter(|&k| {
                let first = self.factors[0][k];
                let varies = self.factors.iter().any(|r| r[k] != first);
                if !varies {
                    log::warn!("factor {} is constant and is excluded", self.names[k]);
                }
                varies
            })
            .collect()
    }

    /// Sample indices grouped by the value of factor `k`.
    fn groups(&self, k: usize) -> BTreeMap<usize, Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.factors.iter().enumerate() {
            g.entry(r[k]).or_default().push(i);
        }
        g
    }

    fn n_values(&self, k: usize) -> usize {
        self.factors.iter().map(|r| r[k]).max().unwrap_or(0) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub n_votes: usize,
    /// Samples (or pairs) averaged per vote.
    pub batch_size: usize,
    pub train_frac: f64,
    pub n_bins: usize,
    pub classifier_iters: usize,
    pub dci_l1: f64,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_votes: 800,
            batch_size: 64,
            train_frac: 0.8,
            n_bins: 20,
            classifier_iters: 1000,
            dci_l1: 0.01,
            seed: 0,
        }
    }
}

impl MetricConfig {
    fn validate(&self) -> Result<()> {
        if self.n_votes < 2 || self.batch_size == 0 || self.n_bins < 2 {
            return Err(Error::Config("n_votes ≥ 2, batch_size ≥ 1 and n_bins ≥ 2 required".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        Ok(())
    }

    fn n_train(&self, n: usize) -> usize {
        ((n as f64 * self.train_frac).round() as usize).clamp(1, n - 1)
    }
}

fn vote_factors(data: &CodesFactors) -> Result<(Vec<usize>, Vec<BTreeMap<usize, Vec<usize>>>)> {
    let usable = data.usable_factors();
    if usable.is_empty() {
        return Err(Error::Invalid("every factor is constant".into()));
    }
    let mut groups = Vec::with_capacity(usable.len());
    for &k in &usable {
        let g = data.groups(k);
        if let Some((v, _)) = g.iter().find(|(_, idx)| idx.len() < 2) {
            return Err(Error::Invalid(format!(
                "factor {} value {v} has fewer than 2 samples",
                data.names[k]
            )));
        }
        groups.push(g);
    }
    Ok((usable, groups))
}

/// Averaged absolute code differences over pairs that share one factor
/// value, classified back to the fixed factor. Returns held-out accuracy.
pub fn z_diff(data: &CodesFactors, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let (usable, groups) = vote_factors(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = data.latent_dim();
    let mut feats = Vec::with_capacity(cfg.n_votes);
    let mut labels = Vec::with_capacity(cfg.n_votes);
    for _ in 0..cfg.n_votes {
        let slot = rng.random_range(0..usable.len());
        let k = usable[slot];
        let mut acc = vec![0.0; d];
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..data.len());
            let group = &groups[slot][&data.factors[i][k]];
            let j = loop {
                let j = *group.choose(&mut rng).expect("group has ≥ 2 members");
                if j != i {
                    break j;
                }
            };
            for ((a, x), y) in acc.iter_mut().zip(&data.codes[i]).zip(&data.codes[j]) {
                *a += (x - y).abs() / cfg.batch_size as f64;
            }
        }
        feats.push(acc);
        labels.push(slot);
    }
    let n_train = cfg.n_train(cfg.n_votes);
    let scaler = Standardizer::fit(&feats[..n_train]);
    let x = scaler.apply(&feats);
    let model = fit_softmax(
        &x[..n_train],
        &labels[..n_train],
        usable.len(),
        FitOptions { iters: cfg.classifier_iters, l1: 0.0 },
    );
    Ok(model.accuracy(&x[n_train..], &labels[n_train..]))
}

/// Per-dimension standard deviations over all samples; zero-variance
/// dimensions come back as `None`.
fn global_std(data: &CodesFactors) -> Vec<Option<f64>> {
    let n = data.len() as f64;
    (0..data.latent_dim())
        .map(|j| {
            let mean = data.codes.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = data.codes.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            if var > 1e-20 * (1.0 + mean * mean) {
                Some(var.sqrt())
            } else {
                log::warn!("code dimension {j} has zero variance and is excluded");
                None
            }
        })
        .collect()
}

/// Index of the dimension with the smallest normalised variance over `batch`.
pub fn min_var_dim(codes: &[Vec<f64>], batch: &[usize], scale: &[Option<f64>]) -> Option<usize> {
    let n = batch.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for (j, s) in scale.iter().enumerate() {
        let Some(s) = s else { continue };
        let mean = batch.iter().map(|&i| codes[i][j] / s).sum::<f64>() / n;
        let var = batch.iter().map(|&i| (codes[i][j] / s - mean).powi(2)).sum::<f64>() / n;
        if best.is_none_or(|(_, b)| var < b) {
            best = Some((j, var));
        }
    }
    best.map(|(j, _)| j)
}

/// Argmin-variance dimension per vote, mapped to factors by majority.
/// Returns held-out accuracy (higher means more disentangled).
pub fn z_min_var(data: &CodesFactors, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let (usable, groups) = vote_factors(data)?;
    let scale = global_std(data);
    if scale.iter().all(Option::is_none) {
        return Err(Error::Invalid("every code dimension is constant".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut votes = Vec::with_capacity(cfg.n_votes);
    for _ in 0..cfg.n_votes {
        let slot = rng.random_range(0..usable.len());
        let k = usable[slot];
        let i = rng.random_range(0..data.len());
        let group = &groups[slot][&data.factors[i][k]];
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *group.choose(&mut rng).expect("non-empty group"))
            .collect();
        let j = min_var_dim(&data.codes, &batch, &scale).expect("some dimension varies");
        votes.push((j, slot));
    }
    let n_train = cfg.n_train(cfg.n_votes);
    let mut table = vec![vec![0usize; usable.len()]; data.latent_dim()];
    for &(j, slot) in &votes[..n_train] {
        table[j][slot] += 1;
    }
    let test = &votes[n_train..];
    let hits = test
        .iter()
        .filter(|&&(j, slot)| {
            let row = &table[j];
            row.iter().any(|&c| c > 0) && argmax_count(row) == slot
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

fn argmax_count(row: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in row.iter().enumerate() {
        if c > row[best] {
            best = i;
        }
    }
    best
}

/// Equal-frequency bin of every value; ties share the bin of their first rank.
pub fn equal_frequency_bins(values: &[f64], n_bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut bins = vec![0; n];
    let mut first_rank = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[i] != values[order[rank - 1]] {
            first_rank = rank;
        }
        bins[i] = first_rank * n_bins / n;
    }
    bins
}

fn entropy(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    -counts.values().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>()
}

/// Plug-in mutual information in nats.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pa: BTreeMap<usize, usize> = BTreeMap::new();
    let mut pb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (pa[&x] as f64 * pb[&y] as f64)).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mutual information gap, averaged over non-constant factors.
pub fn mig(data: &CodesFactors, n_bins: usize) -> Result<f64> {
    if n_bins < 2 {
        return Err(Error::Config("n_bins must be at least 2".into()));
    }
    if data.len() < 10 * n_bins {
        return Err(Error::Invalid(format!(
            "MIG with {n_bins} bins needs at least {} samples, got {}",
            10 * n_bins,
            data.len()
        )));
    }
    let usable = data.usable_factors();
    if usable.is_empty() {
        return Err(Error::Invalid("every factor is constant".into()));
    }
    let binned: Vec<Vec<usize>> = (0..data.latent_dim())
        .map(|j| {
            let col: Vec<f64> = data.codes.iter().map(|r| r[j]).collect();
            equal_frequency_bins(&col, n_bins)
        })
        .collect();
    let mut total = 0.0;
    for &k in &usable {
        let v: Vec<usize> = data.factors.iter().map(|r| r[k]).collect();
        let h = entropy(&v);
        let mut mi: Vec<f64> = binned.iter().map(|b| mutual_information(b, &v)).collect();
        mi.sort_by(|a, b| b.total_cmp(a));
        let second = mi.get(1).copied().unwrap_or(0.0);
        total += ((mi[0] - second) / h).clamp(0.0, 1.0);
    }
    Ok(total / usable.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DciScores {
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
}

/// Normalised entropy of a non-negative weight vector, in base `base`.
fn normalized_entropy(w: &[f64], base: usize) -> f64 {
    let s: f64 = w.iter().sum();
    if s <= 0.0 || base < 2 {
        return 0.0;
    }
    -w.iter()
        .map(|&x| x / s)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
        / (base as f64).ln()
}

/// Disentanglement and completeness of an importance matrix `r[j][k]`.
pub fn dci_from_importance(r: &[Vec<f64>]) -> (f64, f64) {
    let d = r.len();
    let f = r.first().map_or(0, Vec::len);
    let total: f64 = r.iter().flatten().sum();
    if total <= 0.0 {
        log::warn!("all DCI importances are zero");
        return (0.0, 0.0);
    }
    let mut dis = 0.0;
    for (j, row) in r.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if s <= 0.0 {
            log::warn!("code dimension {j} has zero importance for every factor");
            continue;
        }
        let score = if f < 2 { 1.0 } else { 1.0 - normalized_entropy(row, f) };
        dis += s / total * score;
    }
    let mut comp = 0.0;
    for k in 0..f {
        let col: Vec<f64> = r.iter().map(|row| row[k]).collect();
        let s: f64 = col.iter().sum();
        if s <= 0.0 {
            continue;
        }
        let score = if d < 2 { 1.0 } else { 1.0 - normalized_entropy(&col, d) };
        comp += s / total * score;
    }
    (dis, comp)
}

/// Per-factor L1-regularised softmax predictors from codes; importances
/// are summed absolute weights per code dimension.
pub fn dci(data: &CodesFactors, cfg: &MetricConfig) -> Result<DciScores> {
    cfg.validate()?;
    let usable = data.usable_factors();
    if usable.is_empty() {
        return Err(Error::Invalid("every factor is constant".into()));
    }
    if data.len() < 2 {
        return Err(Error::Invalid("DCI needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = cfg.n_train(data.len());
    let (train, test) = order.split_at(n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.codes[i].clone()).collect::<Vec<_>>();
    let scaler = Standardizer::fit(&pick(train));
    let x_train = scaler.apply(&pick(train));
    let x_test = scaler.apply(&pick(test));

    let d = data.latent_dim();
    let mut importance = vec![vec![0.0; usable.len()]; d];
    let mut accuracy = 0.0;
    for (slot, &k) in usable.iter().enumerate() {
        let y = |idx: &[usize]| idx.iter().map(|&i| data.factors[i][k]).collect::<Vec<_>>();
        let model = fit_softmax(
            &x_train,
            &y(train),
            data.n_values(k),
            FitOptions { iters: cfg.classifier_iters, l1: cfg.dci_l1 },
        );
        for (j, wj) in model.w.iter().enumerate() {
            importance[j][slot] = wj.iter().map(|w| w.abs()).sum();
        }
        accuracy += model.accuracy(&x_test, &y(test));
    }
    let (disentanglement, completeness) = dci_from_importance(&importance);
    Ok(DciScores {
        disentanglement,
        completeness,
        informativeness: accuracy / usable.len() as f64,
    })
}
