//! Multinomial logistic regression fitted by (proximal) gradient descent.
//! Shared by the z-diff classifier and the DCI importance estimator.

/// Column-wise standardisation fitted on one set and applied to others.
#[derive(Debug, Clone)]
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let p = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // (near-)constant columns map to zero rather than amplified rounding noise
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(v, m)| if v > 1e-20 * (1.0 + m * m) { v.sqrt() } else { f64::INFINITY })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FitOptions {
    pub iters: usize,
    /// Weight of the L1 penalty on `w` (the bias is unpenalised).
    pub l1: f64,
}

/// `w` is `[p][c]`, `b` is `[c]`.
#[derive(Debug, Clone)]
pub(crate) struct SoftmaxModel {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl SoftmaxModel {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (xj, wj) in x.iter().zip(&self.w) {
            if *xj != 0.0 {
                for (o, w) in out.iter_mut().zip(wj) {
                    *o += xj * w;
                }
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut z = vec![0.0; self.b.len()];
        self.logits(x, &mut z);
        argmax(&z)
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let hits = x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count();
        hits as f64 / x.len() as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fit on features that should already be standardised. The step size is
/// the inverse of a Lipschitz bound on the mean cross-entropy gradient.
pub(crate) fn fit_softmax(x: &[Vec<f64>], y: &[usize], n_classes: usize, opts: FitOptions) -> SoftmaxModel {
    let p = x.first().map_or(0, Vec::len);
    let n = x.len().max(1) as f64;
    let trace = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n + 1.0;
    let lr = 1.0 / (0.5 * trace);
    let mut m = SoftmaxModel {
        w: vec![vec![0.0; n_classes]; p],
        b: vec![0.0; n_classes],
    };
    let mut gw = vec![vec![0.0; n_classes]; p];
    let mut gb = vec![0.0; n_classes];
    let mut z = vec![0.0; n_classes];
    for _ in 0..opts.iters {
        gw.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
        gb.iter_mut().for_each(|v| *v = 0.0);
        for (xi, &yi) in x.iter().zip(y) {
            m.logits(xi, &mut z);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in z.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for (c, v) in z.iter_mut().enumerate() {
                *v /= s;
                if c == yi {
                    *v -= 1.0;
                }
            }
            for (g, v) in gb.iter_mut().zip(&z) {
                *g += v / n;
            }
            for (gj, xj) in gw.iter_mut().zip(xi) {
                if *xj != 0.0 {
                    for (g, v) in gj.iter_mut().zip(&z) {
                        *g += xj * v / n;
                    }
                }
            }
        }
        for (b, g) in m.b.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        let shrink = lr * opts.l1;
        for (wj, gj) in m.w.iter_mut().zip(&gw) {
            for (w, g) in wj.iter_mut().zip(gj) {
                let v = *w - lr * g;
                *w = v.signum() * (v.abs() - shrink).max(0.0);
            }
        }
    }
    m
}
