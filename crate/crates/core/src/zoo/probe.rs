//! Multinomial logistic-regression probe trained by full-batch gradient
//! descent on standardised features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

/// Tasks with fewer examples than this are left out of reports.
pub const MIN_TASK_EXAMPLES: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub folds: usize,
    pub iterations: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            iterations: 500,
            l2: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub classes: Vec<String>,
    /// `|Ω| × d`, acting on standardised features.
    pub weights: Matrix,
    pub bias: Vector,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl ProbeModel {
    pub fn predict(&self, x: &Vector) -> &str {
        let z = self.standardize(x.as_slice());
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..self.classes.len() {
            let s = self.bias.0[k] + dot(self.weights.row(k), &z);
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        &self.classes[best]
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn sorted_classes(labels: &[String]) -> Vec<String> {
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    classes
}

/// Fits one probe over `classes` (which may include labels absent from
/// this training split).
fn fit_with_classes(xs: &[Vector], labels: &[String], classes: &[String], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let n = xs.len();
    let d = xs[0].dim();
    if xs.iter().any(|x| x.dim() != d) {
        return Err(Error::Shape("probe features have inconsistent widths".into()));
    }
    let k = classes.len();
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.as_slice()) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in scale.iter_mut().zip(x.as_slice()).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    for s in &mut scale {
        *s = s.sqrt().max(1e-8);
    }
    let feats: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.as_slice().iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label in class list"))
        .collect();

    // Standardised rows have mean squared norm ≤ d, so the softmax loss is
    // (d + 1)/2-smooth in (W, b); a step of the inverse smoothness is stable.
    let lr = 1.0 / (0.5 * (d as f64 + 1.0) + cfg.l2);
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut gw = vec![0.0; k * d];
    let mut gb = vec![0.0; k];
    let mut p = vec![0.0; k];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (x, &t) in feats.iter().zip(&targets) {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                p[c] = b[c] + dot(&w[c * d..(c + 1) * d], x);
                max = max.max(p[c]);
            }
            let mut sum = 0.0;
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for c in 0..k {
                let err = p[c] / sum - f64::from(u8::from(c == t));
                gb[c] += err / n as f64;
                for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += err * v / n as f64;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + cfg.l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    Ok(ProbeModel {
        classes: classes.to_vec(),
        weights: Matrix::new(k, d, w)?,
        bias: Vector(b),
        mean,
        scale,
    })
}

fn check(xs: &[Vector], labels: &[String], min: usize) -> Result<Vec<String>> {
    if xs.len() != labels.len() {
        return Err(Error::Argument(format!("{} features for {} labels", xs.len(), labels.len())));
    }
    if xs.len() < min.max(1) {
        return Err(Error::Argument(format!("need at least {} examples, got {}", min.max(1), xs.len())));
    }
    let classes = sorted_classes(labels);
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "all {} examples carry the label {:?}",
            labels.len(),
            classes.first().map_or("", String::as_str)
        )));
    }
    Ok(classes)
}

/// Fits a probe on all examples.
pub fn fit_probe(xs: &[Vector], labels: &[String], cfg: &ProbeConfig) -> Result<ProbeModel> {
    let classes = check(xs, labels, 1)?;
    fit_with_classes(xs, labels, &classes, cfg)
}

/// k-fold cross-validated accuracy over a seeded shuffle, averaged over folds.
pub fn cross_validate(xs: &[Vector], labels: &[String], cfg: &ProbeConfig) -> Result<f64> {
    let folds = cfg.folds.max(2);
    let classes = check(xs, labels, folds)?;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    Rng::new(cfg.seed).shuffle(&mut order);
    let mut total = 0.0;
    for f in 0..folds {
        let lo = f * order.len() / folds;
        let hi = (f + 1) * order.len() / folds;
        let test = &order[lo..hi];
        let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let tx: Vec<Vector> = train.iter().map(|&i| xs[i].clone()).collect();
        let ty: Vec<String> = train.iter().map(|&i| labels[i].clone()).collect();
        let model = fit_with_classes(&tx, &ty, &classes, cfg)?;
        let hits = test.iter().filter(|&&i| model.predict(&xs[i]) == labels[i]).count();
        total += hits as f64 / test.len() as f64;
    }
    Ok(total / folds as f64)
}

/// Cross-validated accuracy for each layer's representations.
pub fn train_probe(per_layer: &[Vec<Vector>], labels: &[String], cfg: &ProbeConfig) -> Result<Vec<f64>> {
    per_layer.iter().map(|xs| cross_validate(xs, labels, cfg)).collect()
}
