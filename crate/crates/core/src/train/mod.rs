//! Next-token training with Adam and exact manual gradients.

mod backprop;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Weights;
use crate::error::{Error, Result};
use crate::format::save_model;
use crate::model::ModelBundle;
use crate::numerics::Rng;

pub(crate) use backprop::loss_and_grads_generic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    /// Steps between recorded evaluation points.
    pub eval_every: usize,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay of the learning rate down to `lr * min_lr_ratio`.
    pub cosine_decay: bool,
    pub min_lr_ratio: f64,
    /// Decoupled weight decay applied to matrices (not gains or biases).
    pub weight_decay: f64,
    /// A step loss above `divergence_factor` × the first loss aborts training.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            seed: 0,
            eval_every: 100,
            warmup: 0,
            cosine_decay: false,
            min_lr_ratio: 0.1,
            weight_decay: 0.0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let decay = if self.cosine_decay && self.steps > 1 {
            let t = step as f64 / (self.steps - 1) as f64;
            self.min_lr_ratio + (1.0 - self.min_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation point.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    /// Loss of every step, in order.
    pub curve: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

/// Mean next-token cross-entropy of `batch` (token id sequences) and its
/// gradient with respect to every parameter, in layout order.
pub fn loss_and_grads(bundle: &ModelBundle, batch: &[Vec<usize>]) -> Result<(f64, Vec<f32>)> {
    let (loss, grads) = loss_and_grads_generic(&Weights::of(bundle), batch)?;
    Ok((f64::from(loss), grads))
}

/// Same loss evaluated entirely in f64 (used for gradient checks).
pub fn loss_and_grads_f64(bundle: &ModelBundle, params: &[f64], batch: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
    if params.len() != bundle.params().len() {
        return Err(Error::Shape(format!(
            "expected {} parameters, got {}",
            bundle.params().len(),
            params.len()
        )));
    }
    let w = Weights {
        cfg: bundle.config(),
        layout: bundle.layout(),
        params,
    };
    loss_and_grads_generic(&w, batch)
}

/// Tokenizes every line with a leading `<bos>`.
pub fn encode_lines(bundle: &ModelBundle, lines: &[String]) -> Result<Vec<Vec<usize>>> {
    let max = bundle.config().max_seq;
    lines
        .iter()
        .map(|line| {
            let ids = bundle.encode_prompt(line);
            if ids.len() > max + 1 {
                return Err(Error::Length(format!(
                    "line of {} tokens exceeds max_seq {max}: {line:?}",
                    ids.len()
                )));
            }
            Ok(ids)
        })
        .collect()
}

/// Trains `init` on `lines`. Batches are drawn by walking a seeded
/// permutation of the corpus, reshuffled every epoch.
pub fn train(init: &ModelBundle, lines: &[String], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(init, lines, cfg, |_, _| {})
}

/// [`train`] with a callback invoked at each evaluation point.
pub fn train_with(
    init: &ModelBundle,
    lines: &[String],
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalPoint, &ModelBundle),
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            model: init.clone(),
            curve: Vec::new(),
            evals: Vec::new(),
        });
    }
    if lines.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::spec("batch_size", "must be >= 1"));
    }
    let data = encode_lines(init, lines)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = Rng::new(cfg.seed);
    rng.shuffle(&mut order);
    let mut cursor = 0;

    let mut params = init.params().to_vec();
    let n = params.len();
    let mut decays = vec![false; n];
    for t in init.layout().tensors() {
        let is_matrix = t.rows > 1 && !t.name.ends_with("gamma") && !t.name.ends_with("beta");
        decays[t.range()].fill(is_matrix);
    }
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0usize;
    let mut first: Option<f64> = None;
    let every = cfg.eval_every.max(1);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let w = Weights {
            cfg: init.config(),
            layout: init.layout(),
            params: &params,
        };
        let (loss, grads) = loss_and_grads_generic(&w, &batch)?;
        let loss = f64::from(loss);
        let initial = *first.get_or_insert(loss);
        curve.push(loss);
        if !loss.is_finite() || loss > cfg.divergence_factor * initial {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
                curve,
            });
        }

        let norm = grads.iter().map(|&g| f64::from(g).powi(2)).sum::<f64>().sqrt();
        let scale = if cfg.clip > 0.0 && norm > cfg.clip {
            cfg.clip / norm
        } else {
            1.0
        };
        let lr = cfg.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..n {
            let g = f64::from(grads[i]) * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mut update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            if decays[i] {
                update += lr * cfg.weight_decay * f64::from(params[i]);
            }
            params[i] = (f64::from(params[i]) - update) as f32;
        }

        window += loss;
        window_len += 1;
        if (step + 1) % every == 0 || step + 1 == cfg.steps {
            let point = EvalPoint {
                step: step + 1,
                loss: window / window_len as f64,
            };
            window = 0.0;
            window_len = 0;
            let snapshot = init.with_params(params.clone())?;
            on_eval(&point, &snapshot);
            evals.push(point);
        }
    }
    let model = init.with_params(params)?;
    Ok(TrainOutcome { model, curve, evals })
}

/// Trains and writes the final checkpoint into `dir`.
pub fn train_to_dir(init: &ModelBundle, lines: &[String], cfg: &TrainConfig, dir: &Path) -> Result<TrainOutcome> {
    let out = train(init, lines, cfg)?;
    save_model(&out.model, dir)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NormKind};
    use crate::numerics::{finite_diff_grad, Vector};
    use crate::tokenizer::{Tokenizer, TokenizerMode};

    fn check_model(norm: NormKind, tied: bool) -> ModelBundle {
        let words: Vec<String> = (0..14).map(|i| format!("t{i}")).collect();
        let tok = Tokenizer::from_tokens(TokenizerMode::Word, words).unwrap();
        assert_eq!(tok.len(), 17);
        let mut cfg = ModelConfig::new(2, 8, 2, 17, 8);
        cfg.norm_kind = norm;
        cfg.tie_embeddings = tied;
        let base = ModelBundle::random("grad", cfg, tok, 3).unwrap();
        // larger weights give non-trivial attention patterns and gradients
        let params = base.params().iter().map(|v| v * 15.0).collect::<Vec<_>>();
        let mut b = base.with_params(params).unwrap();
        // perturb gains and biases away from their init values
        let mut rng = Rng::new(17);
        let mut p = b.params().to_vec();
        for t in b.layout().tensors() {
            if t.name.contains("gamma") || t.name.contains("beta") || t.name.contains("b_") {
                for x in &mut p[t.range()] {
                    *x += (0.3 * rng.standard_normal()) as f32;
                }
            }
        }
        b = b.with_params(p).unwrap();
        b
    }

    fn gradient_check(norm: NormKind, tied: bool) {
        let b = check_model(norm, tied);
        let batch = vec![vec![1, 4, 7, 9, 3, 12], vec![1, 16, 5, 5]];
        let base: Vec<f64> = b.params().iter().map(|&v| f64::from(v)).collect();
        let (_, analytic) = loss_and_grads_f64(&b, &base, &batch).unwrap();
        let numeric = finite_diff_grad(
            |x: &Vector| loss_and_grads_f64(&b, &x.0, &batch).unwrap().0,
            &Vector(base),
            1e-6,
        );
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric.0) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "{norm:?} tied={tied}: worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(NormKind::LayerNorm, false);
        gradient_check(NormKind::RmsNorm, true);
        gradient_check(NormKind::Identity, false);
    }

    #[test]
    fn f32_and_f64_losses_agree() {
        let b = check_model(NormKind::LayerNorm, false);
        let batch = vec![vec![1, 4, 7, 9]];
        let (l32, _) = loss_and_grads(&b, &batch).unwrap();
        let wide: Vec<f64> = b.params().iter().map(|&v| f64::from(v)).collect();
        let (l64, _) = loss_and_grads_f64(&b, &wide, &batch).unwrap();
        assert!((l32 - l64).abs() < 1e-4);
    }

    #[test]
    fn loss_matches_forward_logits() {
        let b = check_model(NormKind::LayerNorm, false);
        let seq = vec![1, 4, 7, 9];
        let (loss, _) = loss_and_grads(&b, &[seq.clone()]).unwrap();
        let t = crate::engine::forward(&b, &seq[..3], &Default::default()).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            expected -= t.distribution(i).prob(seq[i + 1]).ln();
        }
        assert!((loss - expected / 3.0).abs() < 1e-5);
    }

    #[test]
    fn zero_steps_returns_initial_weights() {
        let b = check_model(NormKind::LayerNorm, false);
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let out = train(&b, &["t1 t2".to_string()], &cfg).unwrap();
        assert_eq!(out.model, b);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let b = check_model(NormKind::LayerNorm, false);
        let lines: Vec<String> = vec!["t1 t2 t3 t4 t5".into(), "t6 t7 t8".into()];
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 2,
            lr: 1e3,
            clip: 0.0,
            ..Default::default()
        };
        match train(&b, &lines, &cfg) {
            Err(Error::Diverged { curve, .. }) => assert!(!curve.is_empty()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.curve)),
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let b = check_model(NormKind::LayerNorm, false);
        let lines: Vec<String> = vec!["t1 t2 t3 t4 t5".into(), "t6 t7 t8 t9".into()];
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 2,
            lr: 1e-2,
            eval_every: 20,
            ..Default::default()
        };
        let a = train(&b, &lines, &cfg).unwrap();
        let again = train(&b, &lines, &cfg).unwrap();
        assert_eq!(a.model.checksum(), again.model.checksum());
        assert_eq!(a.evals.len(), 3);
        assert!(a.curve.last().unwrap() < &(0.5 * a.curve[0]));
    }
}
