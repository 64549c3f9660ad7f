use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{TaskSpec, TrainingItem};
use crate::tensor::Mat;

use super::forward::Patch;
use super::{build_model, ModelConfig, ModelParams, Transformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed of the example shuffling stream (initialization uses the model
    /// config's seed).
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-3,
            batch_size: 32,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy of each optimizer step's batch.
    pub losses: Vec<f64>,
}

/// Initializes a model from `config` and trains it on the tasks' training
/// items (see [`TaskSpec::training_items`]).
pub fn train<S: Scalar>(
    config: &ModelConfig,
    tasks: &[TaskSpec],
    options: &TrainOptions,
) -> Result<(Transformer<S>, TrainReport)> {
    let mut model = build_model::<S>(config)?;
    let items: Vec<TrainingItem> = tasks.iter().flat_map(TaskSpec::training_items).collect();
    let report = model.fit(&items, options)?;
    Ok((model, report))
}

impl<S: Scalar> Transformer<S> {
    /// Adam on the cross-entropy between the final-position distribution and
    /// the uniform distribution over each item's answer set. Single-threaded
    /// and deterministic given the options' seed.
    pub fn fit(&mut self, items: &[TrainingItem], options: &TrainOptions) -> Result<TrainReport> {
        if items.is_empty() {
            return Err(Error::Task("no training items".into()));
        }
        if options.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for item in items {
            self.check_tokens(&item.tokens)?;
            if item.answers.is_empty() {
                return Err(Error::Task("training item without answers".into()));
            }
            if let Some(&t) = item.answers.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange { token: t, vocab_size: self.config.vocab_size });
            }
        }

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffler = rng::seeded(options.seed);
        let mut cursor = items.len();

        let mut grads = ModelParams::<S>::zeros(&self.config);
        let mut m1 = ModelParams::<S>::zeros(&self.config);
        let mut m2 = ModelParams::<S>::zeros(&self.config);
        let (b1, b2) = (S::lit(options.beta1), S::lit(options.beta2));
        let eps = S::lit(options.eps);
        let lr = S::lit(options.learning_rate);
        let mut losses = Vec::with_capacity(options.steps);

        for step in 0..options.steps {
            grads.fill_zero();
            let mut loss = 0.0;
            let inv_batch = S::one() / S::lit(options.batch_size as f64);
            for _ in 0..options.batch_size {
                if cursor == items.len() {
                    order.shuffle(&mut shuffler);
                    cursor = 0;
                }
                let item = &items[order[cursor]];
                cursor += 1;
                loss += self.accumulate_item(item, inv_batch, &mut grads)?;
            }
            loss /= options.batch_size as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            losses.push(loss);

            if let Some(max_norm) = options.clip_norm {
                let norm = grads
                    .blocks()
                    .iter()
                    .flat_map(|b| b.iter())
                    .map(|&g| g * g)
                    .sum::<S>()
                    .sqrt();
                if norm > S::lit(max_norm) {
                    let s = S::lit(max_norm) / norm;
                    for block in grads.blocks_mut() {
                        block.iter_mut().for_each(|g| *g *= s);
                    }
                }
            }

            let t = (step + 1) as i32;
            let c1 = S::one() - b1.powi(t);
            let c2 = S::one() - b2.powi(t);
            let g_blocks = grads.blocks();
            for (((p, g), m), v) in self
                .params
                .blocks_mut()
                .into_iter()
                .zip(g_blocks)
                .zip(m1.blocks_mut())
                .zip(m2.blocks_mut())
            {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        if !self.params.is_finite() {
            return Err(Error::Diverged { step: options.steps, loss: f64::NAN });
        }
        Ok(TrainReport { losses })
    }

    fn accumulate_item(&self, item: &TrainingItem, weight: S, grads: &mut ModelParams<S>) -> Result<f64> {
        let pass = self.run(&item.tokens, None, &Patch::None)?;
        let last = pass.logits.rows() - 1;
        let row = pass.logits.row(last);
        let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
        let exps: Vec<S> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: S = exps.iter().copied().sum();
        let log_total = total.ln();
        let q = S::one() / S::lit(item.answers.len() as f64);
        let mut loss = S::zero();
        for &a in &item.answers {
            loss -= q * (row[a as usize] - max - log_total);
        }
        let mut dlogits = Mat::zeros(pass.logits.rows(), pass.logits.cols());
        {
            let d = dlogits.row_mut(last);
            for (j, e) in exps.iter().enumerate() {
                d[j] = *e / total * weight;
            }
            for &a in &item.answers {
                d[a as usize] -= q * weight;
            }
        }
        self.backward(&pass, &dlogits, Some(grads));
        Ok(loss.as_f64())
    }
}
