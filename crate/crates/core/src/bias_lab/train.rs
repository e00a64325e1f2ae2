use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Dataset, TinyModel};
use super::{BiasLabError, Result};
use crate::analysis::{LossPoint, LossTrace};
use crate::dispersal::{random_split, Corpus};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum {
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_coeff: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            l2_coeff: 0.0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BiasLabError::Invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return bad(format!("l2 coefficient must be non-negative, got {}", self.l2_coeff));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("momentum must lie in [0, 1), got {beta}"));
            }
        }
        Ok(())
    }
}

/// Mini-batch trainer minimizing mean cross-entropy plus `l2_coeff * |theta|^2`.
///
/// Optimizer state and the epoch counter persist across calls, so training on
/// several portions in turn behaves like one continuous run.
pub struct Trainer {
    cfg: TrainConfig,
    velocity: Option<TinyModel>,
    epochs_done: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: None,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Runs `epochs` passes over `data`, reshuffling with a fresh seeded stream
    /// each epoch.
    pub fn run(&mut self, model: &mut TinyModel, data: &Dataset, epochs: usize) -> Result<()> {
        if data.d != model.input_dim() {
            return Err(BiasLabError::DimensionMismatch {
                id: data.ids.first().cloned().unwrap_or_default(),
                got: data.d,
                expected: model.input_dim(),
            });
        }
        let mut grad = model.zeroed();
        let mut scratch = model.scratch();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.sort_unstable();
            order.shuffle(&mut rng::stream(rng::derive(self.cfg.seed, "epoch", self.epochs_done)));
            self.epochs_done += 1;
            for batch in order.chunks(self.cfg.batch_size) {
                grad.params_mut()
                    .into_iter()
                    .for_each(|p| p.iter_mut().for_each(|v| *v = 0.0));
                for &i in batch {
                    model.accumulate_grad(data.row(i), data.y[i], &mut grad, &mut scratch);
                }
                self.step(model, &mut grad, batch.len());
            }
        }
        Ok(())
    }

    fn step(&mut self, model: &mut TinyModel, grad: &mut TinyModel, batch: usize) {
        let inv = 1.0 / batch as f64;
        let l2 = 2.0 * self.cfg.l2_coeff;
        let lr = self.cfg.learning_rate;
        for (g, p) in grad.params_mut().into_iter().zip(model.params_mut()) {
            g.iter_mut().zip(p.iter()).for_each(|(g, p)| *g = *g * inv + l2 * p);
        }
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                for (g, p) in grad.params_mut().into_iter().zip(model.params_mut()) {
                    p.iter_mut().zip(g.iter()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Momentum { beta } => {
                let v = self.velocity.get_or_insert_with(|| model.zeroed());
                let triples = grad
                    .params_mut()
                    .into_iter()
                    .zip(v.params_mut())
                    .zip(model.params_mut());
                for ((g, v), p) in triples {
                    for ((g, v), p) in g.iter().zip(v.iter_mut()).zip(p.iter_mut()) {
                        *v = beta * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
        }
    }
}

fn record(label: impl Into<String>, model: &TinyModel, train: &Dataset, val: &Dataset) -> LossPoint {
    let (mean_train_loss, per_class_train_loss) = train.losses(model);
    let (mean_val_loss, per_class_val_loss) = val.losses(model);
    LossPoint {
        label: label.into(),
        mean_train_loss,
        mean_val_loss,
        per_class_train_loss,
        per_class_val_loss,
    }
}

/// Trains a copy of `init` on `data`; the trace records train/val losses at the
/// start and after every epoch.
pub fn train_submodel(
    init: &TinyModel,
    data: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
) -> Result<(TinyModel, LossTrace)> {
    let train = Dataset::for_model(data, init)?;
    let val = Dataset::for_model(val, init)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut model = init.clone();
    let mut trace = LossTrace::default();
    trace.checkpoints.push(record("start", &model, &train, &val));
    for e in 1..=cfg.epochs {
        trainer.run(&mut model, &train, 1)?;
        trace
            .checkpoints
            .push(record(format!("epoch {e}"), &model, &train, &val));
    }
    Ok((model, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotConfig {
    /// Number of equal random portions the training data is split into.
    pub portions: usize,
    /// How many portions are trained on, in order.
    pub trained: usize,
    pub split_seed: u64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            portions: 10,
            trained: 9,
            split_seed: 0,
        }
    }
}

/// Sequential training over random portions of `data`.
///
/// The data is split into `portions` random parts and the model is trained on
/// the first `trained` of them one after another, `cfg.epochs` epochs each, with
/// optimizer state carried over. Losses are recorded at the start and after
/// every portion; the train loss is measured on the union of the trained
/// portions, the val loss on `val`.
pub fn pilot_study(
    init: &TinyModel,
    data: &Corpus,
    val: &Corpus,
    cfg: &TrainConfig,
    pilot: &PilotConfig,
) -> Result<(TinyModel, LossTrace)> {
    if pilot.trained == 0 || pilot.trained > pilot.portions {
        return Err(BiasLabError::Invalid(format!(
            "cannot train on {} of {} portions",
            pilot.trained, pilot.portions
        )));
    }
    let split = random_split(data, pilot.portions, pilot.split_seed)?;
    let parts = data.partition(&split)?;
    let parts = &parts[..pilot.trained];
    let union = Dataset::for_model(&Corpus::concat(parts)?, init)?;
    let val = Dataset::for_model(val, init)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut model = init.clone();
    let mut trace = LossTrace::default();
    trace.checkpoints.push(record("start", &model, &union, &val));
    for (i, part) in parts.iter().enumerate() {
        let ds = Dataset::for_model(part, init)?;
        trainer.run(&mut model, &ds, cfg.epochs)?;
        trace
            .checkpoints
            .push(record(format!("portion {}", i + 1), &model, &union, &val));
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_lab::Layout;
    use crate::dispersal::InstructionRecord;

    fn corpus(rows: &[(Vec<f32>, usize)]) -> Corpus {
        rows.iter()
            .enumerate()
            .map(|(i, (f, y))| {
                let mut r = InstructionRecord::new(format!("r{i}"));
                r.features = Some(f.clone());
                r.label = Some(*y);
                r
            })
            .collect()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = corpus(&[(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)]);
        let init = TinyModel::init(Layout::Mlp { hidden: 3 }, 2, 2, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (m, trace) = train_submodel(&init, &data, &data, &cfg).unwrap();
        assert_eq!(m, init);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                l2_coeff: -1.0,
                ..Default::default()
            },
            TrainConfig {
                optimizer: Optimizer::Momentum { beta: 1.0 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let json = r#"{"optimizer":{"momentum":{"beta":0.9}},"epochs":5}"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.optimizer, Optimizer::Momentum { beta: 0.9 });
        assert_eq!(cfg.learning_rate, 0.1);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let data = corpus(&[(vec![1.0, 0.0, 2.0], 0)]);
        let init = TinyModel::zeros(Layout::Linear, 2, 2).unwrap();
        let err = train_submodel(&init, &data, &data, &TrainConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            BiasLabError::DimensionMismatch {
                got: 3,
                expected: 2,
                ..
            }
        ));
    }

    #[test]
    fn pilot_records_each_portion() {
        let rows: Vec<_> = (0..40).map(|i| (vec![(i % 2) as f32, 1.0], i % 2)).collect();
        let data = corpus(&rows);
        let init = TinyModel::zeros(Layout::Linear, 2, 2).unwrap();
        let pilot = PilotConfig::default();
        let (_, trace) = pilot_study(&init, &data, &data, &TrainConfig::default(), &pilot).unwrap();
        assert_eq!(trace.len(), 10);
        assert_eq!(trace.checkpoints[9].label, "portion 9");
        let bad = PilotConfig { trained: 11, ..pilot };
        assert!(pilot_study(&init, &data, &data, &TrainConfig::default(), &bad).is_err());
    }
}
