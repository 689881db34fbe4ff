//! Training configuration, the optimization loop, evaluation and the
//! whole-model gradient check.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capsule::{CouplingMode, PackingMode, SquashVariant};
use crate::checkpoint::CheckpointError;
use crate::gradcheck::relative_error;
use crate::mnist::{build_batch, Augment, BatchPlan, Dataset, IdxError};
use crate::model::{predictions, Arch, Model, ModelSpec, ParamGroup};
use crate::objectives::{one_hot, DataTerm, MarginParams, ObjectiveConfig};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] IdxError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Flat training configuration; every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub packing: PackingMode,
    pub squash: SquashVariant,
    pub coupling: CouplingMode,
    pub reconstruction: bool,
    pub data_term: DataTerm,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub reconstruction_weight: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
    pub capsule_relu_tau: f64,
    pub augment: bool,
    pub train_limit: usize,
    pub test_limit: usize,
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        let obj = ObjectiveConfig::default();
        TrainConfig {
            arch: Arch::FcGcaps,
            packing: PackingMode::Across,
            squash: SquashVariant::Ratio,
            coupling: CouplingMode::Raw,
            reconstruction: false,
            data_term: DataTerm::Margin,
            optimizer: opt.kind,
            lr: opt.lr,
            momentum: opt.momentum,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            batch_size: 32,
            epochs: 3,
            seed: 1,
            weight_decay: obj.weight_decay,
            reconstruction_weight: obj.reconstruction_weight,
            m_plus: obj.margin.m_plus,
            m_minus: obj.margin.m_minus,
            lambda_down: obj.margin.lambda_down,
            capsule_relu_tau: 0.2,
            augment: false,
            train_limit: 0,
            test_limit: 0,
            record_time: true,
        }
    }
}

/// One line of documentation per configuration key.
pub const CONFIG_DOCS: &[(&str, &str)] = &[
    ("arch", "fc_gcaps | conv_gcaps | multi_layer | tiny_fc | tiny_conv | tiny_multi"),
    ("packing", "across | within: how primary feature maps become capsules"),
    ("squash", "ratio | exp"),
    ("coupling", "raw | softmax: use c directly or softmax it over parents"),
    ("reconstruction", "attach the masked-capsule decoder and its loss"),
    ("data_term", "margin | squared_error"),
    ("optimizer", "adam | sgd"),
    ("lr", "learning rate, >= 0"),
    ("momentum", "sgd momentum in [0, 1)"),
    ("beta1", "adam first-moment decay"),
    ("beta2", "adam second-moment decay"),
    ("adam_eps", "adam denominator offset"),
    ("batch_size", "samples per step, >= 1"),
    ("epochs", "passes over the training set, >= 1"),
    ("seed", "single source of all randomness"),
    ("weight_decay", "L2 coefficient on every W and c"),
    ("reconstruction_weight", "scale of the reconstruction loss"),
    ("m_plus", "margin for the true class"),
    ("m_minus", "margin for the other classes"),
    ("lambda_down", "down-weight of the other-class term"),
    ("capsule_relu_tau", "capsule-relu norm threshold"),
    ("augment", "random shifts of up to 2 pixels"),
    ("train_limit", "use only the first N training samples (0 = all)"),
    ("test_limit", "use only the first N test samples (0 = all)"),
    ("record_time", "write wall seconds to the metrics (false writes 0)"),
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.capsule_relu_tau < 0.0 {
            return bad("capsule_relu_tau must be non-negative");
        }
        self.optimizer_config()
            .validate()
            .and_then(|_| self.objective().validate())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.model_spec()
            .parameter_shapes()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weight_decay: self.weight_decay,
            reconstruction_weight: self.reconstruction_weight,
            reconstruction_enabled: self.reconstruction,
            data_term: self.data_term,
            margin: MarginParams {
                m_plus: self.m_plus,
                m_minus: self.m_minus,
                lambda_down: self.lambda_down,
            },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::preset(self.arch);
        spec.packing = self.packing;
        spec.squash = self.squash;
        spec.coupling = self.coupling;
        spec.relu_tau = self.capsule_relu_tau;
        spec.reconstruction = self.reconstruction;
        spec.objective = self.objective();
        spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_error_pct: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,test_error_pct,seconds";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.3}",
            self.epoch, self.train_loss, self.test_error_pct, self.seconds
        )
    }
}

/// Owns the model, optimizer state and the single RNG stream.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    /// Per-batch losses of the most recent epoch.
    pub batch_losses: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model_spec(), &mut rng)?;
        let optimizer = Optimizer::new(config.optimizer_config())?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            rng,
            epoch: 0,
            batch_losses: Vec::new(),
        })
    }

    /// One pass over `train` followed by evaluation on `test`.
    pub fn train_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<MetricsRow, TrainError> {
        let classes = check_data(&self.model, train)?;
        let start = Instant::now();
        let plan = BatchPlan::new(train.len(), self.config.batch_size, self.rng.next_u64())?;
        let augment = self.config.augment.then_some(Augment { max_shift: 2 });
        self.batch_losses.clear();
        let mut weighted = 0.0;
        for (b, idx) in plan.order.chunks(plan.batch_size).enumerate() {
            let batch = build_batch::<f32>(train, idx, classes, augment.map(|a| (a, &mut self.rng)));
            let tape = Tape::new();
            let fwd = self.model.forward(&tape, &batch.images, &batch.labels)?;
            let loss = fwd.loss.value().item().as_f64();
            if !loss.is_finite() {
                return Err(TrainError::Numeric(format!(
                    "loss is {loss} at epoch {} batch {}",
                    self.epoch + 1,
                    b + 1
                )));
            }
            let mut grads = tape.backward(fwd.loss)?;
            self.model.collect_grads(&mut grads, &fwd.params);
            drop(tape);
            self.optimizer.step(&mut self.model.params)?;
            self.batch_losses.push(loss);
            weighted += loss * idx.len() as f64;
        }
        self.epoch += 1;
        let test_error_pct = evaluate(&self.model, test, self.config.batch_size)?;
        Ok(MetricsRow {
            epoch: self.epoch,
            train_loss: weighted / train.len() as f64,
            test_error_pct,
            seconds: if self.config.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    /// Runs every configured epoch, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &MetricsRow) -> Result<(), TrainError>,
    ) -> Result<Vec<MetricsRow>, TrainError> {
        let mut rows = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let row = self.train_epoch(train, test)?;
            on_epoch(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Renders metrics as CSV including the header.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Image shape and label range must suit the model; returns its class count.
fn check_data<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<usize, TrainError> {
    if data.image_shape() != model.spec.input {
        return Err(TrainError::Data(IdxError::DimMismatch(format!(
            "{} expects {:?} images, data has {:?}",
            model.spec.arch.name(),
            model.spec.input,
            data.image_shape()
        ))));
    }
    let (classes, _) = model.spec.class_capsules()?;
    if let Some(&bad) = data.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(TrainError::Data(IdxError::DimMismatch(format!(
            "label {bad} exceeds the model's {classes} class capsules"
        ))));
    }
    Ok(classes)
}

/// `100 · wrong / N` where the prediction is the longest class capsule.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64, TrainError> {
    let classes = check_data(model, data)?;
    let plan = BatchPlan::sequential(data.len(), batch_size)?;
    let mut wrong = 0usize;
    for idx in plan.order.chunks(batch_size) {
        let batch = build_batch::<T>(data, idx, classes, None);
        let norms = model.predict_norms(&batch.images)?;
        wrong += predictions(&norms)
            .iter()
            .zip(&batch.classes)
            .filter(|(p, c)| p != c)
            .count();
    }
    Ok(error_rate(wrong, data.len()))
}

pub fn error_rate(wrong: usize, total: usize) -> f64 {
    100.0 * wrong as f64 / total as f64
}

/// Most parameters the whole-model gradient check will accept.
pub const GRADCHECK_MAX_PARAMS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `(name, max relative error)` per checked parameter.
    pub per_param: Vec<(String, f64)>,
    pub max_error: f64,
    pub tolerance: f64,
    /// Names of parameters whose error exceeds the tolerance.
    pub failures: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the tape gradient of the full objective with central
/// differences for every trainable scalar. Frozen parameters are skipped.
pub fn gradcheck_model(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &Tensor<f64>,
    tolerance: f64,
    epsilon: f64,
) -> Result<GradcheckReport, TrainError> {
    let trainable: usize = model.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum();
    if trainable > GRADCHECK_MAX_PARAMS {
        return Err(TrainError::Config(format!(
            "gradient check needs at most {GRADCHECK_MAX_PARAMS} trainable parameters, model has {trainable}"
        )));
    }
    let tape = Tape::new();
    let fwd = model.forward(&tape, images, labels)?;
    let grads = tape.backward(fwd.loss)?;
    let loss_at = |m: &Model<f64>| -> Result<f64, TrainError> {
        let t = Tape::new();
        Ok(m.forward(&t, images, labels)?.loss.value().item())
    };
    let mut probe = model.clone();
    let mut per_param = Vec::new();
    for (k, p) in model.params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let analytic = grads
            .get(fwd.params[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut worst = 0.0f64;
        for i in 0..p.value.numel() {
            let orig = p.value.data()[i];
            probe.params[k].value.data_mut()[i] = orig + epsilon;
            let plus = loss_at(&probe)?;
            probe.params[k].value.data_mut()[i] = orig - epsilon;
            let minus = loss_at(&probe)?;
            probe.params[k].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        per_param.push((p.name.clone(), worst));
    }
    let max_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failures = per_param
        .iter()
        .filter(|(_, e)| !(*e < tolerance))
        .map(|(n, _)| n.clone())
        .collect();
    Ok(GradcheckReport {
        per_param,
        max_error,
        tolerance,
        failures,
    })
}

/// A tiny double-precision model with a random batch, arranged so every
/// objective term and every gate is active: reconstruction on, positive
/// weight decay, and every parameter redrawn at unit scale so capsule-relu
/// gates open and no relu input sits on its kink.
pub fn gradcheck_fixture(arch: Arch, seed: u64) -> Result<(Model<f64>, Tensor<f64>, Tensor<f64>), TrainError> {
    let config = TrainConfig {
        arch,
        reconstruction: true,
        weight_decay: 0.01,
        reconstruction_weight: 0.05,
        seed,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(config.model_spec(), &mut rng)?;
    for p in &mut model.params {
        let (lo, hi) = match p.group {
            ParamGroup::Coupling => (0.2, 1.0),
            ParamGroup::Decoder => (-0.5, 0.5),
            _ => (-1.0, 1.0),
        };
        p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(lo..hi));
    }
    let (classes, _) = model.spec.class_capsules()?;
    let batch = 2;
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.spec.input);
    let images = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Ok((model, images, one_hot(&labels, classes)))
}
