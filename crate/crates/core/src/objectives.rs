//! Margin loss, reconstruction, L2 regularization and the total objective.

use serde::{Deserialize, Serialize};

use crate::capsule::Capsules;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m_plus > 0.0
            && self.m_plus < 1.0
            && self.m_minus > 0.0
            && self.m_minus < self.m_plus
            && self.lambda_down >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "margin_loss",
                reason: format!("need 0 < m- < m+ < 1 and lambda >= 0, got {self:?}"),
            })
        }
    }
}

/// Which data term drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataTerm {
    Margin,
    /// `½‖h − y‖²` on capsule lengths against one-hot targets.
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weight_decay: f64,
    pub reconstruction_weight: f64,
    pub reconstruction_enabled: bool,
    pub data_term: DataTerm,
    pub margin: MarginParams,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            weight_decay: 0.0,
            reconstruction_weight: 0.0005,
            reconstruction_enabled: false,
            data_term: DataTerm::Margin,
            margin: MarginParams::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if self.weight_decay < 0.0 || self.reconstruction_weight < 0.0 {
            return Err(TensorError::Invalid {
                op: "objective",
                reason: "weights must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Checks that `labels` is `(batch, classes)` with exactly one 1 per row.
pub fn check_one_hot<T: Scalar>(labels: &Tensor<T>, classes: usize) -> Result<()> {
    let bad = |reason: String| TensorError::Invalid {
        op: "labels",
        reason,
    };
    if labels.rank() != 2 || labels.shape()[1] != classes {
        return Err(bad(format!(
            "expected (batch, {classes}) one-hot labels, got {:?}",
            labels.shape()
        )));
    }
    for (r, row) in labels.data().chunks(classes).enumerate() {
        let ones = row.iter().filter(|&&x| x == T::one()).count();
        let zeros = row.iter().filter(|&&x| x == T::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(bad(format!("row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// One-hot encodes class indices as `(len, classes)`.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len().max(1), classes]);
    for (r, &l) in labels.iter().enumerate() {
        t.data_mut()[r * classes + l] = T::one();
    }
    t
}

/// `max(0, x)` that lets NaN through.
fn hinge<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        T::zero()
    } else {
        x
    }
}

/// Batch mean of `Σ_k T_k·max(0, m⁺−‖v_k‖)² + λ(1−T_k)·max(0, ‖v_k‖−m⁻)²`.
pub fn margin_loss<'t, T: Scalar>(
    norms: Var<'t, T>,
    labels: &Tensor<T>,
    p: &MarginParams,
) -> Result<Var<'t, T>> {
    p.validate()?;
    let shape = norms.shape();
    if shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "margin_loss",
            reason: format!("norms must be (batch, classes), got {shape:?}"),
        });
    }
    let (batch, k) = (shape[0], shape[1]);
    check_one_hot(labels, k)?;
    let nv = norms.value();
    let (mp, mm, lam) = (T::lit(p.m_plus), T::lit(p.m_minus), T::lit(p.lambda_down));
    let zero = T::zero();
    let mut total = zero;
    for (n, t) in nv.data().iter().zip(labels.data()) {
        let up = hinge(mp - *n);
        let down = hinge(*n - mm);
        total += *t * up * up + lam * (T::one() - *t) * down * down;
    }
    let inv_b = T::one() / T::from_usize(batch).expect("batch");
    let labels = labels.clone();
    Ok(norms.tape().custom(
        OpKind::MarginLoss,
        Tensor::scalar(total * inv_b),
        &[norms],
        Box::new(move |g, _| {
            let scale = g.item() * inv_b;
            let two = T::lit(2.0);
            let d = nv
                .data()
                .iter()
                .zip(labels.data())
                .map(|(&n, &t)| {
                    let up = hinge(mp - n);
                    let down = hinge(n - mm);
                    scale * (-two * t * up + two * lam * (T::one() - t) * down)
                })
                .collect();
            vec![Some(Tensor::from_parts(nv.shape().to_vec(), d))]
        }),
    ))
}

/// Batch mean of `½‖h − y‖²`.
pub fn squared_error_loss<'t, T: Scalar>(h: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let batch = h.shape().first().copied().unwrap_or(1);
    let y = h.tape().constant(targets.clone());
    let half_mean = T::lit(0.5) / T::from_usize(batch).expect("batch");
    Ok(h.sub(y)?.sum_squares().scale(half_mean))
}

/// Fully-connected `in → h1 → h2 → out` decoder with relu, relu, sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
}

impl DecoderShape {
    pub fn standard(input: usize, output: usize) -> Self {
        DecoderShape {
            input,
            hidden: [512, 1024],
            output,
        }
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layers(&self) -> [(usize, usize); 3] {
        [
            (self.input, self.hidden[0]),
            (self.hidden[0], self.hidden[1]),
            (self.hidden[1], self.output),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| (i + 1) * o).sum()
    }
}

/// Tape handles to the decoder's `(weight (in,out), bias (out))` pairs.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'t, T: Scalar> {
    pub layers: [(Var<'t, T>, Var<'t, T>); 3],
}

impl<'t, T: Scalar> Decoder<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [(w1, b1), (w2, b2), (w3, b3)] = self.layers;
        let h = x.matmul(w1)?.add_bias(b1)?.relu();
        let h = h.matmul(w2)?.add_bias(b2)?.relu();
        Ok(h.matmul(w3)?.add_bias(b3)?.sigmoid())
    }
}

/// Masks every capsule but the labelled one, decodes, and returns the batch
/// mean of the summed squared pixel error.
pub fn reconstruction_loss<'t, T: Scalar>(
    v: &Capsules<'t, T>,
    labels: &Tensor<T>,
    images: &Tensor<T>,
    decoder: &Decoder<'t, T>,
) -> Result<Var<'t, T>> {
    let (batch, k, len) = (v.batch(), v.num_capsules(), v.capsule_len());
    check_one_hot(labels, k)?;
    let pixels = images.numel() / batch;
    let tape = v.var.tape();
    let mut mask = Tensor::zeros(&[batch, k, len]);
    for (dst, &t) in mask.data_mut().chunks_mut(len).zip(labels.data()) {
        dst.iter_mut().for_each(|m| *m = t);
    }
    let flat = v.var.reshape(&[batch, k, len])?;
    let masked = flat.mul(tape.constant(mask))?.reshape(&[batch, k * len])?;
    let decoded = decoder.forward(masked)?;
    let target = tape.constant(images.reshape(&[batch, pixels])?);
    let inv_b = T::one() / T::from_usize(batch).expect("batch");
    Ok(decoded.sub(target)?.sum_squares().scale(inv_b))
}

/// `(weight_decay/2) · Σ p²` over the given transformation and coupling
/// parameters.
pub fn l2_regularization<'t, T: Scalar>(
    tape: &'t Tape<T>,
    params: &[Var<'t, T>],
    weight_decay: f64,
) -> Result<Var<'t, T>> {
    if weight_decay < 0.0 {
        return Err(TensorError::Invalid {
            op: "l2_regularization",
            reason: "weight decay must be non-negative".into(),
        });
    }
    let mut acc = tape.constant(Tensor::scalar(T::zero()));
    for p in params {
        acc = acc.add(p.sum_squares())?;
    }
    Ok(acc.scale(T::lit(weight_decay / 2.0)))
}

/// `data + reconstruction_weight·reconstruction·[enabled] + l2`.
pub fn total_objective<'t, T: Scalar>(
    data: Var<'t, T>,
    reconstruction: Option<Var<'t, T>>,
    l2: Var<'t, T>,
    cfg: &ObjectiveConfig,
) -> Result<Var<'t, T>> {
    let mut total = data;
    if cfg.reconstruction_enabled {
        if let Some(r) = reconstruction {
            total = total.add(r.scale(T::lit(cfg.reconstruction_weight)))?;
        }
    }
    total.add(l2)
}
