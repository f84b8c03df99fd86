//! Distillation criteria and the weighted composite loss over I/O dictionaries.

use std::sync::Arc;

use distill_tensor::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Side};
use crate::hooks::IoDictionary;
use crate::params::Params;

/// Added inside every L2-normalization denominator.
pub const NORM_EPS: f64 = 1e-12;

/// A loss over tensors bound from the student and teacher sides.
pub trait Criterion: Send + Sync {
    fn compute(&self, student: &[Tensor], teacher: &[Tensor], targets: &[usize]) -> Result<Tensor>;

    /// Whether the default binding should feed the teacher's output.
    fn uses_teacher(&self) -> bool {
        true
    }
}

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

fn as_matrix(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        0 => Ok(t.reshape(vec![1, 1])?),
        1 => Ok(t.reshape(vec![1, t.numel()])?),
        2 => Ok(t.clone()),
        _ => Ok(t.flatten_from1()?),
    }
}

fn nth<'a>(ts: &'a [Tensor], i: usize, what: &str) -> Result<&'a Tensor> {
    ts.get(i).ok_or_else(|| Error::PreconditionViolation(format!("{what} needs at least {} bound tensor(s)", i + 1)))
}

/// Mean cross-entropy of logits (N, C) against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let z = as_matrix(logits)?;
    let [n, c] = z.dims2("cross_entropy")?;
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy targets".into(),
            expected: vec![n],
            got: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
        return Err(Error::PreconditionViolation(format!("target {bad} out of range for {c} classes")));
    }
    let onehot = Tensor::one_hot(targets, c, z.dtype())?;
    Ok(z.log_softmax()?.mul(&onehot)?.sum_all().scale(-1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over everything divided by the batch size.
    Batchmean,
    Sum,
    Mean,
}

/// `α·T²·KL(softmax(z_T/T) ‖ softmax(z_S/T)) + (1−α)·CE(z_S, y)`; the teacher is detached.
pub fn kd_loss(
    zs: &Tensor,
    zt: &Tensor,
    targets: &[usize],
    temperature: f64,
    alpha: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidTemperature(temperature));
    }
    same_shape("kd_loss", zs, zt)?;
    let zs = as_matrix(zs)?;
    let zt = as_matrix(&zt.detach())?;
    let [n, c] = zs.dims2("kd_loss")?;
    let inv_t = 1.0 / temperature;
    let log_ps = zs.scale(inv_t).log_softmax()?;
    let log_pt = zt.scale(inv_t).log_softmax()?;
    let pt = log_pt.exp();
    if cfg!(debug_assertions) {
        let p = pt.to_vec_f64();
        for row in p.chunks(c) {
            debug_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "teacher softmax row does not sum to 1");
        }
    }
    let kl_sum = pt.mul(&log_pt.sub(&log_ps)?)?.sum_all();
    let kl = match reduction {
        Reduction::Batchmean => kl_sum.scale(1.0 / n as f64),
        Reduction::Sum => kl_sum,
        Reduction::Mean => kl_sum.scale(1.0 / (n * c) as f64),
    };
    let soft = kl.scale(alpha * temperature * temperature);
    if alpha >= 1.0 {
        return Ok(soft);
    }
    let hard = cross_entropy(&zs, targets)?;
    Ok(soft.add(&hard.scale(1.0 - alpha))?)
}

/// Mean squared error over all elements.
pub fn hint_loss(hs: &Tensor, ht: &Tensor) -> Result<Tensor> {
    same_shape("hint_loss", hs, ht)?;
    Ok(hs.sub(ht)?.sqr().mean_all())
}

/// Σ_c |F_c|^q over channels, vectorized per sample: (N, C, H, W) -> (N, H·W).
pub fn attention_map(f: &Tensor, q: f64) -> Result<Tensor> {
    let (f, squeeze) = match f.rank() {
        3 => (f.reshape([&[1], f.shape()].concat())?, true),
        4 => (f.clone(), false),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "attention_map expects (N, C, H, W) or (C, H, W)".into(),
                expected: vec![0, 0, 0, 0],
                got: f.shape().to_vec(),
            })
        }
    };
    let [n, _, h, w] = f.dims4("attention_map")?;
    let mapped = if q == 2.0 { f.sqr() } else { f.abs().powf(q) };
    let a = mapped.sum_dims(&[1], false)?.reshape(vec![n, h * w])?;
    Ok(if squeeze { a.reshape(vec![h * w])? } else { a })
}

/// Row-wise L2 normalization of a (N, M) matrix with ε inside the denominator.
fn l2_normalize_rows(m: &Tensor, strict: bool, what: &str) -> Result<Tensor> {
    let sq = m.sqr().sum_dims(&[1], true)?;
    if strict && sq.to_vec_f64().iter().any(|v| *v == 0.0) {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok(m.div(&sq.affine(1.0, NORM_EPS).sqrt())?)
}

/// Per-row p-norm of a (N, M) matrix.
fn row_pnorm(d: &Tensor, p: f64) -> Result<Tensor> {
    if p == 1.0 {
        return Ok(d.abs().sum_dims(&[1], false)?);
    }
    let s = if p == 2.0 { d.sqr() } else { d.abs().powf(p) };
    // the tiny offset keeps the gradient finite where the difference vanishes
    Ok(s.sum_dims(&[1], false)?.affine(1.0, 1e-24).powf(1.0 / p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtVariant {
    NormDiff,
    Mse,
}

/// Attention-transfer loss over pairs of attention maps, each (N, M) or (M).
pub fn at_loss(variant: AtVariant, qs: &[Tensor], qt: &[Tensor], beta: f64, p: f64, strict: bool) -> Result<Tensor> {
    if qs.len() != qt.len() || qs.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "at_loss pair count".into(),
            expected: vec![qt.len()],
            got: vec![qs.len()],
        });
    }
    let mut total: Option<Tensor> = None;
    for (j, (s, t)) in qs.iter().zip(qt).enumerate() {
        same_shape(&format!("at_loss pair {j}"), s, t)?;
        let s = l2_normalize_rows(&as_matrix(s)?, strict, &format!("student attention map {j}"))?;
        let t = l2_normalize_rows(&as_matrix(&t.detach())?, strict, &format!("teacher attention map {j}"))?;
        let d = s.sub(&t)?;
        let term = match variant {
            AtVariant::Mse => d.sqr().mean_all(),
            AtVariant::NormDiff => row_pnorm(&d, p)?.mean_all(),
        };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("non-empty").scale(beta / 2.0))
}

/// Factor-transfer loss: per-sample p-norm of the difference of L2-normalized
/// factors, averaged over the batch.
pub fn ft_loss(zs: &Tensor, zt: &Tensor, p: f64, strict: bool) -> Result<Tensor> {
    same_shape("ft_loss", zs, zt)?;
    let s = l2_normalize_rows(&as_matrix(zs)?, strict, "student factor")?;
    let t = l2_normalize_rows(&as_matrix(&zt.detach())?, strict, "teacher factor")?;
    Ok(row_pnorm(&s.sub(&t)?, p)?.mean_all())
}

pub struct CrossEntropyLoss;

impl Criterion for CrossEntropyLoss {
    fn compute(&self, student: &[Tensor], _: &[Tensor], targets: &[usize]) -> Result<Tensor> {
        cross_entropy(nth(student, 0, "CrossEntropyLoss")?, targets)
    }
    fn uses_teacher(&self) -> bool {
        false
    }
}

pub struct KdLoss {
    pub temperature: f64,
    pub alpha: f64,
    pub reduction: Reduction,
}

impl KdLoss {
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["temperature", "alpha", "reduction"])?;
        let temperature = p.get_or("temperature", 1.0)?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidTemperature(temperature));
        }
        let alpha: f64 = p.get_or("alpha", 0.5)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParam {
                name: "alpha".into(),
                message: format!("must lie in [0, 1], got {alpha}"),
            });
        }
        Ok(KdLoss { temperature, alpha, reduction: p.get_or("reduction", Reduction::Batchmean)? })
    }
}

impl Criterion for KdLoss {
    fn compute(&self, student: &[Tensor], teacher: &[Tensor], targets: &[usize]) -> Result<Tensor> {
        kd_loss(
            nth(student, 0, "KDLoss")?,
            nth(teacher, 0, "KDLoss")?,
            targets,
            self.temperature,
            self.alpha,
            self.reduction,
        )
    }
}

pub struct MseLoss;

impl Criterion for MseLoss {
    fn compute(&self, student: &[Tensor], teacher: &[Tensor], _: &[usize]) -> Result<Tensor> {
        let t = nth(teacher, 0, "MSELoss")?;
        hint_loss(nth(student, 0, "MSELoss")?, t)
    }
}

pub struct AtLoss {
    pub variant: AtVariant,
    pub beta: f64,
    pub p: f64,
    /// Exponent of the channel-wise attention mapping.
    pub q: f64,
    pub strict: bool,
}

impl AtLoss {
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["variant", "beta", "p", "q", "strict"])?;
        let q: f64 = p.get_or("q", 2.0)?;
        if q < 1.0 {
            return Err(Error::InvalidParam { name: "q".into(), message: "attention exponent must be >= 1".into() });
        }
        Ok(AtLoss {
            variant: p.get_or("variant", AtVariant::Mse)?,
            beta: p.get_or("beta", 1000.0)?,
            p: p.get_or("p", 2.0)?,
            q,
            strict: p.get_or("strict", false)?,
        })
    }
}

impl Criterion for AtLoss {
    fn compute(&self, student: &[Tensor], teacher: &[Tensor], _: &[usize]) -> Result<Tensor> {
        let qs = student.iter().map(|f| attention_map(f, self.q)).collect::<Result<Vec<_>>>()?;
        let qt = teacher.iter().map(|f| attention_map(f, self.q)).collect::<Result<Vec<_>>>()?;
        at_loss(self.variant, &qs, &qt, self.beta, self.p, self.strict)
    }
}

pub struct FtLoss {
    pub p: f64,
    pub strict: bool,
}

impl Criterion for FtLoss {
    fn compute(&self, student: &[Tensor], teacher: &[Tensor], _: &[usize]) -> Result<Tensor> {
        ft_loss(nth(student, 0, "FTLoss")?, nth(teacher, 0, "FTLoss")?, self.p, self.strict)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Where a loss input comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binding {
    /// Network to read; defaults to the slot the binding appears in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Role>,
    /// Module path; `None` means the network's final output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default = "default_side")]
    pub io: Side,
    /// Positional index into a multi-tensor capture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}

fn default_side() -> Side {
    Side::Output
}

impl Binding {
    pub fn output() -> Self {
        Binding { from: None, path: None, io: Side::Output, index: None }
    }

    pub fn at(path: &str, io: Side) -> Self {
        Binding { path: Some(path.to_string()), io, ..Self::output() }
    }
}

/// Captures and final output of one network for the current batch.
pub struct NetView<'a> {
    pub io: &'a IoDictionary,
    pub output: Option<&'a Tensor>,
}

impl NetView<'_> {
    fn resolve(&self, b: &Binding, role: Role) -> Result<Tensor> {
        match &b.path {
            None => self
                .output
                .cloned()
                .ok_or_else(|| Error::PreconditionViolation(format!("{role:?} output is not available this step"))),
            Some(path) => match (b.io, b.index.unwrap_or(0)) {
                (Side::Output, _) => self.io.get(path, Side::Output),
                (Side::Input, i) => {
                    let all = self.io.get_inputs(path)?;
                    all.get(i).cloned().ok_or_else(|| Error::MissingCapture {
                        path: format!("{path}[{i}]"),
                        side: Side::Input,
                        generation: self.io.generation(),
                    })
                }
            },
        }
    }
}

/// One weighted term of the composite loss.
#[derive(Clone)]
pub struct LossTerm {
    pub name: String,
    pub criterion: Arc<dyn Criterion>,
    pub factor: f64,
    pub student: Vec<Binding>,
    pub teacher: Vec<Binding>,
}

/// `Σ_j λ_j · L_j(z_j^S, z_j^T, y)`.
#[derive(Clone, Default)]
pub struct CompositeLoss {
    pub terms: Vec<LossTerm>,
}

/// Value of the composite and of each weighted term.
pub struct LossValue {
    pub total: Tensor,
    pub terms: Vec<(String, f64)>,
}

impl CompositeLoss {
    /// Whether any term reads from `role`'s network.
    pub fn reads(&self, role: Role) -> bool {
        self.terms.iter().any(|t| {
            t.student.iter().any(|b| b.from.unwrap_or(Role::Student) == role)
                || t.teacher.iter().any(|b| b.from.unwrap_or(Role::Teacher) == role)
        })
    }

    pub fn compute(&self, student: &NetView, teacher: &NetView, targets: &[usize]) -> Result<LossValue> {
        if self.terms.is_empty() {
            return Err(Error::PreconditionViolation("composite loss has no terms".into()));
        }
        let view = |r: Role| if r == Role::Student { student } else { teacher };
        let mut total: Option<Tensor> = None;
        let mut values = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let s = term
                .student
                .iter()
                .map(|b| {
                    let r = b.from.unwrap_or(Role::Student);
                    view(r).resolve(b, r)
                })
                .collect::<Result<Vec<_>>>()?;
            // gradients never flow through the teacher slot
            let t = term
                .teacher
                .iter()
                .map(|b| {
                    let r = b.from.unwrap_or(Role::Teacher);
                    view(r).resolve(b, r).map(|x| x.detach())
                })
                .collect::<Result<Vec<_>>>()?;
            let raw = term.criterion.compute(&s, &t, targets)?;
            let raw = if raw.dtype() == DType::F64 { raw } else { raw.to_dtype(DType::F64) };
            let weighted = raw.scale(term.factor);
            let v = weighted.to_scalar()?;
            values.push((term.name.clone(), v));
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term: term.name.clone(), values });
            }
            total = Some(match total {
                None => weighted,
                Some(acc) => acc.add(&weighted)?,
            });
        }
        Ok(LossValue { total: total.expect("non-empty"), terms: values })
    }
}
