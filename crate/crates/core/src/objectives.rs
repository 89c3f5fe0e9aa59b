//! Training losses with their analytic gradients.
//!
//! Visual features are passed as one row per batch sample. Gradients are
//! returned with the same layout; text features and prototypes are frozen and
//! receive none.

use serde::{Deserialize, Serialize};

use crate::encoders::{dot, FeatureMatrix};
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;
use crate::reconstruction::IntensityImage;
use crate::representation::CropRect;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_att: f64,
    pub lambda_rep: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_att: 1.0,
            lambda_rep: 0.01,
            lambda_con: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_att", self.lambda_att),
            ("lambda_rep", self.lambda_rep),
            ("lambda_con", self.lambda_con),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to the visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLoss {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
    /// Set when the selected set was empty and the term was not evaluated.
    pub skipped: bool,
}

impl FeatureLoss {
    fn zero(v: &[Vec<f64>], skipped: bool) -> Self {
        Self {
            value: 0.0,
            grad: v.iter().map(|r| vec![0.0; r.len()]).collect(),
            skipped,
        }
    }
}

fn check_rows(v: &[Vec<f64>], dim: usize) -> Result<()> {
    if let Some(r) = v.iter().find(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "feature of dim {} where {dim} was expected",
            r.len()
        )));
    }
    Ok(())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE over the selected samples where `targets[j]` is the anchor of
/// selected sample `s[j]`; the denominator runs over the selected samples.
fn info_nce(v: &[Vec<f64>], s: &[usize], targets: &[&[f64]], tau: f64) -> FeatureLoss {
    if s.is_empty() {
        return FeatureLoss::zero(v, true);
    }
    let mut out = FeatureLoss::zero(v, false);
    if s.len() == 1 {
        return out;
    }
    for (a, &i) in s.iter().enumerate() {
        let logits: Vec<f64> = targets.iter().map(|t| dot(&v[i], t) / tau).collect();
        let lse = log_sum_exp(&logits);
        out.value += lse - logits[a];
        for (b, t) in targets.iter().enumerate() {
            let w = (logits[b] - lse).exp() - if a == b { 1.0 } else { 0.0 };
            for (g, tv) in out.grad[i].iter_mut().zip(t.iter()) {
                *g += w * tv / tau;
            }
        }
    }
    out
}

fn check_selection(v: &[Vec<f64>], pseudo: &[usize], s_rds: &[usize]) -> Result<()> {
    if pseudo.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pseudo-labels for {} features",
            pseudo.len(),
            v.len()
        )));
    }
    if let Some(&i) = s_rds.iter().find(|&&i| i >= v.len()) {
        return Err(Error::IndexOutOfRange {
            index: i,
            limit: v.len(),
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok(())
}

/// Pulls each selected feature toward the text feature of its pseudo-label.
pub fn attraction_loss(
    v: &[Vec<f64>],
    text: &FeatureMatrix,
    pseudo: &[usize],
    s_rds: &[usize],
    tau: f64,
) -> Result<FeatureLoss> {
    check_tau(tau)?;
    check_rows(v, text.dim())?;
    check_selection(v, pseudo, s_rds)?;
    let mut targets = Vec::with_capacity(s_rds.len());
    for &i in s_rds {
        let c = pseudo[i];
        if c >= text.rows() {
            return Err(Error::IndexOutOfRange {
                index: c,
                limit: text.rows(),
            });
        }
        targets.push(text.row(c));
    }
    Ok(info_nce(v, s_rds, &targets, tau))
}

/// As [`attraction_loss`], with each text feature replaced by the closest
/// prototype of the pseudo-category. `bank` categories are indexed like the
/// pseudo-labels.
pub fn prototype_attraction_loss(
    v: &[Vec<f64>],
    bank: &PrototypeBank,
    pseudo: &[usize],
    s_rds: &[usize],
    tau: f64,
) -> Result<FeatureLoss> {
    check_tau(tau)?;
    check_rows(v, bank.dim())?;
    check_selection(v, pseudo, s_rds)?;
    let mut targets = Vec::with_capacity(s_rds.len());
    for &i in s_rds {
        let c = pseudo[i];
        let l = bank.assign_index(&v[i], c)?;
        targets.push(bank.prototype(c, l));
    }
    Ok(info_nce(v, s_rds, &targets, tau))
}

/// Category-agnostic spreading term over the whole batch.
pub fn repulsion_loss(v: &[Vec<f64>], tau: f64) -> Result<FeatureLoss> {
    check_tau(tau)?;
    let dim = v.first().map_or(0, Vec::len);
    check_rows(v, dim)?;
    let b = v.len();
    let mut out = FeatureLoss::zero(v, false);
    if b <= 1 {
        return Ok(out);
    }
    // w[i][j] = exp(s_ij) / (1 + sum_k exp(s_ik)), j != i
    let mut w = vec![vec![0.0; b]; b];
    for i in 0..b {
        let mut logits = Vec::with_capacity(b);
        logits.push(0.0);
        for j in (0..b).filter(|&j| j != i) {
            logits.push(dot(&v[i], &v[j]) / tau);
        }
        let lse = log_sum_exp(&logits);
        out.value += lse;
        for (n, j) in (0..b).filter(|&j| j != i).enumerate() {
            w[i][j] = (logits[n + 1] - lse).exp();
        }
    }
    for (i, grad) in out.grad.iter_mut().enumerate() {
        for j in (0..b).filter(|&j| j != i) {
            let c = (w[i][j] + w[j][i]) / tau;
            for (g, x) in grad.iter_mut().zip(&v[j]) {
                *g += c * x;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// Gradient with respect to the local reconstruction.
    pub grad_local: Vec<f64>,
    /// Gradient with respect to the full global reconstruction; zero outside
    /// the crop.
    pub grad_global: Vec<f64>,
}

/// Mean absolute difference between the reconstruction of a crop and the
/// same crop of the full reconstruction.
pub fn consistency_loss(
    local: &IntensityImage,
    global: &IntensityImage,
    rect: &CropRect,
) -> Result<ConsistencyLoss> {
    rect.validate(global.height(), global.width())?;
    if local.height() != rect.size || local.width() != rect.size {
        return Err(Error::ShapeMismatch(format!(
            "local reconstruction is {}x{}, crop is {}",
            local.height(),
            local.width(),
            rect.size
        )));
    }
    let n = (rect.size * rect.size) as f64;
    let mut value = 0.0;
    let mut grad_local = vec![0.0; local.data().len()];
    let mut grad_global = vec![0.0; global.data().len()];
    for y in 0..rect.size {
        for x in 0..rect.size {
            let li = y * rect.size + x;
            let gi = (rect.top + y) * global.width() + rect.left + x;
            let d = local.data()[li] - global.data()[gi];
            value += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad_local[li] = s / n;
            grad_global[gi] = -s / n;
        }
    }
    Ok(ConsistencyLoss {
        value: value / n,
        grad_local,
        grad_global,
    })
}

pub fn total_loss(att: f64, rep: f64, con: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("attraction", att),
        ("repulsion", rep),
        ("consistency", con),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss ({v})")));
        }
    }
    Ok(w.lambda_att * att + w.lambda_rep * rep + w.lambda_con * con)
}
