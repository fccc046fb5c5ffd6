//! The pretraining objective: symmetric temperature-scaled InfoNCE between
//! images and their report text, the same loss between two examinations of
//! one patient, masked-patch reconstruction, and their weighted sum.
//!
//! Everything here is plain `f64` arithmetic with hand-derived gradients so
//! the terms can be checked against finite differences independently of the
//! tensor engine that trains with them.
//!
//! For a batch of `N` pairs `(a_i, b_i)` of unit vectors and temperature `τ`,
//! with logits `z_ij = clamp(a_i · b_j, -1, 1) / τ`,
//!
//! ```text
//! L = ½ · ( -1/N Σ_i log softmax_j(z_i·)_i  -  1/N Σ_j log softmax_i(z_·j)_j )
//! ```
//!
//! i.e. the average of the a→b and b→a cross-entropies with positives on the
//! diagonal. Only in-batch negatives are used.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the three terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub img_text: f64,
    pub img_img: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            img_text: 0.75,
            img_img: 0.75,
            recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(img_text: f64, img_img: f64, recon: f64) -> Result<Self> {
        let w = Self {
            img_text,
            img_img,
            recon,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.img_text, self.img_img, self.recon];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("loss weights are all zero".into()));
        }
        Ok(())
    }
}

/// Per-step loss record. A term with no eligible pairs is reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_img_text: f64,
    pub l_img_img: f64,
    pub l_recon: f64,
    pub total: f64,
    pub n_text_pairs: usize,
    pub n_img_pairs: usize,
    pub n_masked: usize,
}

/// Value of a contrastive term and its gradients.
#[derive(Clone, Debug)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_tau: f64,
}

fn check_pair_inputs(a: &ArrayView2<f64>, b: &ArrayView2<f64>, tau: f64) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(
            "contrastive loss",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    if a.nrows() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            a.nrows()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Numeric(format!("temperature must be positive, got {tau}")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding entry".into()));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE with positives on the diagonal, plus gradients with
/// respect to both embedding matrices and `τ`.
pub fn symmetric_info_nce(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    tau: f64,
) -> Result<ContrastiveGrad> {
    check_pair_inputs(&a, &b, tau)?;
    let n = a.nrows();
    let sims = a.dot(&b.t());
    let clamped = sims.mapv(|s| s.clamp(-1.0, 1.0));
    let logits = &clamped / tau;

    // dL/dz accumulates (softmax - onehot) / (2N) from each direction.
    let mut grad_logits = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[i];
        for j in 0..n {
            grad_logits[[i, j]] += (row[j] - lse).exp();
        }
        grad_logits[[i, i]] -= 1.0;
    }
    for j in 0..n {
        let col = logits.column(j);
        let lse = log_sum_exp(col.iter().copied());
        loss += lse - col[j];
        for i in 0..n {
            grad_logits[[i, j]] += (col[i] - lse).exp();
        }
        grad_logits[[j, j]] -= 1.0;
    }
    let scale = 1.0 / (2.0 * n as f64);
    loss *= scale;
    grad_logits *= scale;

    let grad_tau = -(&grad_logits * &logits).sum() / tau;
    let mut grad_sims = &grad_logits / tau;
    Zip::from(&mut grad_sims).and(&sims).for_each(|g, &s| {
        if !(-1.0..=1.0).contains(&s) {
            *g = 0.0;
        }
    });
    let grad_a = grad_sims.dot(&b);
    let grad_b = grad_sims.t().dot(&a);
    Ok(ContrastiveGrad {
        loss,
        grad_a,
        grad_b,
        grad_tau,
    })
}

/// Image-text term: row `i` of `img` and `txt` belong to the same sample.
pub fn image_text_contrastive(img: ArrayView2<f64>, txt: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(symmetric_info_nce(img, txt, tau)?.loss)
}

/// Image-image term over same-patient cross-modality pairs; the negatives
/// for row `i` of `a` are the other rows of `b` and vice versa.
pub fn image_image_contrastive(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    Ok(symmetric_info_nce(a, b, tau)?.loss)
}

/// Which patches contribute to the reconstruction error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Only masked patches, as in masked autoencoders.
    #[default]
    MaskedOnly,
    /// Every patch of the image.
    WholeImage,
}

/// Reconstruction error with its gradient.
#[derive(Clone, Debug)]
pub struct ReconGrad {
    pub loss: f64,
    pub grad: Array3<f64>,
    pub n_masked: usize,
}

/// Mean squared error over the elements of the selected patches, computed
/// per image and then averaged over the images that have any selected patch.
///
/// `reconstructed` and `original` are `batch x patches x patch_len`; `mask`
/// is `batch x patches` with `true` for masked patches. Returns 0 when no
/// patch is selected.
pub fn masked_reconstruction(
    reconstructed: ArrayView3<f64>,
    original: ArrayView3<f64>,
    mask: ArrayView2<bool>,
    target: ReconTarget,
) -> Result<ReconGrad> {
    if reconstructed.dim() != original.dim() {
        return Err(Error::dimension(
            "reconstruction loss",
            format!("{:?}", original.dim()),
            format!("{:?}", reconstructed.dim()),
        ));
    }
    let (batch, patches, len) = original.dim();
    if mask.dim() != (batch, patches) {
        return Err(Error::dimension(
            "reconstruction mask",
            format!("{:?}", (batch, patches)),
            format!("{:?}", mask.dim()),
        ));
    }
    if reconstructed.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reconstruction".into()));
    }
    let selected = |b: usize, p: usize| match target {
        ReconTarget::MaskedOnly => mask[[b, p]],
        ReconTarget::WholeImage => true,
    };
    let n_masked = mask.iter().filter(|m| **m).count();
    let mut grad = Array3::<f64>::zeros((batch, patches, len));
    let counts: Vec<usize> = (0..batch)
        .map(|b| (0..patches).filter(|&p| selected(b, p)).count())
        .collect();
    let contributing = counts.iter().filter(|&&c| c > 0).count();
    if contributing == 0 || len == 0 {
        return Ok(ReconGrad {
            loss: 0.0,
            grad,
            n_masked,
        });
    }
    let mut loss = 0.0;
    for b in 0..batch {
        if counts[b] == 0 {
            continue;
        }
        let denom = (counts[b] * len) as f64 * contributing as f64;
        for p in (0..patches).filter(|&p| selected(b, p)) {
            for k in 0..len {
                let r = reconstructed[[b, p, k]] - original[[b, p, k]];
                loss += r * r / denom;
                grad[[b, p, k]] = 2.0 * r / denom;
            }
        }
    }
    Ok(ReconGrad {
        loss,
        grad,
        n_masked,
    })
}

pub fn masked_reconstruction_loss(
    reconstructed: ArrayView3<f64>,
    original: ArrayView3<f64>,
    mask: ArrayView2<bool>,
) -> Result<f64> {
    Ok(masked_reconstruction(reconstructed, original, mask, ReconTarget::MaskedOnly)?.loss)
}

/// A computed term value and the number of pairs (or masked patches) behind
/// it. `None` or a zero count marks the term unavailable for the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub img_text: Option<(f64, usize)>,
    pub img_img: Option<(f64, usize)>,
    pub recon: Option<(f64, usize)>,
}

/// Weighted sum of the available terms.
pub fn combined_loss(terms: &TermValues, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let avail = |t: Option<(f64, usize)>| t.filter(|&(_, n)| n > 0);
    let (it, ii, rc) = (avail(terms.img_text), avail(terms.img_img), avail(terms.recon));
    if it.is_none() && ii.is_none() && rc.is_none() {
        return Err(Error::DegenerateBatch(
            "no loss term has eligible samples".into(),
        ));
    }
    let mut out = LossBreakdown::default();
    for (value, slot) in [
        (it, &mut out.l_img_text),
        (ii, &mut out.l_img_img),
        (rc, &mut out.l_recon),
    ] {
        if let Some((v, _)) = value {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numeric(format!("loss term {v} is not a finite non-negative value")));
            }
            *slot = v;
        }
    }
    out.n_text_pairs = it.map_or(0, |t| t.1);
    out.n_img_pairs = ii.map_or(0, |t| t.1);
    out.n_masked = rc.map_or(0, |t| t.1);
    out.total = weights.img_text * out.l_img_text
        + weights.img_img * out.l_img_img
        + weights.recon * out.l_recon;
    Ok(out)
}

/// Inputs for evaluating the full objective in one call.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub img: Option<ArrayView2<'a, f64>>,
    pub txt: Option<ArrayView2<'a, f64>>,
    pub pair_a: Option<ArrayView2<'a, f64>>,
    pub pair_b: Option<ArrayView2<'a, f64>>,
    pub reconstructed: ArrayView3<'a, f64>,
    pub original: ArrayView3<'a, f64>,
    pub mask: ArrayView2<'a, bool>,
    pub tau: f64,
}

/// Gradients of the combined objective. Entries for absent terms are `None`.
#[derive(Clone, Debug)]
pub struct ObjectiveGrad {
    pub breakdown: LossBreakdown,
    pub img: Option<Array2<f64>>,
    pub txt: Option<Array2<f64>>,
    pub pair_a: Option<Array2<f64>>,
    pub pair_b: Option<Array2<f64>>,
    pub reconstructed: Array3<f64>,
    pub tau: f64,
}

/// Combined objective and its gradient with respect to every input.
pub fn combined_objective(
    inputs: &ObjectiveInputs<'_>,
    weights: &LossWeights,
    target: ReconTarget,
) -> Result<ObjectiveGrad> {
    let it = match (inputs.img, inputs.txt) {
        (Some(i), Some(t)) if weights.img_text > 0.0 => Some(symmetric_info_nce(i, t, inputs.tau)?),
        _ => None,
    };
    let ii = match (inputs.pair_a, inputs.pair_b) {
        (Some(a), Some(b)) if weights.img_img > 0.0 => Some(symmetric_info_nce(a, b, inputs.tau)?),
        _ => None,
    };
    let rc = masked_reconstruction(inputs.reconstructed, inputs.original, inputs.mask, target)?;
    let n_recon = match target {
        ReconTarget::MaskedOnly => rc.n_masked,
        ReconTarget::WholeImage => rc.grad.len_of(Axis(0)),
    };
    let terms = TermValues {
        img_text: it.as_ref().map(|g| (g.loss, inputs.img.map_or(0, |v| v.nrows()))),
        img_img: ii.as_ref().map(|g| (g.loss, inputs.pair_a.map_or(0, |v| v.nrows()))),
        recon: (weights.recon > 0.0).then_some((rc.loss, n_recon)),
    };
    let breakdown = combined_loss(&terms, weights)?;
    let mut tau_grad = 0.0;
    let scale2 = |g: Array2<f64>, w: f64| g * w;
    let (img, txt) = match it {
        Some(g) => {
            tau_grad += weights.img_text * g.grad_tau;
            (
                Some(scale2(g.grad_a, weights.img_text)),
                Some(scale2(g.grad_b, weights.img_text)),
            )
        }
        None => (None, None),
    };
    let (pair_a, pair_b) = match ii {
        Some(g) => {
            tau_grad += weights.img_img * g.grad_tau;
            (
                Some(scale2(g.grad_a, weights.img_img)),
                Some(scale2(g.grad_b, weights.img_img)),
            )
        }
        None => (None, None),
    };
    Ok(ObjectiveGrad {
        breakdown,
        img,
        txt,
        pair_a,
        pair_b,
        reconstructed: rc.grad * weights.recon,
        tau: tau_grad,
    })
}
