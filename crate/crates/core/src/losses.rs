//! Segmentation losses: focal, Lovász-softmax and the foreground-mask focal
//! term, combined with fixed weights.

use std::rc::Rc;

use crate::error::{invalid, shape_err, Result};
use crate::heads::pick;
use crate::numerics::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub lovasz: f64,
    pub thing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            focal: 1.0,
            lovasz: 1.0,
            thing: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.focal, self.lovasz, self.thing];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
            return Err(invalid("LossWeights", format!("weights must be non-negative with one positive, got {w:?}")));
        }
        Ok(())
    }
}

/// Mean over rows of `−α (1 − p_t)^γ log p_t` for `logits[N×K]`.
pub fn focal_loss<'t>(logits: &Var<'t>, labels: &[usize], fp: FocalParams) -> Result<Var<'t>> {
    if !(fp.gamma >= 0.0 && fp.alpha > 0.0 && fp.alpha <= 1.0) {
        return Err(invalid("focal_loss", format!("need γ ≥ 0 and α ∈ (0, 1], got {fp:?}")));
    }
    let logp = pick(&logits.log_softmax(), labels)?;
    let term = if fp.gamma == 0.0 {
        logp
    } else {
        logp.exp().neg().add_scalar(1.0).powf(fp.gamma).mul(&logp)?
    };
    Ok(term.mean().scale(-fp.alpha))
}

/// Per-position weights of the Lovász extension of the Jaccard loss for
/// ground truth sorted by decreasing error.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in gt_sorted {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax over rows where `mask` is set, averaged over classes
/// present in the masked labels. An empty mask yields 0.
pub fn lovasz_loss<'t>(logits: &Var<'t>, labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || labels.len() != s[0] || mask.len() != s[0] {
        return Err(shape_err("lovasz_loss", &s, &[labels.len(), mask.len()]));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(invalid("lovasz_loss", format!("label {bad} out of range for {k} classes")));
    }
    let rows: Vec<usize> = (0..s[0]).filter(|&r| mask[r]).collect();
    if rows.is_empty() {
        return Ok(logits.tape.constant(Tensor::scalar(0.0)));
    }
    let n = rows.len();
    let probs = logits.softmax();
    let mut present: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    present.sort_unstable();
    present.dedup();
    let mut total: Option<Var<'t>> = None;
    for &c in &present {
        let idx: Vec<usize> = rows.iter().map(|&r| r * k + c).collect();
        let p = probs.gather(Rc::new(idx), &[n])?;
        let fg: Vec<bool> = rows.iter().map(|&r| labels[r] == c).collect();
        let sign = Tensor::new(&[n], fg.iter().map(|&f| if f { -1.0 } else { 1.0 }).collect())?;
        let base = Tensor::new(&[n], fg.iter().map(|&f| f as u8 as f64).collect())?;
        let err = p.mul(&logits.tape.constant(sign))?.add(&logits.tape.constant(base))?;
        let ev = err.value();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ev.data()[b].total_cmp(&ev.data()[a]).then(a.cmp(&b)));
        let gt_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let grad = Tensor::new(&[n], lovasz_grad(&gt_sorted))?;
        let sorted = err.gather(Rc::new(order), &[n])?;
        let term = sorted.mul(&logits.tape.constant(grad))?.sum();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty mask has a class").scale(1.0 / present.len() as f64))
}

/// Binary focal loss on foreground logits `[N×2]`.
pub fn thing_mask_loss<'t>(logits_fg: &Var<'t>, fg: &[bool], fp: FocalParams) -> Result<Var<'t>> {
    if logits_fg.shape().get(1) != Some(&2) {
        return Err(shape_err("thing_mask_loss", &logits_fg.shape(), &[fg.len(), 2]));
    }
    let labels: Vec<usize> = fg.iter().map(|&f| f as usize).collect();
    focal_loss(logits_fg, &labels, fp)
}

/// The three loss terms evaluated on one batch.
pub struct LossParts<'t> {
    pub focal: Var<'t>,
    pub lovasz: Var<'t>,
    pub thing: Var<'t>,
}

pub fn total_seg_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<Var<'t>> {
    w.validate()?;
    parts
        .focal
        .scale(w.focal)
        .add(&parts.lovasz.scale(w.lovasz))?
        .add(&parts.thing.scale(w.thing))
}
