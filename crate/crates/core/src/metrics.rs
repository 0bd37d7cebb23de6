//! Intersection-over-union metrics on label grids.

use std::fmt::Write as _;

use crate::error::{invalid, shape_err, Result};

/// Per-class confusion counts accumulated over any number of volumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl IouCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err("miou", &[pred.len()], &[gt.len()]));
        }
        let k = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(invalid("miou", format!("label {} out of range for {k} classes", p.max(g))));
            }
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn union(&self, c: usize) -> u64 {
        self.tp[c] + self.fp[c] + self.fn_[c]
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        let u = self.union(c);
        (u > 0).then(|| self.tp[c] as f64 / u as f64)
    }

    pub fn in_gt(&self, c: usize) -> bool {
        self.tp[c] + self.fn_[c] > 0
    }

    pub fn summary(&self, ignore_empty: bool) -> MiouResult {
        let first = ignore_empty as usize;
        let k = self.num_classes();
        let present: Vec<usize> = (first..k).filter(|&c| self.in_gt(c)).collect();
        let seen: Vec<usize> = (first..k).filter(|&c| self.union(c) > 0).collect();
        MiouResult {
            per_class: (0..k).map(|c| self.iou(c)).collect(),
            miou: self.mean_iou(&present),
            miou_all: self.mean_iou(&seen),
        }
    }

    /// Mean of `tp/union` over `classes`, as the correctly rounded value of
    /// the exact rational mean whenever it fits in 128-bit arithmetic.
    fn mean_iou(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return 0.0;
        }
        let exact = classes
            .iter()
            .try_fold((0u128, 1u128), |(num, den), &c| {
                let (a, b) = (self.tp[c] as u128, self.union(c) as u128);
                let n = num.checked_mul(b)?.checked_add(a.checked_mul(den)?)?;
                let d = den.checked_mul(b)?;
                let g = gcd(n, d);
                Some((n / g, d / g))
            })
            .and_then(|(n, d)| Some((n, d.checked_mul(classes.len() as u128)?)));
        match exact {
            Some((n, d)) if n < (1 << 53) && d < (1 << 53) => n as f64 / d as f64,
            _ => classes.iter().map(|&c| self.iou(c).unwrap_or(0.0)).sum::<f64>() / classes.len() as f64,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    /// IoU per class; `None` where the class is absent from both volumes.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub miou: f64,
    /// Mean over classes present in either prediction or ground truth.
    pub miou_all: f64,
}

impl MiouResult {
    /// `class,iou` rows followed by `mIoU,<value>`.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).copied().unwrap_or("?");
            match iou {
                Some(v) => writeln!(out, "{name},{v}"),
                None => writeln!(out, "{name},nan"),
            }
            .expect("string write");
        }
        writeln!(out, "mIoU,{}", self.miou).expect("string write");
        out
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize, ignore_empty: bool) -> Result<MiouResult> {
    let mut c = IouCounts::new(num_classes);
    c.add(pred, gt)?;
    Ok(c.summary(ignore_empty))
}
