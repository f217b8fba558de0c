use serde::{Deserialize, Serialize};

use crate::dataio::IGNORE;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Row-wise argmax of `[N, C]` scores; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<u32>> {
    let s = scores.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::InvalidShape {
            op: "argmax_rows",
            shape: s.to_vec(),
            reason: "expected [N, C] with C > 0".into(),
        });
    }
    Ok((0..s[0])
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Argmax over the class axis of `[N, C, H, W]` logits, giving `N` masks.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] == 0 || s[1] > 255 {
        return Err(Error::InvalidShape {
            op: "argmax_channels",
            shape: s.to_vec(),
            reason: "expected [N, C, H, W] with 0 < C < 256".into(),
        });
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

pub fn accuracy(preds: &[u32], labels: &[u32]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn aggregate_trials(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no trials to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class intersection over union accumulated over all masks. Pixels
/// whose ground truth is `ignore` are skipped.
pub fn miou(preds: &[&[u8]], gts: &[&[u8]], n_classes: usize, ignore: u8) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    let mut valid = 0u64;
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "miou mask",
                lhs: vec![p.len()],
                rhs: vec![g.len()],
            });
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            if gv == ignore {
                continue;
            }
            for v in [pv, gv] {
                if v as usize >= n_classes {
                    return Err(Error::InvalidArgument(format!("class value {v} outside {n_classes} classes")));
                }
            }
            valid += 1;
            if pv == gv {
                tp[gv as usize] += 1;
            } else {
                fp[pv as usize] += 1;
                fn_[gv as usize] += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fn_[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let ratios: Vec<(u64, u64)> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| (tp[c], tp[c] + fp[c] + fn_[c]))
        .collect();
    let mean = exact_mean(&ratios).unwrap_or_else(|| {
        ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64
    });
    Ok(MiouReport { per_class, mean })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of the fractions `a / b`, summed as a reduced rational so the
/// result is the correctly rounded quotient. `None` on overflow.
fn exact_mean(ratios: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in ratios {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(den, b);
        let lcm = den.checked_mul(b / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        num /= r;
        den /= r;
    }
    let den = den.checked_mul(ratios.len() as u128)?;
    let r = gcd(num, den).max(1);
    let (num, den) = (num / r, den / r);
    // Both fit in 53 bits, so the division is a single correctly rounded op.
    (num < 1 << 53 && den < 1 << 53).then(|| num as f64 / den as f64)
}

/// [`miou`] with the standard ignore label.
pub fn miou_default(preds: &[&[u8]], gts: &[&[u8]], n_classes: usize) -> Result<MiouReport> {
    miou(preds, gts, n_classes, IGNORE)
}
