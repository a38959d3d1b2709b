//! Saliency-map comparison metrics: KL divergence, histogram intersection
//! and normalized scanpath saliency.

use crate::error::{Error, Result};

/// Added inside both the ratio and the log argument of the KL divergence.
pub const KLD_EPS: f64 = 1e-12;
/// Prediction std below which NSS is defined as 0.
pub const NSS_STD_FLOOR: f64 = 1e-12;
/// Heat at or above this value counts as a fixation.
pub const FIXATION_THRESHOLD: f64 = 0.5;

fn check_shapes(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            op,
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(())
}

/// Scales a nonnegative grid to unit mass.
pub fn normalize(op: &'static str, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Degenerate {
            op,
            detail: "heat grid must be finite and nonnegative".into(),
        });
    }
    let total: f64 = grid.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate {
            op,
            detail: "heat grid has zero mass".into(),
        });
    }
    Ok(grid.iter().map(|v| v / total).collect())
}

/// `Σ G ln(G/(P+ε) + ε)` over the normalized truth `G` and prediction `P`,
/// floored at 0. For `P = G` the ε terms leave the raw sum up to `n·ε` below
/// zero, which the floor removes.
pub fn kld(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_shapes("kld", pred, truth)?;
    let p = normalize("kld", pred)?;
    let g = normalize("kld", truth)?;
    let raw: f64 = g
        .iter()
        .zip(&p)
        .map(|(g, p)| g * (g / (p + KLD_EPS) + KLD_EPS).ln())
        .sum();
    Ok(raw.max(0.0))
}

/// `Σ min(P, G)` over the normalized grids.
pub fn sim(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_shapes("sim", pred, truth)?;
    let p = normalize("sim", pred)?;
    let g = normalize("sim", truth)?;
    Ok(p.iter().zip(&g).map(|(p, g)| p.min(*g)).sum())
}

/// Mean standardized prediction over fixation cells.
pub fn nss(pred: &[f64], fixation: &[bool]) -> Result<f64> {
    if pred.len() != fixation.len() || pred.is_empty() {
        return Err(Error::Dimension {
            op: "nss",
            left: vec![pred.len()],
            right: vec![fixation.len()],
        });
    }
    let hits = fixation.iter().filter(|f| **f).count();
    if hits == 0 {
        return Err(Error::Degenerate {
            op: "nss",
            detail: "fixation map is empty".into(),
        });
    }
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let var = pred.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < NSS_STD_FLOOR {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(fixation)
        .filter(|(_, f)| **f)
        .map(|(v, _)| (v - mean) / std)
        .sum();
    Ok(total / hits as f64)
}

/// Binary fixation map from an analytic heat grid.
pub fn fixation_map(truth: &[f64]) -> Vec<bool> {
    truth.iter().map(|h| *h >= FIXATION_THRESHOLD).collect()
}

/// KLD, SIM and NSS of one prediction against a heat ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyScores {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

pub fn score_heat(pred: &[f64], truth: &[f64]) -> Result<SaliencyScores> {
    Ok(SaliencyScores {
        kld: kld(pred, truth)?,
        sim: sim(pred, truth)?,
        nss: nss(pred, &fixation_map(truth))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let one_hot = [1.0, 0.0, 0.0, 0.0];
        let uniform = [1.0; 4];
        assert!((kld(&uniform, &one_hot).unwrap() - 4f64.ln()).abs() < 1e-6);
        assert!(kld(&one_hot, &one_hot).unwrap().abs() < 1e-9);
        assert!((sim(&uniform, &one_hot).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let fix = [true, false, false, false];
        assert!((nss(&one_hot, &fix).unwrap() - 3f64.sqrt()).abs() < 1e-6);
        assert_eq!(nss(&uniform, &fix).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(kld(&[0.0; 3], &[1.0; 3]), Err(Error::Degenerate { .. })));
        assert!(matches!(sim(&[1.0; 3], &[1.0; 2]), Err(Error::Dimension { .. })));
        assert!(matches!(nss(&[1.0; 2], &[false; 2]), Err(Error::Degenerate { .. })));
    }
}
