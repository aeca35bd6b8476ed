use crate::error::{Error, Result};

/// Floor for the denominator of the relative metric.
pub const RELATIVE_EPS: f64 = 1e-6;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("equivariance metric"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// How far the prediction moved toward the view, beyond the original:
/// `sim(z_i, ẑ_i) − sim(z_i, z_o)`.
pub fn absolute_equivariance(z_view: &[f64], z_pred: &[f64], z_orig: &[f64]) -> Result<f64> {
    Ok(cosine(z_view, z_pred)? - cosine(z_view, z_orig)?)
}

/// Ratio of distances to the view: `(1 − sim(z_i, z_o)) / (1 − sim(z_i, ẑ_i))`.
/// Both distances are floored at `RELATIVE_EPS`, so a view identical to its
/// original reads as 1 under an identity predictor.
pub fn relative_equivariance(z_view: &[f64], z_pred: &[f64], z_orig: &[f64]) -> Result<f64> {
    let num = (1.0 - cosine(z_view, z_orig)?).max(RELATIVE_EPS);
    let den = (1.0 - cosine(z_view, z_pred)?).max(RELATIVE_EPS);
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_prediction_reads_as_invariance() {
        let (zi, zo) = ([1.0, 2.0, 0.5], [0.3, -1.0, 2.0]);
        assert!(absolute_equivariance(&zi, &zo, &zo).unwrap().abs() < 1e-12);
        assert!((relative_equivariance(&zi, &zo, &zo).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        // sim(z_i, z_o) = 0.5
        let zi = [1.0, 0.0];
        let zo = [0.5, 3f64.sqrt() / 2.0];
        assert!((absolute_equivariance(&zi, &zi, &zo).unwrap() - 0.5).abs() < 1e-12);
        assert!((relative_equivariance(&zi, &zi, &zo).unwrap() - 0.5 / RELATIVE_EPS).abs() < 1e-3);
    }

    #[test]
    fn coincident_view_reads_as_one() {
        let z = [0.4, -1.0, 2.0];
        assert_eq!(relative_equivariance(&z, &z, &z).unwrap(), 1.0);
    }

    #[test]
    fn relative_arithmetic() {
        // sim(z_i, z_o) = 0.2, sim(z_i, ẑ_i) = 0.8
        let zi = [1.0, 0.0];
        let zo = [0.2, (1.0f64 - 0.04).sqrt()];
        let zp = [0.8, 0.6];
        assert!((relative_equivariance(&zi, &zp, &zo).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vectors_fail() {
        assert!(absolute_equivariance(&[0.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(relative_equivariance(&[1.0], &[1.0, 0.0], &[1.0]).is_err());
    }
}
