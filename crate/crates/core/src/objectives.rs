//! Equivariance loss, the pluggable invariance losses, and their sum.
//!
//! All losses are built from differentiable tensor ops so they can be
//! back-propagated; views are laid out as `[first views; second views]`, so
//! view `a` pairs with `(a + N) mod 2N`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::row_norms;

/// Offset added to excluded logits before taking the stabilizing row max.
const MASK_OFFSET: f64 = 1e4;
pub const BARLOW_EPS: f64 = 1e-5;

/// Which terms appear in the equivariance loss denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// Only the `2N - 2` embeddings of other images.
    #[default]
    Verbatim,
    /// Standard NT-Xent: the positive term is added to the denominator.
    IncludePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Equivariance temperature.
    pub tau_prime: f64,
    /// SimCLR temperature.
    pub tau: f64,
    /// Barlow Twins off-diagonal weight.
    pub barlow_lambda: f64,
    /// BYOL base target momentum.
    pub tau_base: f64,
    /// Weight of the equivariance term.
    pub lambda: f64,
    #[serde(default)]
    pub denominator: Denominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_prime: 0.2,
            tau: 0.5,
            barlow_lambda: 0.005,
            tau_base: 0.996,
            lambda: 1.0,
            denominator: Denominator::Verbatim,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_prime > 0.0 && self.tau > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        if !(self.barlow_lambda >= 0.0) || !(0.0..=1.0).contains(&self.tau_base) {
            return Err(Error::Config("barlow_lambda must be >= 0 and tau_base in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-batch embeddings. `z` and `z_equi` hold `2N` views; `z_orig` the `N`
/// originals; `z_pred` the `2N` predictions aligned with `z_equi`.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    pub z: Tensor,
    pub z_equi: Tensor,
    pub z_orig: Tensor,
    pub z_pred: Tensor,
}

impl EmbeddingBundle {
    /// Number of source images `N`.
    pub fn images(&self) -> Result<usize> {
        let (views, d) = self.z_equi.dims2()?;
        let (zv, _) = self.z.dims2()?;
        let (no, d_orig) = self.z_orig.dims2()?;
        let (pv, dp) = self.z_pred.dims2()?;
        if views % 2 != 0 || zv != views || pv != views || dp != d || d_orig != d || 2 * no != views {
            return Err(Error::shape(
                "z [2N, *], z_equi/z_pred [2N, d], z_orig [N, d]",
                format!(
                    "z {:?}, z_equi {:?}, z_orig {:?}, z_pred {:?}",
                    self.z.dims(),
                    self.z_equi.dims(),
                    self.z_orig.dims(),
                    self.z_pred.dims()
                ),
            ));
        }
        Ok(views / 2)
    }
}

fn check_nonzero(x: &Tensor, what: &'static str) -> Result<Tensor> {
    let norms = row_norms(x)?;
    let min = norms.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if min == 0.0 || !min.is_finite() {
        return Err(Error::ZeroNorm(what));
    }
    Ok(norms)
}

fn l2_normalize(x: &Tensor, what: &'static str) -> Result<Tensor> {
    let norms = check_nonzero(x, what)?;
    Ok(x.broadcast_div(&norms)?)
}

/// `[M, K]` cosine similarities between rows of `a` and rows of `b`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let an = l2_normalize(a, "cosine similarity")?;
    let bn = l2_normalize(b, "cosine similarity")?;
    Ok(an.matmul(&bn.t()?)?)
}

/// Row-wise cosine similarity of two `[M, d]` tensors.
pub fn rowwise_cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let an = l2_normalize(a, "cosine similarity")?;
    let bn = l2_normalize(b, "cosine similarity")?;
    Ok((an * bn)?.sum(D::Minus1)?)
}

/// Swaps the first and second halves of a `[2N, d]` batch so row `a` holds
/// the partner of view `a`.
fn partner_rows(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)? / 2;
    Ok(Tensor::cat(&[x.narrow(0, n, n)?, x.narrow(0, 0, n)?], 0)?)
}

/// `[2N, 2N]` 0/1 mask; `exclude_partner` also removes the other view of the same image.
fn negatives_mask(views: usize, exclude_partner: bool, like: &Tensor) -> Result<Tensor> {
    let n = views / 2;
    let data: Vec<f64> = (0..views)
        .flat_map(|a| {
            let p = (a + n) % views;
            (0..views).map(move |k| if k == a || (exclude_partner && k == p) { 0.0 } else { 1.0 })
        })
        .collect();
    Ok(Tensor::from_vec(data, (views, views), like.device())?.to_dtype(like.dtype())?)
}

/// `log Σ_k mask·exp(logits)` per row, plus `exp(extra)` when given.
fn masked_logsumexp(logits: &Tensor, mask: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
    let shifted = (logits + ((mask - 1.0)? * MASK_OFFSET)?)?;
    let mut m = shifted.max_keepdim(D::Minus1)?.detach();
    if let Some(e) = extra {
        m = m.maximum(&e.unsqueeze(1)?.detach())?;
    }
    let mut sum = (logits.broadcast_sub(&m)?.exp()? * mask)?.sum_keepdim(D::Minus1)?;
    if let Some(e) = extra {
        sum = (sum + (e.unsqueeze(1)? - &m)?.exp()?)?;
    }
    Ok((sum.log()? + m)?.squeeze(1)?)
}

/// Per-view equivariance loss, `[2N]`.
pub fn equimod_view_losses(bundle: &EmbeddingBundle, tau_prime: f64, denominator: Denominator) -> Result<Tensor> {
    let n = bundle.images()?;
    let views = 2 * n;
    if views < 4 {
        return Err(Error::EmptyDenominator { views });
    }
    let logits = (cosine_matrix(&bundle.z_equi, &bundle.z_equi)? / tau_prime)?;
    let pos = (rowwise_cosine(&bundle.z_equi, &bundle.z_pred)? / tau_prime)?;
    let mask = negatives_mask(views, true, &logits)?;
    let lse = match denominator {
        Denominator::Verbatim => masked_logsumexp(&logits, &mask, None)?,
        Denominator::IncludePositive => masked_logsumexp(&logits, &mask, Some(&pos))?,
    };
    Ok((lse - pos)?)
}

/// Loss for the ordered pair `(i, j)` of views of the same image.
pub fn equimod_pair_loss(bundle: &EmbeddingBundle, i: usize, j: usize, tau_prime: f64, denominator: Denominator) -> Result<Tensor> {
    let n = bundle.images()?;
    if i >= 2 * n || j != (i + n) % (2 * n) {
        return Err(Error::Precondition(format!(
            "views ({i}, {j}) are not the two views of one image in a batch of {} views",
            2 * n
        )));
    }
    Ok(equimod_view_losses(bundle, tau_prime, denominator)?.get(i)?)
}

/// Mean of the pair loss over all `2N` ordered pairs.
pub fn equimod_loss(bundle: &EmbeddingBundle, tau_prime: f64, denominator: Denominator) -> Result<Tensor> {
    Ok(equimod_view_losses(bundle, tau_prime, denominator)?.mean_all()?)
}

/// NT-Xent: the positive is the other view, the denominator runs over every `k != a`.
pub fn simclr_invariance_loss(z: &Tensor, tau: f64) -> Result<Tensor> {
    let (views, _) = z.dims2()?;
    if views % 2 != 0 {
        return Err(Error::shape("an even number of views", views));
    }
    if views < 4 {
        return Err(Error::EmptyDenominator { views });
    }
    let logits = (cosine_matrix(z, z)? / tau)?;
    let pos = (rowwise_cosine(z, &partner_rows(z)?)? / tau)?;
    let mask = negatives_mask(views, false, &logits)?;
    Ok((masked_logsumexp(&logits, &mask, None)? - pos)?.mean_all()?)
}

/// `‖p/‖p‖ − z/‖z‖‖² = 2 − 2·cos(p, z)` per row.
pub fn byol_pair_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((2.0 - (rowwise_cosine(prediction, target)? * 2.0)?)?)
}

/// Symmetrized BYOL regression: predictions of each view regress the
/// target projection of the other view; the two directions are summed.
pub fn byol_invariance_loss(online_predictions: &Tensor, target_projections: &Tensor) -> Result<Tensor> {
    let (views, _) = online_predictions.dims2()?;
    if views % 2 != 0 || views < 2 {
        return Err(Error::shape("an even, non-zero number of views", views));
    }
    let per_view = byol_pair_loss(online_predictions, &partner_rows(&target_projections.detach())?)?;
    Ok((per_view.mean_all()? * 2.0)?)
}

/// Barlow Twins: standardize each branch over the batch, then push the
/// cross-correlation matrix towards the identity.
pub fn barlow_twins_loss(z: &Tensor, off_diagonal_weight: f64) -> Result<Tensor> {
    let (views, d) = z.dims2()?;
    let n = views / 2;
    if views % 2 != 0 || n < 2 {
        return Err(Error::shape("an even number of at least 4 views", views));
    }
    check_nonzero(&z.flatten_all()?.unsqueeze(0)?, "barlow twins input")?;
    let standardize = |x: Tensor| -> Result<Tensor> {
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        Ok(centered.broadcast_div(&(var + BARLOW_EPS)?.sqrt()?)?)
    };
    let a = standardize(z.narrow(0, 0, n)?)?;
    let b = standardize(z.narrow(0, n, n)?)?;
    let c = (a.t()?.matmul(&b)? / n as f64)?;
    let eye = Tensor::eye(d, c.dtype(), c.device())?;
    let diag = (&c * &eye)?.sum(D::Minus1)?;
    let on = (diag.clone() - 1.0)?.sqr()?.sum_all()?;
    let off = (c.sqr()?.sum_all()? - diag.sqr()?.sum_all()?)?;
    Ok((on + (off * off_diagonal_weight)?)?)
}

/// `L = L_inv + λ·L_equi`.
pub fn total_loss(invariance: &Tensor, equivariance: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
    Ok(match equivariance {
        Some(e) => (invariance + e.affine(lambda, 0.0)?)?,
        None => invariance.clone(),
    })
}

pub fn total_loss_value(invariance: f64, equivariance: f64, lambda: f64) -> f64 {
    invariance + lambda * equivariance
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn bundle(z_equi: Tensor, z_pred: Tensor) -> EmbeddingBundle {
        let n = z_equi.dim(0).unwrap() / 2;
        EmbeddingBundle {
            z: z_equi.clone(),
            z_orig: z_equi.narrow(0, 0, n).unwrap(),
            z_equi,
            z_pred,
        }
    }

    #[test]
    fn pair_loss_unit_and_orthogonal() {
        // views 0 and 2 pair; negatives for view 0 are views 1 and 3.
        let z = t(&[&[1., 0., 0.], &[0., 1., 0.], &[1., 0., 0.], &[0., 0., 1.]]);
        let b = bundle(z.clone(), z);
        let l = scalar(equimod_pair_loss(&b, 0, 2, 1.0, Denominator::Verbatim).unwrap());
        assert!((l - (2f64.ln() - 1.0)).abs() < 1e-12, "{l}");
    }

    #[test]
    fn pair_loss_all_zero_similarities() {
        let z = t(&[&[1., 0., 0., 0.], &[0., 1., 0., 0.], &[0., 0., 1., 0.], &[0., 0., 0., 1.]]);
        let pred = t(&[&[0., 1., 0., 0.], &[1., 0., 0., 0.], &[0., 0., 0., 1.], &[0., 0., 1., 0.]]);
        let b = bundle(z, pred);
        let l = scalar(equimod_pair_loss(&b, 1, 3, 1.0, Denominator::Verbatim).unwrap());
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let mean = scalar(equimod_loss(&b, 1.0, Denominator::Verbatim).unwrap());
        assert!((mean - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn include_positive_variant() {
        let z = t(&[&[1., 0., 0., 0.], &[0., 1., 0., 0.], &[0., 0., 1., 0.], &[0., 0., 0., 1.]]);
        let b = bundle(z.clone(), z);
        // positive sim 1, two orthogonal negatives: -log(e / (e + 2))
        let l = scalar(equimod_pair_loss(&b, 0, 2, 1.0, Denominator::IncludePositive).unwrap());
        let e = 1f64.exp();
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
    }

    #[test]
    fn unpaired_indices_and_small_batches_fail() {
        let z = t(&[&[1., 0.], &[0., 1.], &[1., 1.], &[1., -1.]]);
        let b = bundle(z.clone(), z.clone());
        assert!(matches!(equimod_pair_loss(&b, 0, 1, 0.2, Denominator::Verbatim), Err(Error::Precondition(_))));
        let small = bundle(t(&[&[1., 0.], &[0., 1.]]), t(&[&[1., 0.], &[0., 1.]]));
        assert!(matches!(equimod_loss(&small, 0.2, Denominator::Verbatim), Err(Error::EmptyDenominator { views: 2 })));
        assert!(matches!(simclr_invariance_loss(&t(&[&[1., 0.], &[0., 1.]]), 0.5), Err(Error::EmptyDenominator { .. })));
    }

    #[test]
    fn zero_norm_embedding_fails() {
        let z = t(&[&[1., 0.], &[0., 0.], &[1., 1.], &[1., -1.]]);
        let b = bundle(z.clone(), z.clone());
        assert!(matches!(equimod_loss(&b, 0.2, Denominator::Verbatim), Err(Error::ZeroNorm(_))));
        assert!(matches!(byol_pair_loss(&z, &z), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn simclr_analytic_cases() {
        let z = t(&[&[1., 0., 0., 0.], &[0., 1., 0., 0.], &[0., 0., 1., 0.], &[0., 0., 0., 1.]]);
        let l = scalar(simclr_invariance_loss(&z, 1.0).unwrap());
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let z = t(&[&[1., 0.], &[0., 1.], &[1., 0.], &[0., 1.]]);
        let l = scalar(simclr_invariance_loss(&z, 1.0).unwrap());
        let e = 1f64.exp();
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn byol_aligned_and_antipodal() {
        let p = t(&[&[1., 2.], &[3., -1.]]);
        let aligned = byol_pair_loss(&p, &(p.clone() * 5.0).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        assert!(aligned.iter().all(|v| v.abs() < 1e-12));
        let opposite = byol_pair_loss(&p, &p.neg().unwrap()).unwrap().to_vec1::<f64>().unwrap();
        assert!(opposite.iter().all(|v| (v - 4.0).abs() < 1e-12));
        // symmetrized: predictions of view a regress the target of its partner
        let targets = t(&[&[3., -1.], &[1., 2.]]);
        assert!(scalar(byol_invariance_loss(&p, &targets).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn barlow_identity_cross_correlation() {
        // columns are standardized (mean 0, var 1) and mutually uncorrelated
        let branch: &[&[f64]] = &[&[1., 1.], &[1., -1.], &[-1., 1.], &[-1., -1.]];
        let mut rows: Vec<&[f64]> = branch.to_vec();
        rows.extend_from_slice(branch);
        let l = scalar(barlow_twins_loss(&t(&rows), 0.005).unwrap());
        assert!(l.abs() < 1e-9, "{l}");
    }

    #[test]
    fn barlow_penalizes_correlated_features() {
        let branch: &[&[f64]] = &[&[1., 1.], &[-1., -1.], &[2., 2.], &[-2., -2.]];
        let mut rows: Vec<&[f64]> = branch.to_vec();
        rows.extend_from_slice(branch);
        // c = [[1,1],[1,1]] up to eps: off-diagonal sum 2
        let l = scalar(barlow_twins_loss(&t(&rows), 0.005).unwrap());
        assert!((l - 0.01).abs() < 1e-4, "{l}");
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss_value(1.0, 0.5, 1.0), 1.5);
        assert_eq!(total_loss_value(1.0, 0.5, 0.0), 1.0);
        assert!((total_loss_value(0.7, -0.3, 2.0) - 0.1).abs() < 1e-12);
        let inv = Tensor::new(0.7f64, &Device::Cpu).unwrap();
        let eq = Tensor::new(-0.3f64, &Device::Cpu).unwrap();
        assert!((scalar(total_loss(&inv, Some(&eq), 2.0).unwrap()) - 0.1).abs() < 1e-12);
        assert_eq!(scalar(total_loss(&inv, None, 2.0).unwrap()), 0.7);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau_prime: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
    }
}
