//! Isotropic Gaussian mixtures over 2-D patch coordinates, the gated
//! multi-target negative log-likelihood and its analytic gradient.
//!
//! Coordinates are normalized to the patch: `(0, 0)` is the top-left corner,
//! `(1, 1)` the bottom-right, and `x` runs along columns. Scales use the same
//! unit.
//!
//! The raw head output for `K` components is laid out as
//!
//! ```text
//! [ K alpha-logits | K (x, y) means | K scale-logits | gate-logit ]
//! ```
//!
//! and is mapped to [`MixtureParams`] by [`constrain`]:
//! softmax for the mixing coefficients, identity for the means,
//! `SIGMA_FLOOR + exp(s)` for the scales and a logistic for the gate.

use crate::error::{Error, Result};

/// Dimension of the target variable.
pub const COORD_DIM: usize = 2;

/// Lower bound on every component scale, in normalized patch units.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// A point in normalized patch coordinates, `[x, y]`.
pub type Point = [f64; 2];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Number of raw head values needed for `k` components.
pub fn head_width(k: usize) -> usize {
    (COORD_DIM + 2) * k + 1
}

/// Pre-activation output of the mixture head.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeadOutput {
    values: Vec<f64>,
    k: usize,
}

impl RawHeadOutput {
    pub fn new(values: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("component count must be at least 1"));
        }
        if values.len() != head_width(k) {
            return Err(Error::config(format!(
                "raw head output has {} values, expected {} for K = {k}",
                values.len(),
                head_width(k)
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "raw head output entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn alpha_logits(&self) -> &[f64] {
        &self.values[..self.k]
    }

    /// Interleaved `x, y` means, `2K` values.
    pub fn means(&self) -> &[f64] {
        &self.values[self.k..3 * self.k]
    }

    pub fn scale_logits(&self) -> &[f64] {
        &self.values[3 * self.k..4 * self.k]
    }

    pub fn gate_logit(&self) -> f64 {
        self.values[4 * self.k]
    }
}

/// Constrained per-patch mixture prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    alphas: Vec<f64>,
    mus: Vec<Point>,
    sigmas: Vec<f64>,
    gate_e: f64,
}

impl MixtureParams {
    /// Builds parameters directly, checking every invariant.
    pub fn new(alphas: Vec<f64>, mus: Vec<Point>, sigmas: Vec<f64>, gate_e: f64) -> Result<Self> {
        let k = alphas.len();
        if k == 0 || mus.len() != k || sigmas.len() != k {
            return Err(Error::config(format!(
                "mixture needs matching non-empty component lists (alphas {}, means {}, scales {})",
                k,
                mus.len(),
                sigmas.len()
            )));
        }
        if alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::numeric(
                "mixing coefficients must be finite and nonnegative",
            ));
        }
        let total: f64 = alphas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!(
                "mixing coefficients sum to {total}, not 1"
            )));
        }
        if mus.iter().flatten().any(|m| !m.is_finite()) {
            return Err(Error::numeric("component means must be finite"));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= SIGMA_FLOOR)) {
            return Err(Error::numeric(format!(
                "component scales must be finite and at least {SIGMA_FLOOR}"
            )));
        }
        if !(gate_e > 0.0 && gate_e < 1.0) {
            return Err(Error::numeric(format!(
                "gate probability {gate_e} outside (0, 1)"
            )));
        }
        Ok(Self {
            alphas,
            mus,
            sigmas,
            gate_e,
        })
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn mus(&self) -> &[Point] {
        &self.mus
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn gate_e(&self) -> f64 {
        self.gate_e
    }

    fn log_component(&self, k: usize, t: Point) -> f64 {
        self.alphas[k].ln() + log_kernel(self.mus[k], self.sigmas[k], t)
    }
}

/// Target points of one patch. A patch has an object iff it has points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetSet {
    points: Vec<Point>,
}

impl TargetSet {
    /// Every coordinate must lie in `[0, 1]`.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| !p.iter().all(|c| (0.0..=1.0).contains(c)))
        {
            return Err(Error::config(format!(
                "target ({}, {}) outside the unit patch",
                p[0], p[1]
            )));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn has_object(&self) -> bool {
        !self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn log_kernel(mu: Point, sigma: f64, t: Point) -> f64 {
    -LN_2PI - 2.0 * sigma.ln() - sq_dist(t, mu) / (2.0 * sigma * sigma)
}

/// Maps a raw head output onto valid mixture parameters.
pub fn constrain(raw: &RawHeadOutput) -> Result<MixtureParams> {
    let k = raw.k();
    let logits = raw.alpha_logits();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut alphas: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = alphas.iter().sum();
    alphas.iter_mut().for_each(|a| *a /= total);

    let mus = raw.means().chunks_exact(2).map(|m| [m[0], m[1]]).collect();

    let mut sigmas = Vec::with_capacity(k);
    for (i, s) in raw.scale_logits().iter().enumerate() {
        let sigma = SIGMA_FLOOR + s.exp();
        if !sigma.is_finite() {
            return Err(Error::numeric(format!(
                "scale-logit {i} = {s} overflows; lower the learning rate"
            )));
        }
        sigmas.push(sigma);
    }

    // Clamp keeps the gate strictly inside (0, 1) for saturated logits.
    let gate_e = sigmoid(raw.gate_logit()).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);

    Ok(MixtureParams {
        alphas,
        mus,
        sigmas,
        gate_e,
    })
}

/// Isotropic Gaussian density of `t` around `mu`.
pub fn kernel_density(mu: Point, sigma: f64, t: Point) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::numeric(format!(
            "kernel scale must be positive, got {sigma}"
        )));
    }
    Ok(log_kernel(mu, sigma, t).exp())
}

/// Mixture density at `t`.
pub fn mixture_density(params: &MixtureParams, t: Point) -> f64 {
    (0..params.k())
        .map(|k| params.alphas[k] * log_kernel(params.mus[k], params.sigmas[k], t).exp())
        .sum()
}

/// Posterior component probabilities for a target at `t`.
pub fn responsibilities(params: &MixtureParams, t: Point) -> Vec<f64> {
    let logs: Vec<f64> = (0..params.k())
        .map(|k| params.log_component(k, t))
        .collect();
    let norm = log_sum_exp(&logs);
    logs.iter().map(|l| (l - norm).exp()).collect()
}

/// Loss contribution of one patch: the mixture term over its targets plus one
/// Bernoulli gate term.
pub fn patch_nll(params: &MixtureParams, targets: &TargetSet) -> f64 {
    let mut logs = vec![0.0; params.k()];
    let mut loss = 0.0;
    for &t in targets.points() {
        for (k, l) in logs.iter_mut().enumerate() {
            *l = params.log_component(k, t);
        }
        loss -= log_sum_exp(&logs);
    }
    let gate = if targets.has_object() {
        params.gate_e
    } else {
        1.0 - params.gate_e
    };
    loss - gate.ln()
}

/// Gated multi-target negative log-likelihood, summed over the batch.
///
/// The value is a log density and can be negative once components are
/// narrower than about `1 / sqrt(2 pi)` of the patch.
pub fn nll_loss(params_batch: &[MixtureParams], targets_batch: &[TargetSet]) -> Result<f64> {
    if params_batch.len() != targets_batch.len() {
        return Err(Error::config(format!(
            "batch has {} predictions but {} target sets",
            params_batch.len(),
            targets_batch.len()
        )));
    }
    Ok(params_batch
        .iter()
        .zip(targets_batch)
        .map(|(p, t)| patch_nll(p, t))
        .sum())
}

/// Patch loss and its gradient with respect to the raw head output.
///
/// The loss is evaluated from the raw logits directly (log-softmax and
/// softplus forms), which agrees with `patch_nll(constrain(raw))` up to
/// rounding.
pub fn loss_and_grad_raw(raw: &RawHeadOutput, targets: &TargetSet) -> Result<(f64, Vec<f64>)> {
    let k = raw.k();
    let logits = raw.alpha_logits();
    let means = raw.means();
    let scale_logits = raw.scale_logits();
    let gate_logit = raw.gate_logit();

    let norm = log_sum_exp(logits);
    let log_alphas: Vec<f64> = logits.iter().map(|a| a - norm).collect();
    let alphas: Vec<f64> = log_alphas.iter().map(|l| l.exp()).collect();
    let exp_s: Vec<f64> = scale_logits.iter().map(|s| s.exp()).collect();
    let sigmas: Vec<f64> = exp_s.iter().map(|e| SIGMA_FLOOR + e).collect();
    if let Some(i) = sigmas.iter().position(|s| !s.is_finite()) {
        return Err(Error::numeric(format!(
            "scale-logit {i} = {} overflows; lower the learning rate",
            scale_logits[i]
        )));
    }
    let log_norms: Vec<f64> = (0..k)
        .map(|j| log_alphas[j] - LN_2PI - 2.0 * sigmas[j].ln())
        .collect();

    let mut grad = vec![0.0; raw.values().len()];
    let mut loss = 0.0;
    let mut logs = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for &t in targets.points() {
        for j in 0..k {
            let mu = [means[2 * j], means[2 * j + 1]];
            sq[j] = sq_dist(t, mu);
            logs[j] = log_norms[j] - sq[j] / (2.0 * sigmas[j] * sigmas[j]);
        }
        let total = log_sum_exp(&logs);
        loss -= total;
        for j in 0..k {
            let resp = (logs[j] - total).exp();
            let var = sigmas[j] * sigmas[j];
            grad[j] += alphas[j] - resp;
            grad[k + 2 * j] += resp * (means[2 * j] - t[0]) / var;
            grad[k + 2 * j + 1] += resp * (means[2 * j + 1] - t[1]) / var;
            // d sigma / d s = exp(s) = sigma - floor
            grad[3 * k + j] += resp * (COORD_DIM as f64 - sq[j] / var) * exp_s[j] / sigmas[j];
        }
    }

    let e = sigmoid(gate_logit);
    if targets.has_object() {
        loss += softplus(-gate_logit);
        grad[4 * k] = e - 1.0;
    } else {
        loss += softplus(gate_logit);
        grad[4 * k] = e;
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("patch loss is not finite ({loss})")));
    }
    Ok((loss, grad))
}

/// Gradient of the patch loss with respect to the raw head output.
pub fn loss_grad_raw(raw: &RawHeadOutput, targets: &TargetSet) -> Result<Vec<f64>> {
    loss_and_grad_raw(raw, targets).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn raw_from(alpha: &[f64], means: &[f64], scales: &[f64], gate: f64) -> RawHeadOutput {
        let mut v = alpha.to_vec();
        v.extend_from_slice(means);
        v.extend_from_slice(scales);
        v.push(gate);
        RawHeadOutput::new(v, alpha.len()).unwrap()
    }

    #[test]
    fn head_width_matches_401_for_100_components() {
        assert_eq!(head_width(100), 401);
    }

    #[test]
    fn raw_rejects_wrong_length_and_non_finite() {
        assert!(matches!(
            RawHeadOutput::new(vec![0.0; 10], 3),
            Err(Error::Config(_))
        ));
        let mut v = vec![0.0; head_width(3)];
        v[4] = f64::NAN;
        assert!(matches!(RawHeadOutput::new(v, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn equal_logits_give_uniform_alphas() {
        let raw = RawHeadOutput::new(vec![0.7; head_width(4)], 4).unwrap();
        let p = constrain(&raw).unwrap();
        for a in p.alphas() {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_scale_logit_gives_unit_sigma_and_zero_gate_logit_gives_half() {
        let raw = RawHeadOutput::new(vec![0.0; head_width(2)], 2).unwrap();
        let p = constrain(&raw).unwrap();
        for s in p.sigmas() {
            assert!((s - 1.0).abs() <= SIGMA_FLOOR + 1e-15);
        }
        assert_eq!(p.gate_e(), 0.5);
    }

    #[test]
    fn constrain_reports_overflowing_scale() {
        let raw = raw_from(&[0.0], &[0.5, 0.5], &[800.0], 0.0);
        assert!(matches!(constrain(&raw), Err(Error::Numeric(_))));
    }

    #[test]
    fn kernel_density_values() {
        let v = kernel_density([0.3, 0.4], 1.0, [0.3, 0.4]).unwrap();
        assert!((v - 0.159_154_943_091_895_3).abs() < 1e-12);
        let v = kernel_density([0.0, 0.0], 1.0, [1.0, 0.0]).unwrap();
        assert!((v - (-0.5f64).exp() / (2.0 * PI)).abs() < 1e-15);
        assert!((v - 0.096_532).abs() < 1e-6);
        let a = kernel_density([0.2, 0.2], 0.3, [0.2, 0.2]).unwrap();
        let b = kernel_density([0.2, 0.2], 0.6, [0.2, 0.2]).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_density_rejects_nonpositive_sigma() {
        assert!(kernel_density([0.0, 0.0], 0.0, [0.0, 0.0]).is_err());
        assert!(kernel_density([0.0, 0.0], -1.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn single_component_mixture_is_the_kernel() {
        let p = MixtureParams::new(vec![1.0], vec![[0.4, 0.6]], vec![0.2], 0.5).unwrap();
        let t = [0.5, 0.5];
        let k = kernel_density([0.4, 0.6], 0.2, t).unwrap();
        assert!((mixture_density(&p, t) - k).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_equals_single_component() {
        let t = [0.5, 0.5];
        let p = MixtureParams::new(
            vec![0.5, 0.5],
            vec![[0.4, 0.5], [0.6, 0.5]],
            vec![0.1, 0.1],
            0.5,
        )
        .unwrap();
        let single = kernel_density([0.4, 0.5], 0.1, t).unwrap();
        assert!((mixture_density(&p, t) - single).abs() < 1e-14);
    }

    #[test]
    fn empty_patch_at_half_gate_costs_ln2() {
        let p = MixtureParams::new(vec![1.0], vec![[0.5, 0.5]], vec![0.1], 0.5).unwrap();
        let loss = nll_loss(&[p], &[TargetSet::empty()]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn target_at_mean_with_saturated_gate() {
        let p = MixtureParams::new(vec![1.0], vec![[0.5, 0.5]], vec![1.0], 1.0 - 1e-12).unwrap();
        let t = TargetSet::new(vec![[0.5, 0.5]]).unwrap();
        let loss = nll_loss(&[p], &[t]).unwrap();
        assert!((loss - 1.837_877).abs() < 1e-6);
    }

    #[test]
    fn misaligned_batches_are_rejected() {
        let p = MixtureParams::new(vec![1.0], vec![[0.5, 0.5]], vec![0.1], 0.5).unwrap();
        assert!(matches!(nll_loss(&[p], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn responsibilities_trivial_cases() {
        let p = MixtureParams::new(vec![1.0], vec![[0.5, 0.5]], vec![0.1], 0.5).unwrap();
        assert_eq!(responsibilities(&p, [0.1, 0.9]), vec![1.0]);

        let p = MixtureParams::new(
            vec![0.3, 0.7],
            vec![[0.2, 0.2], [0.2, 0.2]],
            vec![0.05, 0.05],
            0.5,
        )
        .unwrap();
        for t in [[0.2, 0.2], [0.9, 0.1], [0.5, 0.7]] {
            let r = responsibilities(&p, t);
            assert!((r[0] - 0.3).abs() < 1e-12 && (r[1] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_targets_only_touch_the_gate() {
        let raw = raw_from(&[0.1, -0.4], &[0.2, 0.3, 0.7, 0.8], &[-2.0, -1.5], 0.3);
        let g = loss_grad_raw(&raw, &TargetSet::empty()).unwrap();
        assert!(g[..g.len() - 1].iter().all(|v| *v == 0.0));
        assert!((g[g.len() - 1] - sigmoid(0.3)).abs() < 1e-15);
    }

    #[test]
    fn target_at_sole_mean_has_zero_mean_gradient() {
        let raw = raw_from(&[0.0], &[0.25, 0.75], &[-2.0], 1.0);
        let t = TargetSet::new(vec![[0.25, 0.75]]).unwrap();
        let g = loss_grad_raw(&raw, &t).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
        assert!((g[4] - (sigmoid(1.0) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn far_target_at_floor_scale_stays_finite() {
        let s = (SIGMA_FLOOR * 1e-9).ln();
        let raw = raw_from(&[0.0, 0.0], &[0.0, 0.0, 1.0, 1.0], &[s, s], 2.0);
        let t = TargetSet::new(vec![[0.5, 0.5]]).unwrap();
        let params = constrain(&raw).unwrap();
        // Move the target far away by shifting the means instead.
        let far = MixtureParams::new(
            params.alphas().to_vec(),
            vec![[10.5, 0.5], [0.5, -9.5]],
            params.sigmas().to_vec(),
            params.gate_e(),
        )
        .unwrap();
        let loss = nll_loss(&[far], std::slice::from_ref(&t)).unwrap();
        assert!(loss.is_finite() && loss > 1e6);
        let raw_far = raw_from(&[0.0, 0.0], &[10.5, 0.5, 0.5, -9.5], &[s, s], 2.0);
        let (l, g) = loss_and_grad_raw(&raw_far, &t).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
        assert!((l - loss).abs() / loss < 1e-12);
    }

    #[test]
    fn raw_loss_matches_constrained_loss() {
        let raw = raw_from(
            &[0.3, -1.2, 0.8],
            &[0.1, 0.2, 0.5, 0.5, 0.9, 0.4],
            &[-2.0, -1.0, -3.0],
            -0.7,
        );
        let t = TargetSet::new(vec![[0.12, 0.25], [0.85, 0.45], [0.5, 0.6]]).unwrap();
        let (l, _) = loss_and_grad_raw(&raw, &t).unwrap();
        let p = constrain(&raw).unwrap();
        let expected = patch_nll(&p, &t);
        assert!((l - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}
