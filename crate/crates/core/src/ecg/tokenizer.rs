//! Patch decomposition of an L x T signal and uniform-across-leads masking.

use rand::Rng;

use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Non-overlapping decomposition of an `[leads, t]` signal into
/// `leads * patch_count` temporal patches of length `patch_len`.
///
/// Patches are stored flat in lead-major, time-minor order: row `l * n + p`
/// holds lead `l`, patch `p`. Reassembling the patches in order reproduces
/// the source signal bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<F> {
    patches: Vec<F>,
    pub leads: usize,
    pub patch_count: usize,
    pub patch_len: usize,
}

impl<F: Scalar> PatchGrid<F> {
    /// Flat `[leads * patch_count, patch_len]` view.
    pub fn data(&self) -> &[F] {
        &self.patches
    }

    pub fn rows(&self) -> usize {
        self.leads * self.patch_count
    }

    pub fn patch(&self, lead: usize, patch: usize) -> &[F] {
        let row = lead * self.patch_count + patch;
        &self.patches[row * self.patch_len..(row + 1) * self.patch_len]
    }
}

/// Splits `signal: [leads, t]` into `patch_count` temporal patches per lead.
pub fn patchify<F: Scalar>(signal: &Tensor<F>, patch_count: usize) -> Result<PatchGrid<F>> {
    let shape = signal.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (leads, t) = (shape[0], shape[1]);
    if patch_count == 0 || t % patch_count != 0 {
        let divisors: Vec<usize> = (1..=t).filter(|d| t % d == 0).collect();
        return Err(Error::invalid(format!(
            "patchify: signal length {t} not divisible into {patch_count} patches; \
             valid patch counts: {divisors:?}"
        )));
    }
    // row-major [leads, t] already tiles as lead-major patches
    Ok(PatchGrid {
        patches: signal.data().to_vec(),
        leads,
        patch_count,
        patch_len: t / patch_count,
    })
}

/// Inverse of [`patchify`]; bit-exact.
pub fn unpatchify<F: Scalar>(grid: &PatchGrid<F>) -> Tensor<F> {
    Tensor::new(
        vec![grid.leads, grid.patch_count * grid.patch_len],
        grid.patches.clone(),
    )
    .expect("grid dimensions are consistent")
}

/// Masked (lead, patch) index set with exactly `round(patch_count * ratio)`
/// masked patches in every lead.
#[derive(Debug, Clone)]
pub struct MaskSet {
    pub leads: usize,
    pub patch_count: usize,
    pub per_lead: usize,
    pub ratio: f64,
    masked: Vec<bool>,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.leads * self.per_lead
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_masked(&self, lead: usize, patch: usize) -> bool {
        self.masked[lead * self.patch_count + patch]
    }

    /// Masked flat row indices in canonical lead-major, time-minor order.
    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Visible flat row indices in canonical lead-major, time-minor order.
    pub fn visible_rows(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// Masked (lead, patch) pairs.
    pub fn masked_pairs(&self) -> Vec<(usize, usize)> {
        self.masked_rows()
            .into_iter()
            .map(|r| (r / self.patch_count, r % self.patch_count))
            .collect()
    }
}

/// Selects `round(patch_count * ratio)` patches to mask in each lead
/// independently, uniformly without replacement. Deterministic given
/// `(leads, patch_count, ratio, seed)`.
///
/// The rounding rule is round-to-nearest with ties away from zero. Ratios
/// that would mask nothing or leave no visible patch are rejected.
pub fn select_mask(leads: usize, patch_count: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 || ratio == 1.0 || !ratio.is_finite() {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} outside (0, 1)"
        )));
    }
    if leads == 0 || patch_count == 0 {
        return Err(Error::invalid("mask selection needs leads > 0 and patches > 0"));
    }
    let per_lead = (patch_count as f64 * ratio).round() as usize;
    if per_lead == 0 {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} rounds to 0 masked patches per lead"
        )));
    }
    if per_lead >= patch_count {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} rounds to {per_lead} of {patch_count} patches per lead, \
             leaving no visible patches"
        )));
    }
    let mut rng = rng_from(seed);
    let mut masked = vec![false; leads * patch_count];
    let mut pool: Vec<usize> = (0..patch_count).collect();
    for lead in 0..leads {
        // partial Fisher-Yates: first `per_lead` entries become the sample
        for i in 0..per_lead {
            let j = rng.gen_range(i..patch_count);
            pool.swap(i, j);
            masked[lead * patch_count + pool[i]] = true;
        }
    }
    Ok(MaskSet {
        leads,
        patch_count,
        per_lead,
        ratio,
        masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(leads: usize, t: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let data = (0..leads * t).map(|i| f(i / t, i % t)).collect();
        Tensor::new(vec![leads, t], data).unwrap()
    }

    #[test]
    fn patchify_single_lead_example() {
        let s = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grid = patchify(&s, 2).unwrap();
        assert_eq!(grid.patch(0, 0), &[1.0, 2.0]);
        assert_eq!(grid.patch(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn patchify_desk_scale_counts() {
        let s = signal(12, 1000, |l, t| (l * 7 + t) as f64);
        let grid = patchify(&s, 50).unwrap();
        assert_eq!(grid.rows(), 600);
        assert_eq!(grid.patch_len, 20);
    }

    #[test]
    fn patchify_round_trip_is_bit_exact() {
        let s = signal(3, 24, |l, t| ((l + 1) as f64 * 0.37 + t as f64).sin());
        let grid = patchify(&s, 6).unwrap();
        assert_eq!(unpatchify(&grid), s);
    }

    #[test]
    fn indivisible_patch_count_lists_divisors() {
        let s = signal(1, 12, |_, t| t as f64);
        let err = patchify(&s, 5).unwrap_err().to_string();
        assert!(err.contains("valid patch counts"));
        assert!(err.contains("[1, 2, 3, 4, 6, 12]"));
    }

    #[test]
    fn mask_counts_exact_and_uniform_across_leads() {
        let mask = select_mask(12, 100, 0.75, 99).unwrap();
        assert_eq!(mask.per_lead, 75);
        assert_eq!(mask.len(), 900);
        for lead in 0..12 {
            let count = (0..100).filter(|&p| mask.is_masked(lead, p)).count();
            assert_eq!(count, 75);
        }
    }

    #[test]
    fn degenerate_ratios_rejected() {
        assert!(select_mask(2, 4, 0.0, 1).is_err());
        assert!(select_mask(2, 4, 1.0, 1).is_err());
        assert!(select_mask(2, 4, 0.95, 1).is_err()); // rounds to 4 of 4
        assert!(select_mask(2, 4, 0.05, 1).is_err()); // rounds to 0
    }

    #[test]
    fn mask_is_deterministic_per_seed() {
        let a = select_mask(4, 10, 0.5, 123).unwrap();
        let b = select_mask(4, 10, 0.5, 123).unwrap();
        let c = select_mask(4, 10, 0.5, 124).unwrap();
        assert_eq!(a.masked_rows(), b.masked_rows());
        assert_ne!(a.masked_rows(), c.masked_rows());
    }

    #[test]
    fn masked_frequency_matches_ratio() {
        // Monte-Carlo oracle: every index masked with frequency r +- 0.02
        let (n, r, draws) = (4, 0.5, 10_000);
        let mut hits = vec![0usize; n];
        for seed in 0..draws {
            let mask = select_mask(1, n, r, seed).unwrap();
            for (p, h) in hits.iter_mut().enumerate() {
                if mask.is_masked(0, p) {
                    *h += 1;
                }
            }
        }
        for &h in &hits {
            let freq = h as f64 / draws as f64;
            assert!((freq - r).abs() < 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn visible_and_masked_partition_in_canonical_order() {
        let mask = select_mask(3, 8, 0.5, 7).unwrap();
        let mut all = mask.visible_rows();
        all.extend(mask.masked_rows());
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
        assert!(mask.visible_rows().windows(2).all(|w| w[0] < w[1]));
    }
}
