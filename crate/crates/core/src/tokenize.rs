//! Patch tokenization, training-time masking and inference placeholders.

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizeError {
    #[error("cannot patchify an empty series")]
    EmptySeries,
    #[error("patch length must be positive")]
    ZeroPatchLen,
    #[error("mask ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("mask ratio {rho} masks no token out of {n_tokens}")]
    NothingToMask { rho: f64, n_tokens: usize },
    #[error("placeholder count must be positive")]
    NoPlaceholders,
    #[error("no observed values left to normalise by")]
    EmptyContext,
}

/// Series cut into `n_tokens` rows of `patch_len` points; the first row
/// carries `pad_count` copies of the first observation in front.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patches: Vec<f64>,
    patch_len: usize,
    n_tokens: usize,
    pad_count: usize,
}

impl PatchGrid {
    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn patches(&self) -> &[f64] {
        &self.patches
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    /// The original series, pads removed.
    pub fn unpatchify(&self) -> Vec<f64> {
        self.patches[self.pad_count..].to_vec()
    }
}

pub fn patchify(series: &[f64], patch_len: usize) -> Result<PatchGrid, TokenizeError> {
    if series.is_empty() {
        return Err(TokenizeError::EmptySeries);
    }
    if patch_len == 0 {
        return Err(TokenizeError::ZeroPatchLen);
    }
    let n_tokens = series.len().div_ceil(patch_len);
    let pad_count = n_tokens * patch_len - series.len();
    let mut patches = Vec::with_capacity(n_tokens * patch_len);
    patches.extend(std::iter::repeat(series[0]).take(pad_count));
    patches.extend_from_slice(series);
    Ok(PatchGrid {
        patches,
        patch_len,
        n_tokens,
        pad_count,
    })
}

/// The model input: token rows, the masked index set and instance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    tokens: Vec<f64>,
    patch_len: usize,
    mask: Vec<bool>,
    mask_idx: Vec<usize>,
    pad_count: usize,
    mu: f64,
    sigma: f64,
}

impl MaskedSequence {
    /// Masked rows are overwritten with zeros; the model never reads them.
    fn build(
        mut tokens: Vec<f64>,
        patch_len: usize,
        mask: Vec<bool>,
        pad_count: usize,
    ) -> Result<Self, TokenizeError> {
        let mask_idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        for &i in &mask_idx {
            tokens[i * patch_len..(i + 1) * patch_len].fill(0.0);
        }
        let (mu, sigma) = observed_stats(&tokens, patch_len, &mask, pad_count)?;
        Ok(Self {
            tokens,
            patch_len,
            mask,
            mask_idx,
            pad_count,
            mu,
            sigma,
        })
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn n_tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn mask_idx(&self) -> &[usize] {
        &self.mask_idx
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.n_tokens()).collect()
    }
}

fn observed_stats(
    tokens: &[f64],
    patch_len: usize,
    mask: &[bool],
    pad_count: usize,
) -> Result<(f64, f64), TokenizeError> {
    let observed = || {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .flat_map(move |(i, _)| {
                let skip = if i == 0 { pad_count } else { 0 };
                tokens[i * patch_len + skip..(i + 1) * patch_len]
                    .iter()
                    .copied()
            })
    };
    let count = observed().count();
    if count == 0 {
        return Err(TokenizeError::EmptyContext);
    }
    let mu = observed().sum::<f64>() / count as f64;
    let var = observed().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
    Ok((mu, var.sqrt()))
}

/// Masks exactly `floor(rho · N)` tokens chosen uniformly without replacement.
pub fn mask_random<R: Rng + ?Sized>(
    grid: &PatchGrid,
    rho: f64,
    rng: &mut R,
) -> Result<MaskedSequence, TokenizeError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(TokenizeError::BadRatio(rho));
    }
    let n = grid.n_tokens;
    let count = (rho * n as f64).floor() as usize;
    if rho > 0.0 && count == 0 {
        return Err(TokenizeError::NothingToMask { rho, n_tokens: n });
    }
    let mut mask = vec![false; n];
    if count > 0 {
        for i in sample(rng, n, count).iter() {
            mask[i] = true;
        }
    }
    MaskedSequence::build(grid.patches.clone(), grid.patch_len, mask, grid.pad_count)
}

/// Appends `n_future` masked placeholder tokens after the observed grid.
pub fn append_placeholders(
    grid: &PatchGrid,
    n_future: usize,
) -> Result<MaskedSequence, TokenizeError> {
    if n_future == 0 {
        return Err(TokenizeError::NoPlaceholders);
    }
    let mut tokens = grid.patches.clone();
    tokens.resize(tokens.len() + n_future * grid.patch_len, 0.0);
    let mut mask = vec![false; grid.n_tokens];
    mask.resize(grid.n_tokens + n_future, true);
    MaskedSequence::build(tokens, grid.patch_len, mask, grid.pad_count)
}

/// Mean and population standard deviation over observed, unpadded values.
pub fn instance_stats(seq: &MaskedSequence) -> Result<(f64, f64), TokenizeError> {
    observed_stats(&seq.tokens, seq.patch_len, &seq.mask, seq.pad_count)
}

/// Builds a sequence from an explicit mask, e.g. to mask every token.
pub fn mask_explicit(grid: &PatchGrid, mask: Vec<bool>) -> Result<MaskedSequence, TokenizeError> {
    assert_eq!(
        mask.len(),
        grid.n_tokens,
        "mask length must match token count"
    );
    MaskedSequence::build(grid.patches.clone(), grid.patch_len, mask, grid.pad_count)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn series(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    #[test]
    fn patchify_examples() {
        let g = patchify(&series(8), 4).unwrap();
        assert_eq!((g.n_tokens(), g.pad_count()), (2, 0));
        let g = patchify(&series(10), 4).unwrap();
        assert_eq!((g.n_tokens(), g.pad_count()), (3, 2));
        assert_eq!(g.row(0), &[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(g.row(2), &[7.0, 8.0, 9.0, 10.0]);
        let g = patchify(&series(4), 4).unwrap();
        assert_eq!(g.n_tokens(), 1);
        assert_eq!(patchify(&[], 4), Err(TokenizeError::EmptySeries));
        assert_eq!(patchify(&[1.0], 0), Err(TokenizeError::ZeroPatchLen));
    }

    #[test]
    fn mask_random_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = patchify(&series(16), 4).unwrap();
        assert!(mask_random(&g, 0.0, &mut rng)
            .unwrap()
            .mask_idx()
            .is_empty());
        assert_eq!(mask_random(&g, 0.5, &mut rng).unwrap().mask_idx().len(), 2);

        let g10 = patchify(&series(40), 4).unwrap();
        let a = mask_random(&g10, 0.2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = mask_random(&g10, 0.2, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.mask_idx(), b.mask_idx());
        assert_eq!(a.mask_idx().len(), 2);
        assert!(a.mask_idx().windows(2).all(|w| w[0] < w[1]));

        assert_eq!(
            mask_random(&g, 1.0, &mut rng),
            Err(TokenizeError::BadRatio(1.0))
        );
        assert!(mask_random(&g, -0.1, &mut rng).is_err());
        assert!(matches!(
            mask_random(&g, 0.1, &mut rng),
            Err(TokenizeError::NothingToMask { .. })
        ));
    }

    #[test]
    fn placeholders_examples() {
        let g = patchify(&series(32), 4).unwrap();
        let s = append_placeholders(&g, 3).unwrap();
        assert_eq!(s.n_tokens(), 11);
        assert_eq!(s.mask_idx(), &[8, 9, 10]);
        let s1 = append_placeholders(&g, 1).unwrap();
        assert_eq!(s1.mask_idx(), &[8]);
        for i in 0..8 {
            assert_eq!(s.token(i), g.row(i));
        }
        assert_eq!(s.positions(), (0..11).collect::<Vec<_>>());
        assert_eq!(
            append_placeholders(&g, 0),
            Err(TokenizeError::NoPlaceholders)
        );
    }

    #[test]
    fn stats_examples() {
        let g = patchify(&[1.0; 4], 2).unwrap();
        let s = append_placeholders(&g, 1).unwrap();
        assert_eq!(instance_stats(&s).unwrap(), (1.0, 0.0));
        let g = patchify(&[1.0, 3.0], 2).unwrap();
        let s = append_placeholders(&g, 2).unwrap();
        assert_eq!(instance_stats(&s).unwrap(), (2.0, 1.0));
        assert_eq!((s.mu(), s.sigma()), (2.0, 1.0));
        assert_eq!(
            mask_explicit(&g, vec![true]),
            Err(TokenizeError::EmptyContext)
        );
    }

    #[test]
    fn stats_exclude_pads_and_masked_targets() {
        // pads repeat the first value 10.0; they must not bias the mean
        let g = patchify(&[10.0, 0.0, 2.0, 100.0, 200.0], 3).unwrap();
        assert_eq!(g.pad_count(), 1);
        let s = mask_explicit(&g, vec![false, true]).unwrap();
        assert_eq!(s.mu(), 5.0);
        assert!(s.token(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_and_inference_paths_agree_structurally() {
        let g = patchify(&series(12), 4).unwrap();
        let placeholders = append_placeholders(&patchify(&series(8), 4).unwrap(), 1).unwrap();
        let explicit = mask_explicit(&g, vec![false, false, true]).unwrap();
        assert_eq!(placeholders, explicit);
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(len in 1usize..512, p in 1usize..=64) {
            let s: Vec<f64> = (0..len).map(|i| (i as f64 * 0.37).sin()).collect();
            let g = patchify(&s, p).unwrap();
            prop_assert_eq!(g.n_tokens(), len.div_ceil(p));
            prop_assert!(g.pad_count() < p);
            prop_assert_eq!(g.n_tokens() * p - len, g.pad_count());
            prop_assert_eq!(g.unpatchify(), s);
        }

        #[test]
        fn mask_count_is_floor(n in 2usize..100, rho in 0.05f64..0.95, seed in 0u64..1000) {
            prop_assume!((rho * n as f64).floor() >= 1.0);
            let g = patchify(&vec![1.0; n * 2], 2).unwrap();
            let s = mask_random(&g, rho, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(s.mask_idx().len(), (rho * n as f64).floor() as usize);
        }

        #[test]
        fn stats_ignore_mask_choice(vals in proptest::collection::vec(-50.0f64..50.0, 8)) {
            // two different masks over sequences whose observed values agree
            let mut other = vals.clone();
            other[4..6].copy_from_slice(&[999.0, -999.0]);
            let a = mask_explicit(&patchify(&vals, 2).unwrap(), vec![false, false, true, false]).unwrap();
            let b = mask_explicit(&patchify(&other, 2).unwrap(), vec![false, false, true, false]).unwrap();
            prop_assert_eq!(instance_stats(&a).unwrap(), instance_stats(&b).unwrap());
        }
    }
}
