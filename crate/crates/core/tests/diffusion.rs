mod common;

use common::suites::{chi_square_critical, forward_mask_sigma, semi_ar_chi_square, semi_ar_exhaustive};
use maskdiff::diffusion::{complementary_mask, forward_mask, semi_ar_mask, MaskLevel, TokenSeq};
use maskdiff::tasks::MASK_ID;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn semi_ar_structure_is_exact_for_every_pattern() {
    assert_eq!(semi_ar_exhaustive(5, 4, 3), Ok(3 * 16));
}

#[test]
fn forward_mask_counts_stay_within_three_sigma() {
    for (t, seed) in [(0.1, 1), (0.5, 2), (0.9, 3)] {
        let sigma = forward_mask_sigma(12, t, 10_000, seed);
        assert!(sigma < 3.0, "t={t}: {sigma:.2} sigma");
    }
}

#[test]
fn active_block_counts_follow_the_binomial() {
    // z for alpha = 0.001
    let critical = chi_square_critical(4, 3.0902);
    for (q, seed) in [(0.25, 11), (0.5, 12), (0.75, 13)] {
        let (chi, df) = semi_ar_chi_square(4, q, 20_000, seed);
        assert_eq!(df, 4);
        assert!(chi < critical, "q={q}: chi-square {chi:.2} >= {critical:.2}");
    }
}

fn clean_seq(prompt: usize, tokens: Vec<u32>) -> TokenSeq {
    TokenSeq::new(tokens, prompt).unwrap()
}

fn seq_strategy() -> impl Strategy<Value = (TokenSeq, usize)> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(prompt, block_len, blocks)| {
        let len = prompt + block_len * blocks;
        prop::collection::vec(prop_oneof![Just(0u32), 2u32..24], len)
            .prop_map(move |tokens| (clean_seq(prompt, tokens), block_len))
    })
}

proptest! {
    #[test]
    fn prompt_is_never_masked((y, block_len) in seq_strategy(), t in 0.0f64..=1.0, q in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = forward_mask(&y, MaskLevel::new(t).unwrap(), &mut rng);
        prop_assert_eq!(&uniform.tokens[..y.prompt_len], y.prompt());
        let blocks = y.response_len() / block_len;
        for n in 0..blocks {
            let s = semi_ar_mask(&y, n, q, block_len, &mut rng).unwrap();
            prop_assert_eq!(&s.tokens[..y.prompt_len], y.prompt());
        }
    }

    #[test]
    fn semi_ar_layout((y, block_len) in seq_strategy(), q in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = y.response_len() / block_len;
        let n = seed as usize % blocks;
        let s = semi_ar_mask(&y, n, q, block_len, &mut rng).unwrap();
        let start = y.prompt_len + n * block_len;
        prop_assert_eq!(&s.tokens[..start], &y.tokens[..start]);
        prop_assert!(s.tokens[start + block_len..].iter().all(|&t| t == MASK_ID));
        for i in start..start + block_len {
            let masked = s.tokens[i] == MASK_ID;
            prop_assert_eq!(masked, s.active_mask().contains(&i));
            if !masked {
                prop_assert_eq!(s.tokens[i], y.tokens[i]);
            }
        }
        let listed: Vec<usize> = (0..s.tokens.len()).filter(|&i| s.tokens[i] == MASK_ID).collect();
        prop_assert_eq!(listed, s.masked_positions.clone());
    }

    #[test]
    fn complement_partitions_the_active_block((y, block_len) in seq_strategy(), q in 0.01f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = y.response_len() / block_len;
        let s = semi_ar_mask(&y, seed as usize % blocks, q, block_len, &mut rng).unwrap();
        let c = complementary_mask(&s, &y).unwrap();
        let range = s.active_range().unwrap();
        let mut union: Vec<usize> = s.active_mask().iter().chain(c.active_mask()).copied().collect();
        union.sort_unstable();
        prop_assert_eq!(union, range.clone().collect::<Vec<_>>());
        prop_assert!(s.active_mask().iter().all(|i| !c.active_mask().contains(i)));
        prop_assert_eq!(&c.tokens[..range.start], &s.tokens[..range.start]);
        prop_assert_eq!(&c.tokens[range.end..], &s.tokens[range.end..]);
        prop_assert_eq!(complementary_mask(&c, &y).unwrap(), s);
    }

    #[test]
    fn forward_mask_extremes_hold_for_any_sequence((y, _) in seq_strategy(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let none = forward_mask(&y, MaskLevel::new(0.0).unwrap(), &mut rng);
        prop_assert_eq!(&none.tokens, &y.tokens);
        let all = forward_mask(&y, MaskLevel::new(1.0).unwrap(), &mut rng);
        prop_assert_eq!(all.masked_positions, (y.prompt_len..y.len()).collect::<Vec<_>>());
    }
}
