use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CaseSet, SplitRatio, Split};
use crate::error::{Error, Result};

/// Largest-remainder apportionment of `count` items over the ratio parts.
/// Ties on the remainder go to the earlier part (train, then valid).
pub fn apportion(count: usize, ratio: &SplitRatio) -> [usize; 3] {
    let parts = ratio.parts().map(|p| p as usize);
    let total: usize = parts.iter().sum();
    let mut sizes = [0usize; 3];
    let mut remainders = [0usize; 3];
    for i in 0..3 {
        let numerator = count * parts[i];
        sizes[i] = numerator / total;
        remainders[i] = numerator % total;
    }
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take(count - assigned) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles the innocent cases, splits them by `ratio` and appends them to `base`.
pub fn merge_innocent(
    base: &CaseSet,
    innocent: &CaseSet,
    ratio: &SplitRatio,
    seed: u64,
) -> Result<CaseSet> {
    ratio.validate()?;
    if let Some(bad) = innocent.iter().find(|c| !c.charge.is_innocent()) {
        return Err(Error::Validation(format!(
            "case `{}` in the innocent set is labeled `{}`",
            bad.id, bad.charge
        )));
    }
    if innocent.is_empty() {
        return Ok(base.clone());
    }
    let mut extra: Vec<_> = innocent.cases().to_vec();
    extra.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = apportion(extra.len(), ratio);
    let mut offset = 0;
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for case in &mut extra[offset..offset + size] {
            case.split = split;
        }
        offset += size;
    }
    let mut cases = base.cases().to_vec();
    cases.extend(extra);
    CaseSet::new(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Case, ChargeLabel};
    use proptest::prelude::*;

    fn innocent_cases(n: usize) -> CaseSet {
        CaseSet::new(
            (0..n)
                .map(|i| {
                    Case::from_texts(format!("i{i}"), &["x"], ChargeLabel::Innocent, Split::Train)
                        .unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    fn split_counts(set: &CaseSet) -> [usize; 3] {
        let mut out = [0; 3];
        for c in set {
            out[c.split as usize] += 1;
        }
        out
    }

    #[test]
    fn ten_cases_split_exactly() {
        let merged =
            merge_innocent(&CaseSet::default(), &innocent_cases(10), &SplitRatio::default(), 1)
                .unwrap();
        assert_eq!(split_counts(&merged), [5, 3, 2]);
    }

    #[test]
    fn four_hundred_sixty_two_cases() {
        // 462 * (5, 3, 2) / 10 = 231.0, 138.6, 92.4 -> floors 231/138/92, one leftover
        // goes to the largest remainder (valid).
        assert_eq!(apportion(462, &SplitRatio::default()), [231, 139, 92]);
        let merged =
            merge_innocent(&CaseSet::default(), &innocent_cases(462), &SplitRatio::default(), 9)
                .unwrap();
        assert_eq!(split_counts(&merged), [231, 139, 92]);
    }

    #[test]
    fn zero_innocent_returns_base() {
        let base = CaseSet::new(vec![Case::from_texts(
            "b",
            &["y"],
            ChargeLabel::charge("T"),
            Split::Valid,
        )
        .unwrap()])
        .unwrap();
        let merged =
            merge_innocent(&base, &CaseSet::default(), &SplitRatio::default(), 3).unwrap();
        assert_eq!(merged, base);
    }

    #[test]
    fn guilty_case_in_innocent_set_is_rejected() {
        let bad = CaseSet::new(vec![Case::from_texts(
            "g",
            &["y"],
            ChargeLabel::charge("T"),
            Split::Train,
        )
        .unwrap()])
        .unwrap();
        assert!(merge_innocent(&CaseSet::default(), &bad, &SplitRatio::default(), 0).is_err());
    }

    #[test]
    fn base_cases_untouched_and_seed_determines_assignment() {
        let base = CaseSet::new(vec![Case::from_texts(
            "b",
            &["y"],
            ChargeLabel::charge("T"),
            Split::Test,
        )
        .unwrap()])
        .unwrap();
        let a = merge_innocent(&base, &innocent_cases(20), &SplitRatio::default(), 5).unwrap();
        let b = merge_innocent(&base, &innocent_cases(20), &SplitRatio::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cases()[0], base.cases()[0]);
    }

    proptest! {
        #[test]
        fn apportionment_sums_and_stays_within_one(
            count in 0usize..5000,
            t in 1u32..20, v in 1u32..20, s in 1u32..20,
        ) {
            let ratio = SplitRatio::new(t, v, s).unwrap();
            let sizes = apportion(count, &ratio);
            prop_assert_eq!(sizes.iter().sum::<usize>(), count);
            let total = (t + v + s) as f64;
            for (size, part) in sizes.iter().zip(ratio.parts()) {
                let exact = count as f64 * part as f64 / total;
                prop_assert!((*size as f64 - exact).abs() < 1.0);
            }
        }

        #[test]
        fn split_sizes_do_not_depend_on_seed(count in 0usize..60, seed in any::<u64>()) {
            let merged = merge_innocent(
                &CaseSet::default(), &innocent_cases(count), &SplitRatio::default(), seed,
            ).unwrap();
            prop_assert_eq!(split_counts(&merged), apportion(count, &SplitRatio::default()));
        }
    }
}
