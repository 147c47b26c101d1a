//! Record-atomic stratified folds and class balancing.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

use super::ClassLabel;

/// Splits records into `k` stratified folds, returning for each fold
/// the indices into `classes` (one entry per record, not per window;
/// windows always follow their source record, which is what keeps
/// folds leak-free).
///
/// Within each class the records are dealt to consecutive folds after
/// a seeded shuffle, so per-class and total fold sizes each differ by
/// at most one record.
pub fn split_folds(classes: &[ClassLabel], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Fold(format!("k must be at least 2, got {k}")));
    }
    if classes.len() < k {
        return Err(Error::Fold(format!(
            "cannot split {} records into {k} folds",
            classes.len()
        )));
    }
    let mut rng = rng::stream(seed, &[tag::FOLDS]);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut start = 0usize;
    for class in [ClassLabel::Normal, ClassLabel::Abnormal] {
        let mut group: Vec<usize> =
            (0..classes.len()).filter(|&i| classes[i] == class).collect();
        group.shuffle(&mut rng);
        for (i, idx) in group.iter().enumerate() {
            folds[(start + i) % k].push(*idx);
        }
        start += group.len();
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(folds)
}

/// Undersamples the majority class to the minority count, returning the
/// kept indices in their original order. Requires both classes.
pub fn balance_classes(classes: &[ClassLabel], seed: u64) -> Result<Vec<usize>> {
    let normal: Vec<usize> = (0..classes.len())
        .filter(|&i| classes[i] == ClassLabel::Normal)
        .collect();
    let abnormal: Vec<usize> = (0..classes.len())
        .filter(|&i| classes[i] == ClassLabel::Abnormal)
        .collect();
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Balance(
            "balancing requires both classes to be present".into(),
        ));
    }
    if normal.len() == abnormal.len() {
        return Ok((0..classes.len()).collect());
    }
    let (majority, minority) = if normal.len() > abnormal.len() {
        (&normal, &abnormal)
    } else {
        (&abnormal, &normal)
    };
    let mut rng = rng::stream(seed, &[tag::BALANCE]);
    let picked = rand::seq::index::sample(&mut rng, majority.len(), minority.len());
    let mut keep: Vec<usize> = minority.clone();
    keep.extend(picked.iter().map(|j| majority[j]));
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(normal: usize, abnormal: usize) -> Vec<ClassLabel> {
        // Interleave so index order does not trivially match class order.
        let mut out = Vec::new();
        let (mut n, mut a) = (normal, abnormal);
        while n > 0 || a > 0 {
            if n > 0 {
                out.push(ClassLabel::Normal);
                n -= 1;
            }
            if a > 0 {
                out.push(ClassLabel::Abnormal);
                a -= 1;
            }
        }
        out
    }

    #[test]
    fn folds_partition_all_records() {
        let classes = labels(14, 14);
        let folds = split_folds(&classes, 5, 11).unwrap();
        let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..28).collect::<Vec<_>>());
    }

    #[test]
    fn fold_sizes_and_class_ratios_are_within_one() {
        for (n_norm, n_abn, k) in [(14, 14, 5), (7, 7, 5), (9, 4, 3), (20, 11, 10)] {
            let classes = labels(n_norm, n_abn);
            let folds = split_folds(&classes, k, 3).unwrap();
            let per_class = |fold: &Vec<usize>, c: ClassLabel| {
                fold.iter().filter(|&&i| classes[i] == c).count()
            };
            for c in [ClassLabel::Normal, ClassLabel::Abnormal] {
                let counts: Vec<usize> = folds.iter().map(|f| per_class(f, c)).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "class {c:?} counts {counts:?}");
            }
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "total sizes {sizes:?}");
        }
    }

    #[test]
    fn folds_are_deterministic_per_seed() {
        let classes = labels(10, 10);
        assert_eq!(
            split_folds(&classes, 4, 9).unwrap(),
            split_folds(&classes, 4, 9).unwrap()
        );
        assert_ne!(
            split_folds(&classes, 4, 9).unwrap(),
            split_folds(&classes, 4, 10).unwrap()
        );
    }

    #[test]
    fn degenerate_fold_requests_error() {
        let classes = labels(3, 3);
        assert!(matches!(split_folds(&classes, 1, 0), Err(Error::Fold(_))));
        assert!(matches!(split_folds(&classes, 7, 0), Err(Error::Fold(_))));
    }

    #[test]
    fn balancing_equalizes_counts_and_keeps_order() {
        let classes = labels(20, 8);
        let keep = balance_classes(&classes, 5).unwrap();
        let kept: Vec<ClassLabel> = keep.iter().map(|&i| classes[i]).collect();
        let n = kept.iter().filter(|c| **c == ClassLabel::Normal).count();
        let a = kept.len() - n;
        assert_eq!(n, 8);
        assert_eq!(a, 8);
        assert!(keep.windows(2).all(|w| w[0] < w[1]), "indices must stay sorted");
    }

    #[test]
    fn balancing_is_deterministic_and_seed_sensitive() {
        let classes = labels(30, 10);
        assert_eq!(
            balance_classes(&classes, 1).unwrap(),
            balance_classes(&classes, 1).unwrap()
        );
        assert_ne!(
            balance_classes(&classes, 1).unwrap(),
            balance_classes(&classes, 2).unwrap()
        );
    }

    #[test]
    fn balanced_input_passes_through() {
        let classes = labels(6, 6);
        assert_eq!(balance_classes(&classes, 0).unwrap(), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn single_class_cannot_balance() {
        let classes = vec![ClassLabel::Normal; 5];
        assert!(matches!(balance_classes(&classes, 0), Err(Error::Balance(_))));
    }
}
