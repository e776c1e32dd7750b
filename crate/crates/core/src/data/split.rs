use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Train/validation partition by record index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Label-stratified split. The validation size is `round(n * val_fraction)`
/// allotted to classes by largest remainder.
pub fn stratified_split(labels: &[u8], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Split(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let n = labels.len();
    let total_val = (n as f64 * val_fraction).round() as usize;
    if total_val == 0 || total_val >= n {
        return Err(Error::Split(format!("{n} records with fraction {val_fraction} leave an empty partition")));
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = seeded(seed);
    let mut members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * total_val as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    // stable sort keeps class order on equal remainders
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut missing = total_val - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(classes.len() * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < members[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut split = Split { train: Vec::new(), val: Vec::new() };
    for (c, m) in members.iter_mut().enumerate() {
        split.val.extend_from_slice(&m[..quota[c]]);
        split.train.extend_from_slice(&m[quota[c]..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}

/// `k` disjoint validation folds covering `0..n`, sizes within one.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::Split(format!("{k} folds for only {n} records")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Training indices for fold `f`: everything not in that fold.
pub fn fold_train_indices(folds: &[Vec<usize>], f: usize) -> Vec<usize> {
    let mut train: Vec<usize> = folds.iter().enumerate().filter(|(i, _)| *i != f).flat_map(|(_, v)| v.iter().copied()).collect();
    train.sort_unstable();
    train
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn five_percent_of_330() {
        let labels: Vec<u8> = (0..330).map(|i| u8::from(i % 3 == 0)).collect();
        let s = stratified_split(&labels, 0.05, 1).unwrap();
        assert!(s.val.len() == 16 || s.val.len() == 17);
        assert_eq!(s.val.len() + s.train.len(), 330);
        let pos = |idx: &[usize]| idx.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let global = 110.0 / 330.0;
        assert!((pos(&s.val) - global * s.val.len() as f64).abs() <= 1.0);
        assert!((pos(&s.train) - global * s.train.len() as f64).abs() <= 1.0);
        assert_eq!(s, stratified_split(&labels, 0.05, 1).unwrap());
    }

    #[test]
    fn single_label_and_errors() {
        let labels = vec![1u8; 40];
        let s = stratified_split(&labels, 0.25, 3).unwrap();
        assert_eq!(s.val.len(), 10);
        assert!(matches!(stratified_split(&labels, 0.0, 3), Err(Error::Split(_))));
        assert!(matches!(stratified_split(&[0, 1], 0.1, 3), Err(Error::Split(_))));
    }

    #[test]
    fn folds_examples() {
        let f = kfold_indices(10, 10, 0).unwrap();
        assert!(f.iter().all(|x| x.len() == 1));
        let f = kfold_indices(330, 10, 5).unwrap();
        assert!(f.iter().all(|x| x.len() == 33));
        assert!(matches!(kfold_indices(3, 4, 0), Err(Error::Split(_))));
        assert_eq!(fold_train_indices(&f, 2).len(), 297);
    }

    proptest! {
        #[test]
        fn folds_partition_exactly(n in 2usize..200, k in 2usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = kfold_indices(n, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let (min, max) = (folds.iter().map(Vec::len).min().unwrap(), folds.iter().map(Vec::len).max().unwrap());
            prop_assert!(max - min <= 1);
            prop_assert_eq!(folds, kfold_indices(n, k, seed).unwrap());
        }

        #[test]
        fn split_partitions_exactly(labels in proptest::collection::vec(0u8..2, 20..120), seed in any::<u64>()) {
            let s = stratified_split(&labels, 0.2, seed).unwrap();
            let mut all = [s.train.clone(), s.val.clone()].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
    }
}
