//! Meme-level stratified k-fold partitions.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Meme ids per fold, sorted.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn fold_of(&self, meme_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.binary_search_by(|m| m.as_str().cmp(meme_id)).is_ok())
    }

    /// Memes outside fold `i`, sorted.
    pub fn training(&self, i: usize) -> Vec<String> {
        let mut out: Vec<String> = self.folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.clone()).collect();
        out.sort();
        out
    }
}

/// Stratified partition of `(meme_id, stratum)` pairs: within each stratum the
/// memes are shuffled and dealt round-robin, continuing the rotation across
/// strata so fold sizes differ by at most one. Every stratum needs ≥ k memes.
pub fn make_folds(memes: &[(String, usize)], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    let mut strata: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (m, s) in memes {
        strata.entry(*s).or_default().push(m.clone());
    }
    if k < 2 {
        return Err(EvalError::TooFewExamples(format!("k = {k}")));
    }
    for (s, v) in &strata {
        if v.len() < k {
            return Err(EvalError::TooFewExamples(format!("stratum {s} has {} memes for {k} folds", v.len())));
        }
    }
    let mut rng = stream(seed, "folds");
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for v in strata.values_mut() {
        v.sort();
        v.dedup();
        v.shuffle(&mut rng);
        for m in v.iter() {
            folds[next % k].push(m.clone());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_binary() {
        let memes: Vec<(String, usize)> = (0..100).map(|i| (format!("m{i:03}"), i % 2)).collect();
        let plan = make_folds(&memes, 5, 1).unwrap();
        for f in &plan.folds {
            assert_eq!(f.len(), 20);
            let pos = f.iter().filter(|m| m[1..].parse::<usize>().unwrap() % 2 == 1).count();
            assert!((9..=11).contains(&pos));
        }
        assert_eq!(plan, make_folds(&memes, 5, 1).unwrap());
        assert_ne!(plan, make_folds(&memes, 5, 2).unwrap());
        let mut all: Vec<String> = plan.folds.concat();
        all.sort();
        assert_eq!(all.len(), 100);
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(plan.fold_of("m007").map(|i| plan.folds[i].contains(&"m007".to_string())), Some(true));
        assert_eq!(plan.training(0).len(), 80);
    }

    #[test]
    fn too_few() {
        let memes: Vec<(String, usize)> = (0..12).map(|i| (format!("m{i}"), usize::from(i < 3))).collect();
        assert!(matches!(make_folds(&memes, 5, 0), Err(EvalError::TooFewExamples(_))));
    }
}
