use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::groups::{mask_instance, Background, Coalition, GROUP_NAMES, N_GROUPS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::rng::seeded;
use crate::scalar::Scalar;

/// Largest number of active groups for full enumeration.
pub const MAX_EXACT_GROUPS: usize = 15;
pub const DEFAULT_N_PERMS: usize = 2000;

/// A cooperative game over at most 32 players.
pub trait CoalitionModel {
    fn n_groups(&self) -> usize;
    fn group_name(&self, i: usize) -> String {
        format!("g{i}")
    }
    /// Values of the given coalitions, in order. The empty coalition must
    /// evaluate to the base value.
    fn evaluate(&self, coalitions: &[Coalition]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAttribution {
    pub name: String,
    pub phi: f64,
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub base_value: f64,
    pub fx: f64,
    pub n_samples: usize,
    pub groups: Vec<GroupAttribution>,
}

impl Attribution {
    pub fn phi(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.phi).collect()
    }

    pub fn additivity_residual(&self) -> f64 {
        (self.base_value + self.groups.iter().map(|g| g.phi).sum::<f64>() - self.fx).abs()
    }

    pub fn total_std_err(&self) -> f64 {
        self.groups.iter().map(|g| g.std_err).sum()
    }
}

fn full_mask(n: usize) -> Coalition {
    if n >= 32 {
        u32::MAX
    } else {
        (1u32 << n) - 1
    }
}

/// Exact Shapley values over `active` groups; the rest stay at instance
/// values and are reported with zero attribution.
pub fn shapley_exact(game: &dyn CoalitionModel, active: &[usize]) -> Result<Attribution> {
    let n = game.n_groups();
    check_groups(n, active)?;
    let k = active.len();
    if k > MAX_EXACT_GROUPS {
        return Err(Error::Capacity(format!(
            "{k} active groups exceed the exact limit of {MAX_EXACT_GROUPS}; use the permutation sampler"
        )));
    }
    let frozen = active.iter().fold(full_mask(n), |m, &g| m & !(1 << g));
    let to_mask = |sub: usize| {
        (0..k).filter(|&j| sub & (1 << j) != 0).fold(frozen, |m, j| m | (1 << active[j]))
    };
    let coalitions: Vec<Coalition> = (0..1usize << k).map(to_mask).collect();
    let v = game.evaluate(&coalitions)?;
    // |S|! (k - |S| - 1)! / k!
    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; k];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for sub in 0..1usize << k {
            if sub & bit != 0 {
                continue;
            }
            let s = sub.count_ones() as usize;
            let w = fact[s] * fact[k - s - 1] / fact[k];
            *p += w * (v[sub | bit] - v[sub]);
        }
    }
    Ok(Attribution {
        base_value: v[0],
        fx: v[(1 << k) - 1],
        n_samples: coalitions.len(),
        groups: (0..n)
            .map(|g| {
                let phi = active.iter().position(|&a| a == g).map_or(0.0, |j| phi[j]);
                GroupAttribution { name: game.group_name(g), phi, std_err: 0.0 }
            })
            .collect(),
    })
}

fn check_groups(n: usize, active: &[usize]) -> Result<()> {
    if n > 32 {
        return Err(Error::Capacity(format!("{n} groups exceed the 32-player limit")));
    }
    let mut seen = 0u64;
    for &g in active {
        if g >= n || seen & (1 << g) != 0 {
            return Err(Error::InvalidInput(format!("active group {g} is out of range or repeated")));
        }
        seen |= 1 << g;
    }
    Ok(())
}

/// Antithetic permutation sampling over all groups. Each drawn order is
/// used together with its reverse; `n_perms` counts both (odd counts round
/// up to a whole pair), and standard
/// errors come from the per-pair means.
pub fn shapley_sample(game: &dyn CoalitionModel, n_perms: usize, seed: u64) -> Result<Attribution> {
    let n = game.n_groups();
    check_groups(n, &[])?;
    if n_perms < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 permutations, got {n_perms}")));
    }
    let pairs = n_perms.div_ceil(2);
    let mut rng = seeded(seed);
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(2 * pairs);
    let mut base: Vec<usize> = (0..n).collect();
    for _ in 0..pairs {
        base.shuffle(&mut rng);
        orders.push(base.clone());
        orders.push(base.iter().rev().copied().collect());
    }
    // evaluate every distinct prefix coalition once
    let mut slot: HashMap<Coalition, usize> = HashMap::new();
    let mut unique: Vec<Coalition> = Vec::new();
    let mut register = |c: Coalition, slot: &mut HashMap<Coalition, usize>| {
        *slot.entry(c).or_insert_with(|| {
            unique.push(c);
            unique.len() - 1
        })
    };
    let prefix_slots: Vec<Vec<usize>> = orders
        .iter()
        .map(|o| {
            let mut c: Coalition = 0;
            let mut s = vec![register(c, &mut slot)];
            for &g in o {
                c |= 1 << g;
                s.push(register(c, &mut slot));
            }
            s
        })
        .collect();
    let v = game.evaluate(&unique)?;
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for p in 0..pairs {
        let mut pair = vec![0.0; n];
        for o in [2 * p, 2 * p + 1] {
            for (pos, &g) in orders[o].iter().enumerate() {
                let s = &prefix_slots[o];
                pair[g] += 0.5 * (v[s[pos + 1]] - v[s[pos]]);
            }
        }
        for g in 0..n {
            sum[g] += pair[g];
            sum_sq[g] += pair[g] * pair[g];
        }
    }
    let m = pairs as f64;
    let groups = (0..n)
        .map(|g| {
            let mean = sum[g] / m;
            let var = if pairs > 1 { ((sum_sq[g] - m * mean * mean) / (m - 1.0)).max(0.0) } else { 0.0 };
            GroupAttribution { name: game.group_name(g), phi: mean, std_err: (var / m).sqrt() }
        })
        .collect();
    Ok(Attribution {
        base_value: v[slot[&0]],
        fx: v[slot[&full_mask(n)]],
        n_samples: 2 * pairs,
        groups,
    })
}

/// The trained network as a game over the 25 input groups for one instance.
///
/// The empty coalition is worth the mean prediction over the background
/// instances; every other coalition is the prediction on the masked input.
pub struct ModelGame<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub instance: &'a ModelInput<T>,
    pub background: &'a Background<T>,
    base: f64,
}

impl<'a, T: Scalar> ModelGame<'a, T> {
    pub fn new(model: &'a Model<T>, instance: &'a ModelInput<T>, background: &'a Background<T>) -> Result<Self> {
        let preds = model.predict(&background.instances)?;
        let base = preds.iter().map(|p| p.p_liq().as_f64()).sum::<f64>() / preds.len() as f64;
        Ok(Self { model, instance, background, base })
    }

    pub fn base_value(&self) -> f64 {
        self.base
    }
}

impl<T: Scalar> CoalitionModel for ModelGame<'_, T> {
    fn n_groups(&self) -> usize {
        N_GROUPS
    }

    fn group_name(&self, i: usize) -> String {
        GROUP_NAMES[i].to_string()
    }

    fn evaluate(&self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        let inputs: Vec<ModelInput<T>> = coalitions
            .iter()
            .filter(|&&c| c != 0)
            .map(|&c| mask_instance(self.instance, c, self.background))
            .collect();
        let preds = self.model.predict(&inputs)?;
        let mut it = preds.iter();
        Ok(coalitions
            .iter()
            .map(|&c| if c == 0 { self.base } else { it.next().expect("one prediction per coalition").p_liq().as_f64() })
            .collect())
    }
}
