//! Client runtime categories and simulated wall-clock draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Seconds per unit of the category intervals.
pub const TABLE_UNIT_SECONDS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Short,
    Medium,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayPreset {
    Large,
    Mild,
}

/// Category runtime intervals in table units (10 s), plus the tiering knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    pub short: [f64; 2],
    pub medium: [f64; 2],
    pub long: [f64; 2],
    /// Softness of the sample-count ranking: 0 tiers strictly by count,
    /// infinity ignores counts entirely.
    pub gamma: f64,
    pub max_long_fraction: f64,
    pub medium_fraction: f64,
}

impl DelayProfile {
    pub fn preset(preset: DelayPreset) -> Self {
        let long = match preset {
            DelayPreset::Large => [50.0, 80.0],
            DelayPreset::Mild => [10.0, 20.0],
        };
        Self {
            short: [1.0, 2.0],
            medium: [3.0, 5.0],
            long,
            gamma: 0.5,
            max_long_fraction: 0.10,
            medium_fraction: 0.30,
        }
    }

    pub fn large() -> Self {
        Self::preset(DelayPreset::Large)
    }

    pub fn mild() -> Self {
        Self::preset(DelayPreset::Mild)
    }

    pub fn interval(&self, category: Category) -> [f64; 2] {
        match category {
            Category::Short => self.short,
            Category::Medium => self.medium,
            Category::Long => self.long,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("short", self.short), ("medium", self.medium), ("long", self.long)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::config(format!("delay.{name} needs 0 < lo <= hi, got [{lo}, {hi}]")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("delay.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.max_long_fraction > 0.0 && self.max_long_fraction <= 1.0) {
            return Err(Error::config(format!(
                "delay.max_long_fraction must lie in (0, 1], got {}",
                self.max_long_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.medium_fraction) {
            return Err(Error::config(format!(
                "delay.medium_fraction must lie in [0, 1], got {}",
                self.medium_fraction
            )));
        }
        Ok(())
    }
}

/// Average ranks of `counts` (ascending), scaled to `[0, 1]`.
fn normalized_ranks(counts: &[usize]) -> Vec<f64> {
    let n = counts.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| counts[i]);
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && counts[order[j + 1]] == counts[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

/// Runtime category per client.
///
/// Each client gets the key `w·rank + (1 − w)·u` with `w = 1 / (1 + γ)`,
/// `rank` its normalized sample-count rank and `u ~ U[0, 1)`. Clients sorted
/// by descending key (lower id first on ties) fill the long tier
/// (`⌊max_long_fraction·N⌋` clients), then the medium tier
/// (`⌊medium_fraction·N⌋`), and the rest are short.
pub fn assign_categories(
    sample_counts: &[usize],
    profile: &DelayProfile,
    rng: &mut RngStream,
) -> Result<Vec<Category>> {
    profile.validate()?;
    if sample_counts.contains(&0) {
        return Err(Error::config("every client needs at least one sample"));
    }
    let n = sample_counts.len();
    let ranks = normalized_ranks(sample_counts);
    let w = if profile.gamma.is_infinite() {
        0.0
    } else {
        1.0 / (1.0 + profile.gamma)
    };
    let keys: Vec<f64> = ranks
        .iter()
        .map(|r| {
            let u = rng.next_f64();
            w * r + (1.0 - w) * u
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));

    let n_long = (profile.max_long_fraction * n as f64).floor() as usize;
    let n_medium = ((profile.medium_fraction * n as f64).floor() as usize).min(n - n_long);
    let mut categories = vec![Category::Short; n];
    for (pos, &client) in order.iter().enumerate() {
        categories[client] = if pos < n_long {
            Category::Long
        } else if pos < n_long + n_medium {
            Category::Medium
        } else {
            Category::Short
        };
    }
    Ok(categories)
}

/// Uniform draw from the category interval, in seconds.
pub fn sample_runtime(category: Category, profile: &DelayProfile, rng: &mut RngStream) -> Result<f64> {
    let [lo, hi] = profile.interval(category);
    Ok(rng.uniform(lo, hi)? * TABLE_UNIT_SECONDS)
}
