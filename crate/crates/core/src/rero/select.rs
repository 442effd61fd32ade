use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{round_half_up, ImportanceMap, ReroError};

/// Required `rho_pre * rho_post` during pre-training.
pub const PAIR_PRODUCT: f64 = 0.1;
const PAIR_PRODUCT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionOrder {
    /// Most important first (the redundancy-robust choice).
    #[default]
    Descending,
    /// Least important first; only used to study the selection direction.
    Ascending,
}

impl std::str::FromStr for SelectionOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "descending" => Ok(SelectionOrder::Descending),
            "ascending" => Ok(SelectionOrder::Ascending),
            other => Err(format!("unknown order {other:?} (expected descending or ascending)")),
        }
    }
}

/// Tokens kept by importance selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ReRoMask {
    pub tau: usize,
    pub j: usize,
    pub rho_pre: f64,
    /// Flat indices `i * j + jj`, in selection order.
    pub selected: Vec<usize>,
    pub grid: Vec<bool>,
}

impl ReRoMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, flat: usize) -> bool {
        self.grid.get(flat).copied().unwrap_or(false)
    }

    /// Number of selected tokens in each pair.
    pub fn per_pair_counts(&self) -> Vec<usize> {
        self.grid.chunks(self.j).map(|row| row.iter().filter(|&&b| b).count()).collect()
    }

    /// Selected indices in ascending flat order.
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut v = self.selected.clone();
        v.sort_unstable();
        v
    }
}

fn check_ratio(name: &'static str, value: f64) -> Result<(), ReroError> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(ReroError::Ratio { name, value })
    }
}

/// Global top-K by importance with `K = round_half_up(J * tau * rho_pre)`;
/// ties go to the lower flat index.
pub fn select_rero(imp: &ImportanceMap, rho_pre: f64) -> Result<ReRoMask, ReroError> {
    select_with_order(imp, rho_pre, SelectionOrder::Descending)
}

/// [`select_rero`] with a configurable direction. Ascending keeps the
/// least important tokens, still breaking ties by ascending flat index.
pub fn select_with_order(imp: &ImportanceMap, rho_pre: f64, order: SelectionOrder) -> Result<ReRoMask, ReroError> {
    check_ratio("rho_pre", rho_pre)?;
    let total = imp.len();
    let k = round_half_up(total as f64 * rho_pre).min(total);
    if k == 0 {
        return Err(ReroError::EmptySelection { rho: rho_pre, total });
    }
    let v = &imp.values;
    let cmp = |a: &usize, b: &usize| -> Ordering {
        let by_value = match order {
            SelectionOrder::Descending => v[*b].total_cmp(&v[*a]),
            SelectionOrder::Ascending => v[*a].total_cmp(&v[*b]),
        };
        by_value.then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..total).collect();
    if k < total {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    let mut grid = vec![false; total];
    for &i in &idx {
        grid[i] = true;
    }
    Ok(ReRoMask { tau: imp.tau, j: imp.j, rho_pre, selected: idx, grid })
}

/// Encoder-visible subset of a [`ReRoMask`].
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleSet {
    pub rho_post: f64,
    /// Flat indices, a subsequence of `ReRoMask::selected`.
    pub indices: Vec<usize>,
    /// Positions of `indices` inside `ReRoMask::selected`.
    pub positions: Vec<usize>,
}

impl VisibleSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform sample without replacement of `round_half_up(K * rho_post)`
/// selected tokens. Unless `allow_override`, `rho_pre * rho_post` must
/// equal 0.1.
pub fn subsample_visible(mask: &ReRoMask, rho_post: f64, seed: u64, allow_override: bool) -> Result<VisibleSet, ReroError> {
    check_ratio("rho_post", rho_post)?;
    let product = mask.rho_pre * rho_post;
    if !allow_override && (product - PAIR_PRODUCT).abs() > PAIR_PRODUCT_TOL {
        return Err(ReroError::RatioConstraint { product });
    }
    let k = mask.len();
    let m = round_half_up(k as f64 * rho_post).min(k);
    if m == 0 {
        return Err(ReroError::EmptyVisible { rho: rho_post, selected: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = index::sample(&mut rng, k, m).into_vec();
    positions.sort_unstable();
    let indices = positions.iter().map(|&p| mask.selected[p]).collect();
    Ok(VisibleSet { rho_post, indices, positions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Independent uniform sample in every pair.
    Random,
    /// One spatial sample shared by every pair.
    Tube,
}

/// Importance-agnostic mask; `true` marks a kept token.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineMask {
    pub tau: usize,
    pub j: usize,
    pub grid: Vec<bool>,
}

impl BaselineMask {
    pub fn row(&self, i: usize) -> &[bool] {
        &self.grid[i * self.j..(i + 1) * self.j]
    }
}

/// Random or tube masking keeping `round_half_up(J * rho)` tokens per pair.
pub fn baseline_mask(kind: BaselineKind, j: usize, tau: usize, rho: f64, seed: u64) -> Result<BaselineMask, ReroError> {
    check_ratio("rho", rho)?;
    let per_pair = round_half_up(j as f64 * rho).min(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![false; tau * j];
    let shared = index::sample(&mut rng, j, per_pair).into_vec();
    for i in 0..tau {
        let picks = match kind {
            BaselineKind::Tube => shared.clone(),
            BaselineKind::Random if i == 0 => shared.clone(),
            BaselineKind::Random => index::sample(&mut rng, j, per_pair).into_vec(),
        };
        for p in picks {
            grid[i * j + p] = true;
        }
    }
    Ok(BaselineMask { tau, j, grid })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_ratio_selects_everything() {
        let imp = ImportanceMap::new(2, 3, vec![0.1, 0.5, 0.2, 0.9, 0.0, 0.3]).unwrap();
        let m = select_rero(&imp, 1.0).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.selected, vec![3, 1, 5, 2, 0, 4]);
    }

    #[test]
    fn hand_example() {
        let imp = ImportanceMap::new(2, 4, vec![8.0, 1.0, 1.0, 1.0, 9.0, 1.0, 1.0, 7.0]).unwrap();
        let m = select_rero(&imp, 0.375).unwrap();
        assert_eq!(m.selected, vec![4, 0, 7]);
        assert_eq!(m.per_pair_counts(), vec![1, 2]);
    }

    #[test]
    fn ascending_takes_the_bottom() {
        let imp = ImportanceMap::new(2, 4, vec![8.0, 1.0, 1.0, 1.0, 9.0, 1.0, 1.0, 7.0]).unwrap();
        let m = select_with_order(&imp, 0.375, SelectionOrder::Ascending).unwrap();
        assert_eq!(m.selected, vec![1, 2, 3]);
    }

    #[test]
    fn ratio_errors() {
        let imp = ImportanceMap::new(1, 4, vec![1.0; 4]).unwrap();
        assert!(matches!(select_rero(&imp, 0.1), Err(ReroError::EmptySelection { .. })));
        assert!(matches!(select_rero(&imp, 0.0), Err(ReroError::Ratio { .. })));
        assert!(matches!(select_rero(&imp, 1.5), Err(ReroError::Ratio { .. })));
    }

    #[test]
    fn visible_set_contracts() {
        let imp = ImportanceMap::new(8, 64, (0..512).map(|i| (i * 37 % 101) as f64).collect()).unwrap();
        let m = select_rero(&imp, 0.3).unwrap();
        assert_eq!(m.len(), 154);
        let v = subsample_visible(&m, 1.0 / 3.0, 5, false).unwrap();
        assert_eq!(v.len(), 51);
        assert!(v.indices.iter().all(|&i| m.contains(i)));
        assert!(matches!(subsample_visible(&m, 0.5, 5, false), Err(ReroError::RatioConstraint { .. })));
        let all = subsample_visible(&m, 1.0, 5, true).unwrap();
        assert_eq!(all.indices, m.selected);
        assert_eq!(subsample_visible(&m, 1.0 / 3.0, 5, false).unwrap(), v);
    }

    #[test]
    fn baseline_counts() {
        for kind in [BaselineKind::Random, BaselineKind::Tube] {
            let full = baseline_mask(kind, 16, 4, 1.0, 0).unwrap();
            assert!(full.grid.iter().all(|&b| b));
        }
        let tube = baseline_mask(BaselineKind::Tube, 16, 4, 0.25, 3).unwrap();
        for i in 1..4 {
            assert_eq!(tube.row(i), tube.row(0));
        }
        for seed in 0..100 {
            let m = baseline_mask(BaselineKind::Random, 49, 8, 0.1, seed).unwrap();
            for i in 0..8 {
                assert_eq!(m.row(i).iter().filter(|&&b| b).count(), 5);
            }
        }
    }
}
