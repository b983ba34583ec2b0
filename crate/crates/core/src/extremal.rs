//! Local maxima, clusters and the structured extremal process, together with
//! the level-set functionals restricted to height windows and fat clusters.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bbm::{centering, Population};
use crate::error::{input, Result};
use crate::genealogy::{NodeId, PointMeasure};

/// Height of a local maximum (centered) together with its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPair {
    pub u: f64,
    pub cluster: Arc<PointMeasure>,
}

impl ClusterPair {
    /// `C([-w, 0])`; zero for `w < 0`.
    #[inline]
    pub fn depth_count(&self, w: f64) -> usize {
        if w < 0.0 {
            0
        } else {
            self.cluster.count_at_least(-w)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StructuredProcess {
    pub pairs: Vec<ClusterPair>,
    pub r_used: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatParams {
    pub v: f64,
    pub delta: f64,
    pub alpha: f64,
}

impl FatParams {
    pub fn new(v: f64, delta: f64, alpha: f64) -> Result<Self> {
        if !(v >= 0.0) || !(delta > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
            return input(format!("fat parameters out of range: v={v}, delta={delta}, alpha={alpha}"));
        }
        Ok(Self { v, delta, alpha })
    }
}

/// Fatness threshold `delta w e^{sqrt2 w}` for a cluster evaluated at depth `w`.
#[inline]
pub fn fat_threshold(delta: f64, w: f64) -> f64 {
    delta * w * (SQRT_2 * w).exp()
}

/// Whether `C([-w,0]) > delta w e^{sqrt2 w}`.
#[inline]
pub fn is_fat(count: usize, delta: f64, w: f64) -> bool {
    count as f64 > fat_threshold(delta, w)
}

/// `x` beats `y` if it is strictly higher, or equally high with a smaller id.
#[inline]
fn beats(hx: f64, x: NodeId, hy: f64, y: NodeId) -> bool {
    hx > hy || (hx == hy && x < y)
}

fn check_radius(pop: &Population, r: f64) -> Result<()> {
    if !(r > 0.0 && r < pop.horizon()) {
        return input(format!("radius must lie in (0, {}), got {r}", pop.horizon()));
    }
    Ok(())
}

/// Leaves that are maximal within their genealogical `r`-ball.
pub fn local_maxima(pop: &Population, r: f64) -> Result<Vec<NodeId>> {
    check_radius(pop, r)?;
    let tree = &pop.tree;
    // best (height, id) below every node, computed children-first
    let n = tree.nodes().len();
    let mut best: Vec<Option<(f64, NodeId)>> = vec![None; n];
    for id in (0..n).rev() {
        best[id] = match (tree.raw_children(id), tree.leaf_height_opt(id)) {
            (Some([a, b]), _) => match (best[a], best[b]) {
                (Some(x), Some(y)) => Some(if beats(x.0, x.1, y.0, y.1) { x } else { y }),
                (x, None) => x,
                (None, y) => y,
            },
            (None, Some(h)) => Some((h, id)),
            _ => None,
        };
    }
    let mut out = Vec::new();
    for &(x, _) in tree.leaf_heights() {
        let root = tree.ball_root_of(x, r).expect("r > 0");
        if best[root].map(|(_, id)| id) == Some(x) {
            out.push(x);
        }
    }
    Ok(out)
}

/// `sum_{y in B_r(x)} delta_{h(y) - h(x)}`.
pub fn extract_cluster(pop: &Population, x: NodeId, r: f64) -> Result<PointMeasure> {
    let hx = pop.tree.height(x)?;
    let ball = pop.tree.ball(x, r)?;
    Ok(ball.into_iter().map(|y| pop.tree.leaf_height_opt(y).unwrap() - hx).collect())
}

/// One cluster pair per `r`-local maximum, with `u = h(x) - m(t)`.
pub fn structured_process(pop: &Population, r: f64) -> Result<StructuredProcess> {
    let maxima = local_maxima(pop, r)?;
    let mt = centering(pop.horizon());
    let tree = &pop.tree;
    let mut pairs = Vec::with_capacity(maxima.len());
    for x in maxima {
        let hx = tree.height(x)?;
        let root = tree.ball_root_of(x, r).expect("r > 0");
        let cluster: PointMeasure = tree
            .leaves_under(root)
            .into_iter()
            .map(|y| tree.leaf_height_opt(y).unwrap() - hx)
            .collect();
        pairs.push(ClusterPair { u: hx - mt, cluster: Arc::new(cluster) });
    }
    Ok(StructuredProcess { pairs, r_used: r, horizon: pop.horizon() })
}

impl StructuredProcess {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Superposition of shifted clusters, `sum C(. - u)`.
    pub fn flatten(&self) -> PointMeasure {
        let mut atoms = Vec::new();
        for p in &self.pairs {
            atoms.extend(p.cluster.atoms().iter().map(|a| a + p.u));
        }
        PointMeasure::new(atoms)
    }

    /// One atom per pair, `sum delta_u`.
    pub fn star(&self) -> PointMeasure {
        self.pairs.iter().map(|p| p.u).collect()
    }

    /// Level-set count on `[-v, inf)` from pairs with `u >= height_floor`,
    /// optionally only from pairs whose cluster is fat at depth `v + u`.
    pub fn restricted_count(&self, v: f64, height_floor: f64, fat_delta: Option<f64>) -> u64 {
        let mut total = 0u64;
        for p in &self.pairs {
            if p.u < height_floor || p.u < -v {
                continue;
            }
            let w = v + p.u;
            let c = p.depth_count(w);
            if let Some(delta) = fat_delta {
                if !is_fat(c, delta, w) {
                    continue;
                }
            }
            total += c as u64;
        }
        total
    }

    /// Number of pairs with `u >= height_floor`, optionally only fat ones
    /// (fat at depth `v + u` for the level `v` in `fat`).
    pub fn star_restricted_count(&self, height_floor: f64, fat: Option<&FatParams>) -> u64 {
        self.pairs
            .iter()
            .filter(|p| p.u >= height_floor)
            .filter(|p| match fat {
                None => true,
                Some(f) => {
                    let w = f.v + p.u;
                    p.u >= -f.v && is_fat(p.depth_count(w), f.delta, w)
                }
            })
            .count() as u64
    }

    pub fn theorem_ratios(&self, v: f64, alpha: f64, delta: f64) -> TheoremRatios {
        let floor = -alpha * v;
        let window = self.restricted_count(v, floor, None);
        let fat_window = self.restricted_count(v, floor, Some(delta));
        let total = self.restricted_count(v, f64::NEG_INFINITY, None);
        let fp = FatParams { v, delta, alpha };
        let star_window = self.star_restricted_count(floor, None);
        let star_fat = self.star_restricted_count(floor, Some(&fp));
        TheoremRatios {
            ratio_159: ratio(fat_window, window),
            ratio_158: ratio(star_fat, star_window),
            ratio_37: ratio(window, total),
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Ratios of the fat-carrier statements; `None` marks an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremRatios {
    /// Fat share of the level set within the height window.
    pub ratio_159: Option<f64>,
    /// Fat share of local maxima within the height window.
    pub ratio_158: Option<f64>,
    /// Window share of the whole level set.
    pub ratio_37: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbm::{simulate, BbmConfig};
    use crate::genealogy::{Fate, GenealogyTree, RawNode};
    use proptest::prelude::*;

    fn pop_from(raw: &[RawNode], t: f64) -> Population {
        Population { tree: GenealogyTree::from_raw(raw, t).unwrap(), pruned: false, pruned_count: 0 }
    }

    fn pair_pop(s: f64, t: f64, h1: f64, h2: f64) -> Population {
        pop_from(
            &[
                RawNode { parent: None, birth_time: 0.0, fate: Fate::Branched(s), height: 0.0 },
                RawNode { parent: Some(0), birth_time: s, fate: Fate::Alive, height: h1 },
                RawNode { parent: Some(0), birth_time: s, fate: Fate::Alive, height: h2 },
            ],
            t,
        )
    }

    fn sp(pairs: Vec<(f64, Vec<f64>)>) -> StructuredProcess {
        StructuredProcess {
            pairs: pairs
                .into_iter()
                .map(|(u, c)| ClusterPair { u, cluster: Arc::new(PointMeasure::new(c)) })
                .collect(),
            r_used: 1.0,
            horizon: 2.0,
        }
    }

    #[test]
    fn local_maxima_examples() {
        let single = pop_from(
            &[RawNode { parent: None, birth_time: 0.0, fate: Fate::Alive, height: 0.2 }],
            4.0,
        );
        assert_eq!(local_maxima(&single, 1.0).unwrap(), vec![0]);
        // d = t - s = 1 < r = 2
        let close = pair_pop(3.0, 4.0, 1.0, 0.5);
        assert_eq!(local_maxima(&close, 2.0).unwrap(), vec![1]);
        // d = 3 >= r = 2
        let far = pair_pop(1.0, 4.0, 1.0, 0.5);
        assert_eq!(local_maxima(&far, 2.0).unwrap(), vec![1, 2]);
        assert!(local_maxima(&far, 0.0).is_err());
        assert!(local_maxima(&far, 4.0).is_err());
    }

    #[test]
    fn exact_ties_resolved_by_id() {
        let tie = pair_pop(3.0, 4.0, 1.0, 1.0);
        assert_eq!(local_maxima(&tie, 2.0).unwrap(), vec![1]);
    }

    #[test]
    fn cluster_examples() {
        let far = pair_pop(1.0, 4.0, 1.0, 0.5);
        assert_eq!(extract_cluster(&far, 1, 2.0).unwrap().atoms(), &[0.0]);
        // three leaves with heights 5, 4.2, 3 in one ball
        let pop = pop_from(
            &[
                RawNode { parent: None, birth_time: 0.0, fate: Fate::Branched(3.0), height: 0.0 },
                RawNode { parent: Some(0), birth_time: 3.0, fate: Fate::Branched(3.5), height: 0.0 },
                RawNode { parent: Some(0), birth_time: 3.0, fate: Fate::Alive, height: 3.0 },
                RawNode { parent: Some(1), birth_time: 3.5, fate: Fate::Alive, height: 5.0 },
                RawNode { parent: Some(1), birth_time: 3.5, fate: Fate::Alive, height: 4.2 },
            ],
            4.0,
        );
        let x = pop.tree.leaf_heights().iter().find(|&&(_, h)| h == 5.0).unwrap().0;
        let c = extract_cluster(&pop, x, 2.0).unwrap();
        let expected = [-2.0, 4.2 - 5.0, 0.0];
        assert_eq!(c.total(), 3);
        for (a, b) in c.atoms().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.count_in(f64::NEG_INFINITY, f64::INFINITY).unwrap(), pop.tree.ball(x, 2.0).unwrap().len());
        assert!(extract_cluster(&pop, 99, 1.0).is_err());
    }

    #[test]
    fn structured_process_examples() {
        let t: f64 = 4.0;
        let h = centering(t) + 1.0;
        let single = pop_from(
            &[RawNode { parent: None, birth_time: 0.0, fate: Fate::Alive, height: h }],
            t,
        );
        let s = structured_process(&single, 2.0).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.pairs[0].u - 1.0).abs() < 1e-12);
        assert_eq!(s.pairs[0].cluster.atoms(), &[0.0]);
    }

    #[test]
    fn restricted_count_examples() {
        let one = sp(vec![(0.0, vec![0.0])]);
        assert_eq!(one.restricted_count(1.0, -1.0, Some(1.0)), 0);
        let hundred = sp(vec![(0.0, (0..100).map(|i| -(i as f64) / 100.0).collect())]);
        assert_eq!(hundred.restricted_count(1.0, -1.0, Some(0.1)), 100);
        assert!(fat_threshold(0.1, 1.0) > 0.41 && fat_threshold(0.1, 1.0) < 0.412);
    }

    #[test]
    fn star_count_examples() {
        assert_eq!(sp(vec![]).star_restricted_count(-1.0, None), 0);
        let s = sp(vec![(0.5, vec![0.0]), (-2.0, vec![0.0]), (-0.5, vec![0.0])]);
        assert_eq!(s.star_restricted_count(-1.0, None), 2);
        // pair below -v never counted as fat, however tiny delta is
        let fp = FatParams { v: 1.0, delta: 1e-12, alpha: 0.5 };
        let low = sp(vec![(-1.5, vec![-0.1, 0.0])]);
        assert_eq!(low.star_restricted_count(f64::NEG_INFINITY, Some(&fp)), 0);
    }

    #[test]
    fn ratio_examples() {
        let many: Vec<f64> = (0..5000).map(|i| -(i as f64) * 1e-4).collect();
        let all_fat = sp(vec![(0.0, many.clone()), (-0.5, many)]);
        let r = all_fat.theorem_ratios(1.0, 0.9, 0.01);
        assert_eq!(r.ratio_159, Some(1.0));
        let none_fat = sp(vec![(0.0, vec![0.0]), (-0.5, vec![0.0, -0.1])]);
        let r = none_fat.theorem_ratios(2.0, 0.5, 1.0);
        assert_eq!(r.ratio_159, Some(0.0));
        assert_eq!(r.ratio_158, Some(0.0));
        // alpha = 1 covers all pairs that can contribute
        let full = none_fat.restricted_count(2.0, -2.0, None) as f64
            / none_fat.restricted_count(2.0, f64::NEG_INFINITY, None) as f64;
        assert_eq!(full, 1.0);
        assert_eq!(sp(vec![]).theorem_ratios(1.0, 0.5, 0.1).ratio_37, None);
    }

    #[test]
    fn no_filter_matches_flattened_level_set() {
        for seed in 0..10 {
            let pop = simulate(&BbmConfig::unpruned(6.0, seed)).unwrap();
            let s = structured_process(&pop, 3.0).unwrap();
            let flat = s.flatten();
            for v in [0.5, 1.0, 2.0, 4.0] {
                assert_eq!(s.restricted_count(v, -v, None), flat.count_at_least(-v) as u64);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn structured_process_invariants(seed in 0u64..1_000, r in 0.3f64..4.5) {
            let pop = simulate(&BbmConfig::unpruned(5.0, seed)).unwrap();
            let maxima = local_maxima(&pop, r).unwrap();
            // separation
            for (i, &x) in maxima.iter().enumerate() {
                for &y in &maxima[i + 1..] {
                    prop_assert!(pop.tree.genealogical_distance(x, y).unwrap() >= r);
                }
            }
            let s = structured_process(&pop, r).unwrap();
            prop_assert_eq!(s.len(), maxima.len());
            let e = pop.centered_heights().unwrap();
            let flat = s.flatten();
            for a in [-3.0, -1.0, 0.0, 1.0] {
                prop_assert!(flat.count_at_least(a) <= e.count_at_least(a));
            }
            for p in &s.pairs {
                prop_assert_eq!(p.cluster.max(), Some(0.0));
            }
            // restricted counts ordered and monotone in delta
            let v = 2.0;
            let total = s.restricted_count(v, f64::NEG_INFINITY, None);
            let win = s.restricted_count(v, -0.5 * v, None);
            let f1 = s.restricted_count(v, -0.5 * v, Some(0.01));
            let f2 = s.restricted_count(v, -0.5 * v, Some(0.1));
            prop_assert!(f2 <= f1 && f1 <= win && win <= total);
            prop_assert!(s.star_restricted_count(-1.0, None) <= s.star_restricted_count(-2.0, None));
            let r1 = s.theorem_ratios(v, 0.25, 0.1).ratio_37;
            let r2 = s.theorem_ratios(v, 0.75, 0.1).ratio_37;
            if let (Some(a), Some(b)) = (r1, r2) {
                prop_assert!(a <= b);
            }
        }
    }
}
