//! The limiting structured process: a Cox process of cluster pairs with
//! intensity `Z e^{-sqrt2 u} du` times the cluster law, sampled from a pool of
//! cluster draws, and the fat-carrier statistics evaluated on it.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbm::{simulate, BbmConfig};
use crate::cluster_law::ClusterSample;
use crate::error::{input, Error, Result};
use crate::extremal::{ClusterPair, StructuredProcess};
use crate::genealogy::PointMeasure;
use crate::harness::Estimate;
use crate::rng::{mix, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ZMode {
    Fixed { z: f64 },
    /// `Z_t` of an independent unpruned BBM at time `t_z`, clamped at 0.
    Empirical { t_z: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitConfig {
    pub z_mode: ZMode,
    /// Pairs with `u < -v_max` are not generated.
    pub v_max: f64,
    /// Cluster pool file (JSON Lines of cluster samples).
    pub nu_source: Option<String>,
    pub n_samples: u64,
    pub seed: u64,
}

impl Default for LimitConfig {
    fn default() -> Self {
        Self { z_mode: ZMode::Fixed { z: 1.0 }, v_max: 8.0, nu_source: None, n_samples: 2000, seed: 0 }
    }
}

impl LimitConfig {
    pub fn validate(&self) -> Result<()> {
        match self.z_mode {
            ZMode::Fixed { z } if !(z >= 0.0 && z.is_finite()) => {
                return Err(Error::Config(format!("fixed Z must be finite and >= 0, got {z}")));
            }
            ZMode::Empirical { t_z } if !(t_z > 0.0 && t_z <= 16.0) => {
                return Err(Error::Config(format!("t_z must lie in (0, 16], got {t_z}")));
            }
            _ => {}
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::Config(format!("v_max must be > 0, got {}", self.v_max)));
        }
        Ok(())
    }

    /// Fails if a level `v` would see truncated pairs.
    fn check_level(&self, v: f64) -> Result<()> {
        if !(v >= 0.0 && v <= self.v_max) {
            return input(format!("level {v} outside [0, v_max = {}]", self.v_max));
        }
        Ok(())
    }
}

/// Shared read-only clusters of a pool.
pub fn cluster_pool(samples: Vec<ClusterSample>) -> Vec<Arc<PointMeasure>> {
    samples.into_iter().map(|s| Arc::new(s.cluster_atoms)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitDraw {
    pub z: f64,
    pub process: StructuredProcess,
}

fn draw_z(cfg: &LimitConfig, index: u64) -> Result<f64> {
    match cfg.z_mode {
        ZMode::Fixed { z } => Ok(z),
        ZMode::Empirical { t_z } => {
            let pop = simulate(&BbmConfig::unpruned(t_z, mix(mix(cfg.seed, index), 0x2E)))?;
            Ok(pop.derivative_martingale(1.0).max(0.0))
        }
    }
}

/// Draw `index` of the limit process defined by `cfg`.
pub fn sample_structured_limit(cfg: &LimitConfig, pool: &[Arc<PointMeasure>], index: u64) -> Result<LimitDraw> {
    cfg.validate()?;
    if pool.is_empty() {
        return input("cluster pool is empty");
    }
    let z = draw_z(cfg, index)?;
    let mut rng = stream(cfg.seed, index);
    let mass = z * (SQRT_2 * cfg.v_max).exp() / SQRT_2;
    let k = if mass > 0.0 {
        rng.sample(Poisson::new(mass).map_err(|e| Error::Input(e.to_string()))?) as usize
    } else {
        0
    };
    let exp = Exp::new(SQRT_2).expect("positive rate");
    let mut pairs = Vec::with_capacity(k);
    for _ in 0..k {
        let u = -cfg.v_max + rng.sample(exp);
        let cluster = Arc::clone(&pool[rng.random_range(0..pool.len())]);
        pairs.push(ClusterPair { u, cluster });
    }
    Ok(LimitDraw { z, process: StructuredProcess { pairs, r_used: f64::INFINITY, horizon: f64::INFINITY } })
}

/// Evaluate `f` on every draw of `cfg`, in index order.
pub fn map_draws<T, F>(cfg: &LimitConfig, pool: &[Arc<PointMeasure>], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&LimitDraw) -> T + Sync,
{
    cfg.validate()?;
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| sample_structured_limit(cfg, pool, i).map(|d| f(&d)))
        .collect()
}

/// Means of a ratio over the samples where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub estimate: Estimate,
    pub median: f64,
    pub undefined: u64,
}

impl RatioSummary {
    pub fn from_options(xs: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut undefined = 0;
        let mut vals = Vec::new();
        for x in xs {
            match x {
                Some(x) => vals.push(x),
                None => undefined += 1,
            }
        }
        let median = median(&mut vals.clone());
        Self { estimate: Estimate::from_samples(vals), median, undefined }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub v: f64,
    /// `E*([-v,inf)) / (Z e^{sqrt2 v} / sqrt2)`.
    pub star: RatioSummary,
    /// `E([-v,inf)) / (Z v e^{sqrt2 v})`.
    pub flat: RatioSummary,
}

fn growth_ratios(d: &LimitDraw, v: f64) -> (Option<f64>, Option<f64>) {
    if d.z <= 0.0 {
        return (None, None);
    }
    let e = (SQRT_2 * v).exp();
    let star = d.process.star_restricted_count(-v, None) as f64 / (d.z * e / SQRT_2);
    let flat = d.process.restricted_count(v, -v, None) as f64 / (d.z * v * e);
    (Some(star), (v > 0.0).then_some(flat))
}

pub fn growth_check(cfg: &LimitConfig, pool: &[Arc<PointMeasure>], vs: &[f64]) -> Result<Vec<GrowthRow>> {
    for &v in vs {
        cfg.check_level(v)?;
    }
    let per = map_draws(cfg, pool, |d| vs.iter().map(|&v| growth_ratios(d, v)).collect::<Vec<_>>())?;
    Ok(vs
        .iter()
        .enumerate()
        .map(|(j, &v)| GrowthRow {
            v,
            star: RatioSummary::from_options(per.iter().map(|r| r[j].0)),
            flat: RatioSummary::from_options(per.iter().map(|r| r[j].1)),
        })
        .collect())
}

/// Counts `E*([-v,inf))` per draw, for each `v`.
pub fn star_counts(cfg: &LimitConfig, pool: &[Arc<PointMeasure>], vs: &[f64]) -> Result<Vec<Vec<u64>>> {
    for &v in vs {
        cfg.check_level(v)?;
    }
    let per = map_draws(cfg, pool, |d| vs.iter().map(|&v| d.process.star_restricted_count(-v, None)).collect::<Vec<_>>())?;
    Ok((0..vs.len()).map(|j| per.iter().map(|r| r[j]).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub alpha: f64,
    pub ratio_37: RatioSummary,
}

/// Share of the level set above `-v` carried by pairs with `u >= -alpha v`.
pub fn profile_check(cfg: &LimitConfig, pool: &[Arc<PointMeasure>], v: f64, alphas: &[f64]) -> Result<Vec<ProfileRow>> {
    cfg.check_level(v)?;
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return input("alphas must lie in [0, 1]");
    }
    let per = map_draws(cfg, pool, |d| {
        let total = d.process.restricted_count(v, f64::NEG_INFINITY, None);
        alphas
            .iter()
            .map(|&a| (total > 0).then(|| d.process.restricted_count(v, -a * v, None) as f64 / total as f64))
            .collect::<Vec<_>>()
    })?;
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(j, &alpha)| ProfileRow { alpha, ratio_37: RatioSummary::from_options(per.iter().map(|r| r[j])) })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatCarrierReport {
    pub v: f64,
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Fat share of the windowed level set.
    pub ratio_159: RatioSummary,
    /// Fraction of draws (with the ratio defined) where `ratio_159 >= 1 - epsilon`.
    pub carried: Estimate,
    /// Fat share of the windowed local maxima.
    pub ratio_158: RatioSummary,
    /// `v * ratio_158`.
    pub scaled_158: Estimate,
}

pub fn fat_carrier_check(
    cfg: &LimitConfig,
    pool: &[Arc<PointMeasure>],
    v: f64,
    alpha: f64,
    delta: f64,
    epsilon: f64,
) -> Result<FatCarrierReport> {
    cfg.check_level(v)?;
    if !(alpha > 0.0 && alpha < 1.0) || !(delta > 0.0) || !(epsilon > 0.0 && epsilon < 1.0) {
        return input(format!("need alpha, epsilon in (0,1) and delta > 0; got {alpha}, {epsilon}, {delta}"));
    }
    let per = map_draws(cfg, pool, |d| d.process.theorem_ratios(v, alpha, delta))?;
    let ratio_159 = RatioSummary::from_options(per.iter().map(|r| r.ratio_159));
    let ratio_158 = RatioSummary::from_options(per.iter().map(|r| r.ratio_158));
    let defined: Vec<f64> = per.iter().filter_map(|r| r.ratio_159).collect();
    let hits = defined.iter().filter(|&&x| x >= 1.0 - epsilon).count();
    Ok(FatCarrierReport {
        v,
        alpha,
        delta,
        epsilon,
        ratio_159,
        carried: Estimate::proportion(hits as u64, defined.len() as u64),
        scaled_158: ratio_158.estimate.scale(v),
        ratio_158,
    })
}

/// Median of `ratio_159` at each `delta`, the curve from which `delta` is picked.
pub fn delta_calibration(
    cfg: &LimitConfig,
    pool: &[Arc<PointMeasure>],
    v: f64,
    alpha: f64,
    deltas: &[f64],
) -> Result<Vec<(f64, RatioSummary)>> {
    cfg.check_level(v)?;
    let per = map_draws(cfg, pool, |d| deltas.iter().map(|&dl| d.process.theorem_ratios(v, alpha, dl).ratio_159).collect::<Vec<_>>())?;
    Ok(deltas
        .iter()
        .enumerate()
        .map(|(j, &dl)| (dl, RatioSummary::from_options(per.iter().map(|r| r[j]))))
        .collect())
}

/// The composite filter: pairs with `u >= -(1 - epsilon/3) v` whose cluster is
/// fat at the depth relevant for level `-v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GEpsilon {
    pub v: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub delta: f64,
    pub height_floor: f64,
}

#[allow(non_snake_case)]
pub fn build_G_epsilon(v: f64, epsilon: f64, delta: f64) -> Result<GEpsilon> {
    if !(epsilon > 0.0 && epsilon < 1.0) || !(v >= 0.0) || !(delta > 0.0) {
        return input(format!("need epsilon in (0,1), v >= 0, delta > 0; got {epsilon}, {v}, {delta}"));
    }
    let alpha = 1.0 - epsilon / 3.0;
    Ok(GEpsilon { v, epsilon, alpha, delta, height_floor: -alpha * v })
}

impl GEpsilon {
    /// `E([-v,inf); G) / E([-v,inf))` and `E*([-v,inf); G) / E*([-v,inf))`.
    pub fn ratios(&self, sp: &StructuredProcess) -> (Option<f64>, Option<f64>) {
        let fat = crate::extremal::FatParams { v: self.v, delta: self.delta, alpha: self.alpha };
        let num = sp.restricted_count(self.v, self.height_floor, Some(self.delta));
        let den = sp.restricted_count(self.v, f64::NEG_INFINITY, None);
        let snum = sp.star_restricted_count(self.height_floor, Some(&fat));
        let sden = sp.star_restricted_count(-self.v, None);
        ((den > 0).then(|| num as f64 / den as f64), (sden > 0).then(|| snum as f64 / sden as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub filter: GEpsilon,
    pub first: RatioSummary,
    pub second: RatioSummary,
    /// Fraction of draws with `first >= first_min` and `second <= second_max`.
    pub both: Estimate,
}

pub fn corollary_check(
    cfg: &LimitConfig,
    pool: &[Arc<PointMeasure>],
    filter: GEpsilon,
    first_min: f64,
    second_max: f64,
) -> Result<CorollaryReport> {
    cfg.check_level(filter.v)?;
    let per = map_draws(cfg, pool, |d| filter.ratios(&d.process))?;
    let hits = per
        .iter()
        .filter(|r| matches!(r, (Some(a), Some(b)) if *a >= first_min && *b <= second_max))
        .count();
    Ok(CorollaryReport {
        filter,
        first: RatioSummary::from_options(per.iter().map(|r| r.0)),
        second: RatioSummary::from_options(per.iter().map(|r| r.1)),
        both: Estimate::proportion(hits as u64, per.len() as u64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::poisson_gof;
    use proptest::prelude::*;

    fn singleton_pool() -> Vec<Arc<PointMeasure>> {
        vec![Arc::new(PointMeasure::new(vec![0.0]))]
    }

    /// Clusters `{0, -0.5, ..., -(n-1)/2}` of a few sizes.
    fn toy_pool() -> Vec<Arc<PointMeasure>> {
        [1usize, 2, 5, 40]
            .iter()
            .map(|&n| Arc::new(PointMeasure::new((0..n).map(|i| -0.5 * i as f64).collect())))
            .collect()
    }

    fn cfg(z: f64, v_max: f64, n: u64, seed: u64) -> LimitConfig {
        LimitConfig { z_mode: ZMode::Fixed { z }, v_max, n_samples: n, seed, ..Default::default() }
    }

    #[test]
    fn expected_pair_count() {
        let c = cfg(1.0, 2.0, 4000, 3);
        let ks = map_draws(&c, &singleton_pool(), |d| d.process.len() as f64).unwrap();
        let e = Estimate::from_samples(ks);
        assert!(((2.0 * SQRT_2).exp() / SQRT_2 - 11.963).abs() < 1e-3);
        assert!(e.within(11.963, 4.0), "{e:?}");
        assert!(map_draws(&cfg(0.0, 2.0, 10, 1), &singleton_pool(), |d| d.process.len()).unwrap().iter().all(|&k| k == 0));
    }

    #[test]
    fn positive_heights_have_mean_z_over_sqrt2() {
        let c = cfg(2.0, 1.0, 4000, 9);
        let xs = map_draws(&c, &singleton_pool(), |d| d.process.star_restricted_count(0.0, None) as f64).unwrap();
        assert!(Estimate::from_samples(xs).within(2.0 / SQRT_2, 4.0));
    }

    #[test]
    fn star_counts_are_poisson() {
        let c = cfg(1.0, 2.0, 2000, 21);
        let vs = [0.0, 1.0, 2.0];
        let counts = star_counts(&c, &toy_pool(), &vs).unwrap();
        for (j, &v) in vs.iter().enumerate() {
            let g = poisson_gof(&counts[j], (SQRT_2 * v).exp() / SQRT_2).unwrap();
            assert!(g.p_value > 0.01, "v={v}: {g:?}");
        }
    }

    #[test]
    fn thinning_matches_smaller_truncation() {
        let wide = cfg(1.0, 3.0, 3000, 4);
        let narrow = cfg(1.0, 1.0, 3000, 5);
        let a: Vec<u64> = star_counts(&wide, &singleton_pool(), &[1.0]).unwrap().remove(0);
        let b: Vec<f64> = map_draws(&narrow, &singleton_pool(), |d| d.process.len() as f64).unwrap();
        let ea = Estimate::from_samples(a.iter().map(|&k| k as f64));
        let eb = Estimate::from_samples(b);
        assert!((ea.mean - eb.mean).abs() < 4.0 * (ea.se.powi(2) + eb.se.powi(2)).sqrt());
        let g = poisson_gof(&a, SQRT_2.exp() / SQRT_2).unwrap();
        assert!(g.p_value > 0.01);
    }

    #[test]
    fn flatten_and_star_examples() {
        let sp = StructuredProcess {
            pairs: vec![
                ClusterPair { u: 1.0, cluster: Arc::new(PointMeasure::new(vec![0.0])) },
                ClusterPair { u: 0.0, cluster: Arc::new(PointMeasure::new(vec![0.0, -1.0])) },
            ],
            ..Default::default()
        };
        assert_eq!(sp.flatten().atoms(), &[-1.0, 0.0, 1.0]);
        assert_eq!(sp.star().atoms(), &[0.0, 1.0]);
        assert!(StructuredProcess::default().flatten().is_empty());
    }

    #[test]
    fn growth_on_singletons_is_one() {
        let rows = growth_check(&cfg(1.0, 4.0, 1500, 8), &singleton_pool(), &[1.0, 3.0]).unwrap();
        for r in &rows {
            assert!(r.star.estimate.within(1.0, 4.0), "{r:?}");
            // singleton clusters: E = E*, so the flat ratio is star / (sqrt2 v)
            assert!(r.flat.estimate.within(1.0 / (SQRT_2 * r.v), 4.0), "{r:?}");
        }
        assert!(growth_check(&cfg(1.0, 4.0, 10, 8), &singleton_pool(), &[5.0]).is_err());
    }

    #[test]
    fn profile_examples() {
        let c = cfg(1.0, 3.0, 300, 12);
        let rows = profile_check(&c, &toy_pool(), 3.0, &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert!(rows.windows(2).all(|w| w[0].ratio_37.estimate.mean <= w[1].ratio_37.estimate.mean));
        assert!((rows[3].ratio_37.estimate.mean - 1.0).abs() < 1e-12);
        assert!(rows[0].ratio_37.estimate.mean < 0.5);
    }

    #[test]
    fn fat_examples() {
        let c = cfg(1.0, 3.0, 200, 2);
        let tiny = fat_carrier_check(&c, &toy_pool(), 2.0, 0.5, 1e-9, 0.1).unwrap();
        assert_eq!(tiny.ratio_159.estimate.mean, 1.0);
        assert_eq!(tiny.carried.mean, 1.0);
        let huge = fat_carrier_check(&c, &toy_pool(), 2.0, 0.5, 1e9, 0.1).unwrap();
        assert_eq!(huge.ratio_159.estimate.mean, 0.0);
        assert_eq!(huge.ratio_158.estimate.mean, 0.0);
        assert!(fat_carrier_check(&c, &toy_pool(), 2.0, 1.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn g_epsilon_examples() {
        let g = build_G_epsilon(6.0, 0.3, 0.05).unwrap();
        assert!((3.0 * (1.0 - g.alpha) - 0.3).abs() < 1e-12);
        let g2 = build_G_epsilon(6.0, 0.6, 0.05).unwrap();
        assert!(g2.height_floor > g.height_floor);
        assert!(build_G_epsilon(6.0, 1.0, 0.05).is_err());
        // window depths are >= 0.2 here, where the threshold exceeds 1: singletons are never fat
        let c = cfg(1.0, 2.0, 50, 1);
        let filter = build_G_epsilon(2.0, 0.3, 10.0).unwrap();
        assert!(crate::extremal::fat_threshold(10.0, 0.2) > 1.0);
        let r = corollary_check(&c, &singleton_pool(), filter, 0.8, 0.2).unwrap();
        assert_eq!(r.first.estimate.mean, 0.0);
        assert_eq!(r.both.mean, 0.0);
    }

    #[test]
    fn empirical_z_is_nonnegative_and_deterministic() {
        let c = LimitConfig { z_mode: ZMode::Empirical { t_z: 4.0 }, v_max: 1.0, n_samples: 20, seed: 3, nu_source: None };
        let a = map_draws(&c, &singleton_pool(), |d| (d.z, d.process.len())).unwrap();
        let b = map_draws(&c, &singleton_pool(), |d| (d.z, d.process.len())).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.0 >= 0.0));
        assert!(LimitConfig { z_mode: ZMode::Fixed { z: -1.0 }, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn errors() {
        assert!(sample_structured_limit(&cfg(1.0, 1.0, 1, 0), &[], 0).is_err());
        assert!(serde_json::from_str::<LimitConfig>(r#"{"v_maks": 3}"#).is_err());
    }

    #[test]
    fn pool_order_does_not_matter() {
        let pool = toy_pool();
        let mut rev = pool.clone();
        rev.reverse();
        let c = cfg(1.0, 3.0, 600, 17);
        let f = |d: &LimitDraw| d.process.restricted_count(2.0, -2.0, None) as f64;
        let a = Estimate::from_samples(map_draws(&c, &pool, f).unwrap());
        let b = Estimate::from_samples(map_draws(&LimitConfig { seed: 18, ..c }, &rev, f).unwrap());
        assert!((a.mean - b.mean).abs() < 4.0 * (a.se.powi(2) + b.se.powi(2)).sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shifting_commutes_with_flatten(seed in 0u64..1000, c in -2.0f64..2.0) {
            let d = sample_structured_limit(&cfg(1.0, 1.5, 1, seed), &toy_pool(), 0).unwrap();
            let mut shifted = d.process.clone();
            for p in &mut shifted.pairs {
                p.u += c;
            }
            let a = shifted.flatten();
            let b = d.process.flatten().shift(c);
            prop_assert_eq!(a.total(), b.total());
            for (x, y) in a.atoms().iter().zip(b.atoms()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn flat_dominates_star(seed in 0u64..1000, v in 0.0f64..2.0) {
            let d = sample_structured_limit(&cfg(1.0, 2.0, 1, seed), &toy_pool(), 0).unwrap();
            prop_assert!(d.process.flatten().total() >= d.process.star().total());
            prop_assert!(d.process.restricted_count(v, -v, None) >= d.process.star_restricted_count(-v, None));
        }

        #[test]
        fn pairs_respect_truncation(seed in 0u64..1000, v_max in 0.5f64..3.0) {
            let d = sample_structured_limit(&cfg(1.0, v_max, 1, seed), &toy_pool(), 0).unwrap();
            prop_assert!(d.process.pairs.iter().all(|p| p.u >= -v_max));
        }
    }
}
