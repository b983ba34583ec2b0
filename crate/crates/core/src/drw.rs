//! The decorated random-walk-like process: a drift-corrected Brownian bridge
//! observed at the atoms of a rate-2 Poisson process, each atom carrying the
//! centered maximum of an independent BBM of the corresponding age.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbm::{centering, log_plus, Barrier, FrontierSim, LOG_CORRECTION};
use crate::error::{input, Error, Result};
use crate::harness::Estimate;
use crate::rng::{self, mix, ParticleRng};

/// Intensity of the sampling times.
pub const SIGMA_RATE: f64 = 2.0;

/// Default spacing of the observation grid.
pub const GRID_DT: f64 = 0.25;

/// Ages at which the decoration table is tabulated.
pub const TABLE_AGES: [f64; 8] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Number of quantiles stored per age (probabilities `k / 1000`).
pub const QUANTILES: usize = 1001;

/// `gamma_{t,s} = 3/(2 sqrt2) (log+ s - (s/t) log+ t)`.
pub fn gamma(t: f64, s: f64) -> Result<f64> {
    if !(t > 0.0) || !(0.0..=t).contains(&s) {
        return input(format!("gamma needs 0 <= s <= t, t > 0; got s={s}, t={t}"));
    }
    Ok(gamma_unchecked(t, s))
}

#[inline]
pub(crate) fn gamma_unchecked(t: f64, s: f64) -> f64 {
    LOG_CORRECTION * (log_plus(s) - s / t * log_plus(t))
}

/// Sorted union of `{0, t}`, the grid `k * grid_dt` and `extra` (clipped to `[0,t]`).
pub fn time_grid(t: f64, grid_dt: Option<f64>, extra: &[f64]) -> Vec<f64> {
    let mut times = vec![0.0, t];
    if let Some(dt) = grid_dt {
        let n = (t / dt).floor() as u64;
        times.extend((1..=n).map(|k| k as f64 * dt).filter(|&s| s < t));
    }
    times.extend(extra.iter().copied().filter(|s| (0.0..=t).contains(s)));
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Sequential sampler of a Brownian bridge ending at `(t, y)`.
struct BridgeWalker {
    t: f64,
    y: f64,
    s: f64,
    w: f64,
}

impl BridgeWalker {
    fn new(t: f64, x: f64, y: f64) -> Self {
        Self { t, y, s: 0.0, w: x }
    }

    #[inline]
    fn advance(&mut self, s: f64, rng: &mut impl Rng) -> f64 {
        if s >= self.t {
            self.s = self.t;
            self.w = self.y;
        } else if s > self.s {
            let span = self.t - self.s;
            let mean = self.w + (s - self.s) / span * (self.y - self.w);
            let var = (s - self.s) * (self.t - s) / span;
            self.w = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            self.s = s;
        }
        self.w
    }
}

/// Brownian bridge from `(0,x)` to `(t,y)` at the grid `k * grid_dt` and `extra_times`.
pub fn sample_bridge(
    t: f64,
    x: f64,
    y: f64,
    grid_dt: f64,
    extra_times: &[f64],
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(t > 0.0) || !(grid_dt > 0.0) {
        return input(format!("bridge needs t > 0 and grid_dt > 0, got t={t}, dt={grid_dt}"));
    }
    let times = time_grid(t, Some(grid_dt), extra_times);
    let mut rng = rng::particle(mix(seed, 0xB1D6E));
    let mut walker = BridgeWalker::new(t, x, y);
    let values = times.iter().map(|&s| walker.advance(s, &mut rng)).collect();
    Ok((times, values))
}

/// Law of the centered maximum `h^{s*}_s - m_s` of a BBM of age `s`.
pub trait DecorationLaw: Sync {
    /// Inverse CDF at `u` in `[0,1)` for age `age`.
    fn quantile(&self, age: f64, u: f64) -> f64;

    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Degenerate decoration, useful for `-inf` (no decoration constraint).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedDecoration(pub f64);

impl DecorationLaw for FixedDecoration {
    fn quantile(&self, _: f64, _: f64) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeQuantiles {
    pub age: f64,
    pub quantiles: Vec<f64>,
    pub n: usize,
}

/// Empirical quantile tables of the decoration law at a few ages; lookups use
/// the nearest tabulated age on a log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct DecorationTable {
    pub tables: Vec<AgeQuantiles>,
}

/// How the BBM runs behind a table are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableBuild {
    pub n: usize,
    /// Pruning line `sqrt2 s - barrier` ...
    pub barrier: f64,
    /// ... used for ages at least this large; younger ages run unpruned.
    pub barrier_from_age: f64,
    pub checkpoint_dt: f64,
}

impl Default for TableBuild {
    fn default() -> Self {
        Self { n: 10_000, barrier: 10.0, barrier_from_age: 8.0, checkpoint_dt: 0.5 }
    }
}

/// Type-7 quantiles at probabilities `k / (QUANTILES - 1)`.
pub fn empirical_quantiles(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    (0..QUANTILES)
        .map(|k| {
            let pos = k as f64 / (QUANTILES - 1) as f64 * (n - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            if i + 1 >= n || frac == 0.0 {
                xs[i.min(n - 1)]
            } else {
                lerp(xs[i], xs[i + 1], frac)
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, frac: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        a
    } else {
        a + frac * (b - a)
    }
}

impl DecorationTable {
    /// Run `build.n` BBMs per age and tabulate their centered maxima.
    pub fn build(ages: &[f64], build: TableBuild, seed: u64) -> Result<Self> {
        if ages.is_empty() || build.n < 2 {
            return Err(Error::Config("decoration table needs ages and n >= 2".into()));
        }
        let mut tables = Vec::with_capacity(ages.len());
        for (j, &age) in ages.iter().enumerate() {
            if !(age > 0.0) {
                return Err(Error::Config(format!("table ages must be positive, got {age}")));
            }
            let mut sim = FrontierSim::new(age);
            if age >= build.barrier_from_age {
                sim = sim.with_front_barrier(build.barrier, build.checkpoint_dt);
            }
            let key = mix(seed, j as u64);
            let mt = centering(age);
            // a run pruned to extinction is recorded at the final barrier level
            let extinct = SQRT_2 * age - build.barrier - mt;
            let maxima: Vec<f64> = (0..build.n as u64)
                .into_par_iter()
                .map(|i| sim.run(mix(key, i)).map(|o| if o.leaves == 0 { extinct } else { o.max - mt }))
                .collect::<Result<_>>()?;
            tables.push(AgeQuantiles { age, quantiles: empirical_quantiles(maxima), n: build.n });
        }
        let table = Self { tables };
        table.validate()?;
        Ok(table)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// Index of the tabulated age nearest to `age` in log scale.
    pub fn nearest(&self, age: f64) -> usize {
        let la = age.max(1e-300).ln();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, t) in self.tables.iter().enumerate() {
            let d = (t.age.ln() - la).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }
}

impl DecorationLaw for DecorationTable {
    fn quantile(&self, age: f64, u: f64) -> f64 {
        let q = &self.tables[self.nearest(age)].quantiles;
        let pos = u.clamp(0.0, 1.0) * (q.len() - 1) as f64;
        let i = (pos.floor() as usize).min(q.len() - 2);
        lerp(q[i], q[i + 1], pos - i as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::Config("decoration table is empty".into()));
        }
        for t in &self.tables {
            if t.quantiles.len() != QUANTILES {
                return Err(Error::Config(format!(
                    "age {}: expected {QUANTILES} quantiles, found {}",
                    t.age,
                    t.quantiles.len()
                )));
            }
            if t.quantiles.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::Config(format!("age {}: quantiles not nondecreasing", t.age)));
            }
        }
        Ok(())
    }
}

/// One realisation of the process on `[0,t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DRWPath {
    pub t: f64,
    pub times: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub what: Vec<f64>,
    pub sigma_indices: Vec<usize>,
    /// Decoration at each sampling time, parallel to `sigma_indices`.
    pub decorations: Vec<f64>,
    pub stay_negative: bool,
}

impl DRWPath {
    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.sigma_indices.iter().map(|&i| self.times[i])
    }

    /// `max W-hat` over path times in `[a, b]`; `None` if there are none.
    pub fn max_what_in(&self, a: f64, b: f64) -> Option<f64> {
        let lo = self.times.partition_point(|&s| s < a);
        let hi = self.times.partition_point(|&s| s <= b);
        self.what[lo..hi].iter().copied().reduce(f64::max)
    }
}

/// Poisson(rate 2) atoms on `[0,t]`, increasing.
pub(crate) fn poisson_times(t: f64, rng: &mut impl Rng) -> Vec<f64> {
    let exp = Exp::new(SIGMA_RATE).expect("positive rate");
    let mut out = Vec::with_capacity((SIGMA_RATE * t * 1.2) as usize + 4);
    let mut s = 0.0;
    loop {
        s += rng.sample(exp);
        if s > t {
            return out;
        }
        out.push(s);
    }
}

/// Forward pass over the merged time set. With `early_exit` the pass stops at
/// the first sampling time whose decorated value is positive. Decorations of
/// sampling times `<= defer_up_to` are not drawn (left NaN) and not checked.
pub(crate) struct Pass {
    pub path: DRWPath,
    pub completed: bool,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_pass(
    t: f64,
    x: f64,
    y: f64,
    grid_dt: Option<f64>,
    extra: &[f64],
    law: &dyn DecorationLaw,
    defer_up_to: f64,
    early_exit: bool,
    rng: &mut ParticleRng,
) -> Pass {
    let sigmas = poisson_times(t, rng);
    let mut times = time_grid(t, grid_dt, extra);
    let mut merged = Vec::with_capacity(times.len() + sigmas.len());
    let mut is_sigma = Vec::with_capacity(times.len() + sigmas.len());
    {
        let (mut i, mut j) = (0, 0);
        while i < times.len() || j < sigmas.len() {
            if j < sigmas.len() && (i == times.len() || sigmas[j] < times[i]) {
                merged.push(sigmas[j]);
                is_sigma.push(true);
                j += 1;
            } else {
                merged.push(times[i]);
                is_sigma.push(false);
                i += 1;
            }
        }
    }
    times = merged;
    let mut walker = BridgeWalker::new(t, x, y);
    let n = times.len();
    let mut path = DRWPath {
        t,
        times: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
        gamma: Vec::with_capacity(n),
        what: Vec::with_capacity(n),
        sigma_indices: Vec::with_capacity(sigmas.len()),
        decorations: Vec::with_capacity(sigmas.len()),
        stay_negative: true,
    };
    for (k, &s) in times.iter().enumerate() {
        let w = walker.advance(s, rng);
        let g = gamma_unchecked(t, s);
        path.times.push(s);
        path.w.push(w);
        path.gamma.push(g);
        path.what.push(w - g);
        if is_sigma[k] {
            path.sigma_indices.push(k);
            if s <= defer_up_to {
                path.decorations.push(f64::NAN);
            } else {
                let d = law.quantile(s, rng.random::<f64>());
                path.decorations.push(d);
                if w - g + d > 0.0 {
                    path.stay_negative = false;
                    if early_exit {
                        return Pass { path, completed: false };
                    }
                }
            }
        }
    }
    Pass { path, completed: true }
}

/// Seeded stream for proposal `i`.
#[inline]
pub(crate) fn proposal_rng(seed: u64, i: u64) -> ParticleRng {
    rng::particle(mix(seed, i))
}

/// A full path with endpoints `x` at 0 and `y` at `t`, decorations drawn from `law`.
pub fn sample_drw(
    t: f64,
    x: f64,
    y: f64,
    law: &dyn DecorationLaw,
    grid_dt: f64,
    seed: u64,
) -> Result<DRWPath> {
    law.validate()?;
    if !(t > 0.0) || !(grid_dt > 0.0) {
        return input(format!("path needs t > 0 and grid_dt > 0, got t={t}, dt={grid_dt}"));
    }
    let mut r = proposal_rng(seed, 0);
    Ok(forward_pass(t, x, y, Some(grid_dt), &[], law, f64::NEG_INFINITY, false, &mut r).path)
}

/// Result of a rejection sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub estimate: Estimate,
    pub proposals: u64,
    pub accepted: u64,
}

/// `P(max_k (W-hat(sigma_k) + dec_k) <= 0 | W-hat_0 = v, W-hat_t = w)`.
pub fn stay_negative_prob(
    t: f64,
    v: f64,
    w: f64,
    n: u64,
    law: &dyn DecorationLaw,
    seed: u64,
) -> Result<Rejection> {
    law.validate()?;
    if n == 0 {
        return input("stay_negative_prob needs N > 0");
    }
    if !(t > 0.0) {
        return input(format!("t must be positive, got {t}"));
    }
    let accepted: u64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = proposal_rng(seed, i);
            forward_pass(t, v, w, None, &[], law, f64::NEG_INFINITY, true, &mut r).completed as u64
        })
        .sum();
    Ok(Rejection { estimate: Estimate::proportion(accepted, n), proposals: n, accepted })
}

pub const MIN_ACCEPTED: u64 = 100;

/// Entropic repulsion: for each `s`, the conditional probability that
/// `max_{u in [s, t-s]} W-hat_u >= -M` given the path stays negative with
/// both endpoints at 0. The maximum runs over grid and sampling times.
pub fn repulsion_probs(
    ss: &[f64],
    t: f64,
    big_m: f64,
    n: u64,
    law: &dyn DecorationLaw,
    grid_dt: f64,
    seed: u64,
) -> Result<(Vec<Estimate>, u64)> {
    law.validate()?;
    if n == 0 {
        return input("repulsion_prob needs N > 0");
    }
    for &s in ss {
        if !(s >= 1.0 && s <= t / 2.0) {
            return input(format!("repulsion needs 1 <= s <= t/2, got s={s}, t={t}"));
        }
    }
    let hits: Vec<Option<Vec<bool>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = proposal_rng(seed, i);
            let pass =
                forward_pass(t, 0.0, 0.0, Some(grid_dt), ss, law, f64::NEG_INFINITY, true, &mut r);
            pass.completed.then(|| {
                ss.iter()
                    .map(|&s| pass.path.max_what_in(s, t - s).is_some_and(|m| m >= -big_m))
                    .collect()
            })
        })
        .collect();
    let accepted: Vec<&Vec<bool>> = hits.iter().flatten().collect();
    let acc = accepted.len() as u64;
    if acc < MIN_ACCEPTED {
        return Err(Error::InsufficientData(format!(
            "{acc} accepted paths out of {n} proposals (need {MIN_ACCEPTED})"
        )));
    }
    let est = (0..ss.len())
        .map(|j| Estimate::proportion(accepted.iter().filter(|h| h[j]).count() as u64, acc))
        .collect();
    Ok((est, acc))
}

pub fn repulsion_prob(
    s: f64,
    t: f64,
    big_m: f64,
    n: u64,
    law: &dyn DecorationLaw,
    seed: u64,
) -> Result<(Estimate, u64)> {
    let (e, acc) = repulsion_probs(&[s], t, big_m, n, law, GRID_DT, seed)?;
    Ok((e[0], acc))
}

/// Outcome of a decoration copy run against a shift.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CopyOutcome {
    /// Centered maximum of the copy (`-inf` if nothing survived pruning).
    pub max_hat: f64,
    /// Shifted atoms `h - m_age + shift` that lie in `[-depth, 0]`.
    pub atoms: Vec<f64>,
    /// The copy rose above `-shift`.
    pub exceeded: bool,
    pub leaves: usize,
}

/// Shape of the pruning curve for decoration copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopyPruning {
    /// Distance below the floor at the copy's age.
    pub b: f64,
    /// Extra room in the middle, in units of the bridge standard deviation.
    pub bulge: f64,
    pub dt: f64,
}

impl Default for CopyPruning {
    fn default() -> Self {
        Self { b: 3.0, bulge: 1.0, dt: 0.5 }
    }
}

/// Pruning for a copy whose atoms are only needed above `floor` (absolute):
/// the chord from `(0, -b)` to `(age, floor - b)`, lowered by `bulge` bridge
/// standard deviations in between.
pub fn copy_barrier(age: f64, floor: f64, p: CopyPruning) -> Barrier {
    Barrier { slope: floor / age, offset: p.b, bulge: p.bulge, span: age, dt: p.dt }
}

/// Run a BBM of age `age`, shifted by `shift`, stopping as soon as it exceeds 0
/// after the shift; collects shifted atoms down to `-depth`.
pub fn decorated_copy(
    age: f64,
    shift: f64,
    depth: f64,
    pruning: Option<CopyPruning>,
    max_population: usize,
    seed: u64,
) -> Result<CopyOutcome> {
    let mt = centering(age);
    let floor = mt - shift - depth;
    let ceiling = mt - shift;
    let mut sim = FrontierSim::new(age).keep_above(floor).abort_above(ceiling);
    sim.max_population = max_population;
    if let Some(p) = pruning {
        sim = sim.with_barrier(Some(copy_barrier(age, floor, p)));
    }
    let out = sim.run(seed)?;
    Ok(CopyOutcome {
        max_hat: out.max - mt,
        atoms: out.heights.iter().map(|h| h - mt + shift).collect(),
        exceeded: out.exceeded,
        leaves: out.leaves,
    })
}

/// `J^{>=M}_{t,v}(s)` averaged over proposals with both endpoints at 0.
#[allow(clippy::too_many_arguments)]
pub fn estimate_j(
    t: f64,
    v: f64,
    s: f64,
    big_m: f64,
    n: u64,
    law: &dyn DecorationLaw,
    copy_pruning: Option<CopyPruning>,
    seed: u64,
) -> Result<Rejection> {
    law.validate()?;
    if n == 0 {
        return input("estimate_J needs N > 0");
    }
    if !(v >= 0.0) || !(s > 0.0 && s <= t / 2.0) || !(big_m >= 0.0) {
        return input(format!("estimate_J needs v >= 0, 0 < s <= t/2, M >= 0; got v={v}, s={s}, M={big_m}"));
    }
    let vals: Vec<(f64, bool)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, bool)> {
            let mut r = proposal_rng(seed, i);
            let pass =
                forward_pass(t, 0.0, 0.0, None, &[s], law, f64::NEG_INFINITY, true, &mut r);
            if !pass.completed {
                return Ok((0.0, false));
            }
            let p = &pass.path;
            let k = p.times.partition_point(|&u| u < s);
            let what = p.what[k];
            if what.abs() < big_m {
                return Ok((0.0, true));
            }
            let copy = decorated_copy(s, what, v, copy_pruning, 50_000_000, mix(mix(seed, i), 0x7A))?;
            if copy.exceeded {
                return Ok((0.0, true));
            }
            Ok((copy.atoms.iter().filter(|&&a| a >= -v && a <= 0.0).count() as f64, true))
        })
        .collect::<Result<_>>()?;
    let accepted = vals.iter().filter(|v| v.1).count() as u64;
    Ok(Rejection {
        estimate: Estimate::from_samples(vals.iter().map(|v| v.0)),
        proposals: n,
        accepted,
    })
}
