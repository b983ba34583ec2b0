//! Exact event-driven simulation of binary branching Brownian motion.
//!
//! Each particle draws an exponential lifetime and the Gaussian increment over
//! its whole life from its own keyed stream. Heights at barrier checkpoints are
//! filled in afterwards by Brownian-bridge interpolation from a second stream,
//! so switching pruning on with an infinite barrier leaves the process unchanged.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::genealogy::{Fate, GenealogyTree, PointMeasure, RawNode};
use crate::rng::{self, mix, ParticleRng};

/// `3 / (2 sqrt 2)`, the logarithmic correction in the centering.
pub const LOG_CORRECTION: f64 = 3.0 / (2.0 * SQRT_2);

const AUX_SLOT: u64 = 0xA0A0;
const ROOT_SLOT: u64 = 0x5EED;

#[inline]
pub fn log_plus(t: f64) -> f64 {
    t.max(1.0).ln()
}

/// Centering `sqrt 2 t - 3/(2 sqrt 2) log+ t`.
pub fn m(t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return input(format!("centering needs t >= 0, got {t}"));
    }
    Ok(centering(t))
}

#[inline]
pub(crate) fn centering(t: f64) -> f64 {
    SQRT_2 * t - LOG_CORRECTION * log_plus(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Pruning {
    Off,
    /// Remove particles below `sqrt 2 s - b` at checkpoints `k * checkpoint_dt`.
    Barrier { b: f64, checkpoint_dt: f64 },
}

impl Default for Pruning {
    fn default() -> Self {
        Pruning::Barrier { b: 10.0, checkpoint_dt: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbmConfig {
    pub horizon_t: f64,
    pub branch_rate: f64,
    pub pruning: Pruning,
    pub max_population: usize,
    pub seed: u64,
}

impl BbmConfig {
    pub fn unpruned(horizon_t: f64, seed: u64) -> Self {
        Self { horizon_t, branch_rate: 1.0, pruning: Pruning::Off, max_population: 50_000_000, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_t > 0.0) || !self.horizon_t.is_finite() {
            return Err(Error::Config(format!("horizon_t must be > 0, got {}", self.horizon_t)));
        }
        if !(self.branch_rate > 0.0) {
            return Err(Error::Config("branch_rate must be > 0".into()));
        }
        if let Pruning::Barrier { b, checkpoint_dt } = self.pruning {
            if !(checkpoint_dt > 0.0) {
                return Err(Error::Config("checkpoint_dt must be > 0".into()));
            }
            if b.is_nan() || b < 0.0 {
                return Err(Error::Config("barrier offset must be >= 0".into()));
            }
        }
        Ok(())
    }

    fn barrier(&self) -> Option<Barrier> {
        match self.pruning {
            Pruning::Off => None,
            Pruning::Barrier { b, checkpoint_dt } => {
                Some(Barrier::line(SQRT_2, b, checkpoint_dt))
            }
        }
    }
}

/// Pruning curve `slope * s - offset - bulge * sqrt(s (span - s) / span)`,
/// checked every `dt`. With `bulge = 0` it is a straight line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Barrier {
    pub slope: f64,
    pub offset: f64,
    pub bulge: f64,
    pub span: f64,
    pub dt: f64,
}

impl Barrier {
    pub fn line(slope: f64, offset: f64, dt: f64) -> Self {
        Self { slope, offset, bulge: 0.0, span: 1.0, dt }
    }

    #[inline]
    pub fn level(&self, s: f64) -> f64 {
        let base = self.slope * s - self.offset;
        if self.bulge == 0.0 {
            base
        } else {
            let x = (s * (self.span - s) / self.span).max(0.0);
            base - self.bulge * x.sqrt()
        }
    }
}

/// Outcome of one particle's life.
struct Life {
    end: f64,
    end_height: f64,
    branched: bool,
    pruned_at: Option<f64>,
}

#[inline]
fn live(key: u64, birth: f64, h0: f64, horizon: f64, rate: f64, barrier: Option<&Barrier>) -> Life {
    let mut prng: ParticleRng = rng::particle(key);
    let lifetime: f64 = prng.sample::<f64, _>(Exp1) / rate;
    let death = birth + lifetime;
    let (end, branched) = if death < horizon { (death, true) } else { (horizon, false) };
    let z: f64 = prng.sample(StandardNormal);
    let h1 = h0 + (end - birth).sqrt() * z;
    let mut pruned_at = None;
    if let Some(b) = barrier {
        let mut k = (birth / b.dt).floor() as u64 + 1;
        let mut s = k as f64 * b.dt;
        if s <= end && s < horizon {
            let mut aux = rng::particle(mix(key, AUX_SLOT));
            let (mut ps, mut ph) = (birth, h0);
            while s <= end && s < horizon {
                let val = if s >= end {
                    h1
                } else {
                    let span = end - ps;
                    let w = (s - ps) / span;
                    let var = (s - ps) * (end - s) / span;
                    ph + w * (h1 - ph) + var.sqrt() * aux.sample::<f64, _>(StandardNormal)
                };
                if val < b.level(s) {
                    pruned_at = Some(s);
                    break;
                }
                ps = s;
                ph = val;
                k += 1;
                s = k as f64 * b.dt;
            }
        }
    }
    Life { end, end_height: h1, branched, pruned_at }
}

/// Simulated particle system at the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub tree: GenealogyTree,
    /// Whether barrier pruning was active.
    pub pruned: bool,
    pub pruned_count: usize,
}

impl Population {
    pub fn horizon(&self) -> f64 {
        self.tree.horizon()
    }

    pub fn size(&self) -> usize {
        self.tree.leaf_heights().len()
    }

    pub fn heights(&self) -> impl Iterator<Item = f64> + '_ {
        self.tree.leaf_heights().iter().map(|&(_, h)| h)
    }

    /// `max h - m(t)`.
    pub fn centered_max(&self) -> Result<f64> {
        let max = self.heights().fold(f64::NEG_INFINITY, f64::max);
        if self.size() == 0 {
            return Err(Error::Domain("empty population has no maximum".into()));
        }
        Ok(max - centering(self.horizon()))
    }

    /// Extremal process `sum delta_{h(x) - m(t)}`.
    pub fn centered_heights(&self) -> Result<PointMeasure> {
        if self.size() == 0 {
            return Err(Error::Domain("empty population".into()));
        }
        let mt = centering(self.horizon());
        Ok(self.heights().map(|h| h - mt).collect())
    }

    /// `c_diamond * sum (sqrt2 t - h) e^{sqrt2 (h - sqrt2 t)}`.
    pub fn derivative_martingale(&self, c_diamond: f64) -> f64 {
        derivative_martingale(self.heights(), self.horizon(), c_diamond)
    }
}

pub fn derivative_martingale(heights: impl Iterator<Item = f64>, t: f64, c_diamond: f64) -> f64 {
    let front = SQRT_2 * t;
    c_diamond * heights.map(|h| (front - h) * (SQRT_2 * (h - front)).exp()).sum::<f64>()
}

/// Simulate a BBM with its full genealogy.
pub fn simulate(config: &BbmConfig) -> Result<Population> {
    config.validate()?;
    let barrier = config.barrier();
    let horizon = config.horizon_t;
    let mut raw: Vec<RawNode> = Vec::new();
    let mut pruned_count = 0usize;
    let mut leaves = 0usize;
    // (raw index, key, birth, height at birth)
    let mut stack = vec![(0usize, mix(config.seed, ROOT_SLOT), 0.0f64, 0.0f64)];
    raw.push(RawNode { parent: None, birth_time: 0.0, fate: Fate::Alive, height: 0.0 });
    while let Some((idx, key, birth, h0)) = stack.pop() {
        let life = live(key, birth, h0, horizon, config.branch_rate, barrier.as_ref());
        if let Some(p) = life.pruned_at {
            raw[idx].fate = Fate::Pruned(p);
            pruned_count += 1;
        } else if life.branched {
            raw[idx].fate = Fate::Branched(life.end);
            for slot in [1u64, 2] {
                stack.push((raw.len(), mix(key, slot), life.end, life.end_height));
                raw.push(RawNode {
                    parent: Some(idx),
                    birth_time: life.end,
                    fate: Fate::Alive,
                    height: 0.0,
                });
            }
        } else {
            raw[idx].height = life.end_height;
            leaves += 1;
        }
        if leaves + stack.len() > config.max_population {
            return Err(Error::Resource {
                cap: config.max_population,
                alive: leaves + stack.len(),
                leaves,
                pruned: pruned_count,
            });
        }
    }
    let tree = GenealogyTree::from_raw(&raw, horizon)?;
    Ok(Population { tree, pruned: barrier.is_some(), pruned_count })
}

/// Height-only simulation used for decorations and copies, where the
/// genealogy is not needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierSim {
    pub age: f64,
    pub barrier: Option<Barrier>,
    /// Keep leaves with height `>= floor`.
    pub floor: f64,
    /// Abort as soon as a leaf exceeds this height.
    pub ceiling: f64,
    pub max_population: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrontierOutcome {
    /// Maximum leaf height (`-inf` if every particle was pruned).
    pub max: f64,
    /// Kept leaf heights, unsorted.
    pub heights: Vec<f64>,
    pub leaves: usize,
    pub pruned: usize,
    /// Simulation stopped because a leaf exceeded the ceiling.
    pub exceeded: bool,
}

impl FrontierSim {
    pub fn new(age: f64) -> Self {
        Self {
            age,
            barrier: None,
            floor: f64::INFINITY,
            ceiling: f64::INFINITY,
            max_population: 50_000_000,
        }
    }

    /// Pruning line `sqrt2 s - b` (the default barrier of [`BbmConfig`]).
    pub fn with_front_barrier(mut self, b: f64, dt: f64) -> Self {
        self.barrier = Some(Barrier::line(SQRT_2, b, dt));
        self
    }

    pub fn with_barrier(mut self, barrier: Option<Barrier>) -> Self {
        self.barrier = barrier;
        self
    }

    pub fn keep_above(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn abort_above(mut self, ceiling: f64) -> Self {
        self.ceiling = ceiling;
        self
    }

    pub fn run(&self, seed: u64) -> Result<FrontierOutcome> {
        let mut out = FrontierOutcome { max: f64::NEG_INFINITY, ..Default::default() };
        if self.age <= 0.0 {
            out.max = 0.0;
            out.leaves = 1;
            if 0.0 >= self.floor {
                out.heights.push(0.0);
            }
            out.exceeded = 0.0 > self.ceiling;
            return Ok(out);
        }
        let mut stack: Vec<(u64, f64, f64)> = Vec::with_capacity(64);
        stack.push((mix(seed, ROOT_SLOT), 0.0, 0.0));
        while let Some((key, birth, h0)) = stack.pop() {
            let life = live(key, birth, h0, self.age, 1.0, self.barrier.as_ref());
            if life.pruned_at.is_some() {
                out.pruned += 1;
            } else if life.branched {
                stack.push((mix(key, 1), life.end, life.end_height));
                stack.push((mix(key, 2), life.end, life.end_height));
                if out.leaves + stack.len() > self.max_population {
                    return Err(Error::Resource {
                        cap: self.max_population,
                        alive: out.leaves + stack.len(),
                        leaves: out.leaves,
                        pruned: out.pruned,
                    });
                }
            } else {
                let h = life.end_height;
                out.leaves += 1;
                if h > out.max {
                    out.max = h;
                }
                if h >= self.floor {
                    out.heights.push(h);
                }
                if h > self.ceiling {
                    out.exceeded = true;
                    return Ok(out);
                }
            }
        }
        Ok(out)
    }
}
