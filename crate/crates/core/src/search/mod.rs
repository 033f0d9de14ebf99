//! Bin-constrained evolutionary search.
//!
//! Each parameter bin runs its own population. Every epoch keeps the `k`
//! best members as elites, breeds `λ` mutants and `λ` crossovers from them,
//! draws `r` random samples, and keeps the best `N` of the union. Every
//! admitted candidate satisfies the bin. Randomness for epoch `t` of bin `b`
//! comes from a seed derived from `(seed, b, t)`, so a run restarted from a
//! saved [`BinState`] continues exactly as the uninterrupted run would.

mod fitness;
mod ops;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, par_map, Execution};
use crate::model::{count_params, Supernet, SubnetworkConfig};
use crate::space::SearchSpace;

pub use fitness::{evaluate_fitness, masked_perplexity, Metric};
pub use ops::{
    constrain, crossover, crossover_with, mutate, mutate_dimension, sample_in_bin, CrossoverMask, Dimension,
    DIMENSIONS,
};

/// Fitness given to candidates whose evaluation failed.
pub const WORST_FITNESS: f64 = f64::MAX;

/// Closed interval of parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBin {
    pub lower: usize,
    pub upper: usize,
}

impl ParamBin {
    pub fn new(lower: usize, upper: usize) -> Result<Self> {
        if lower == 0 || lower > upper {
            return Err(Error::validation("bounds", format!("bin [{lower}, {upper}] needs 0 < lower <= upper")));
        }
        Ok(ParamBin { lower, upper })
    }

    pub fn admits(&self, params: usize) -> bool {
        self.lower <= params && params <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Discovery order within the bin.
    pub id: usize,
    pub cfg: SubnetworkConfig,
    pub params: usize,
    pub fitness: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.fitness
        .total_cmp(&b.fitness)
        .then(a.params.cmp(&b.params))
        .then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvoParams {
    pub population: usize,
    pub elites: usize,
    pub epochs: usize,
    pub offspring: usize,
    pub random: usize,
    pub mutation_prob: f64,
    pub crossover_prob: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for EvoParams {
    fn default() -> Self {
        EvoParams {
            population: 16,
            elites: 4,
            epochs: 20,
            offspring: 8,
            random: 8,
            mutation_prob: 0.2,
            crossover_prob: 0.2,
            seed: 0,
            max_attempts: 1000,
        }
    }
}

impl EvoParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("population", self.population),
            ("elites", self.elites),
            ("epochs", self.epochs),
            ("max_attempts", self.max_attempts),
        ] {
            if v == 0 {
                bad.push(crate::Violation::new("bounds", format!("{name} must be >= 1")));
            }
        }
        if self.elites > self.population {
            bad.push(crate::Violation::new("bounds", "elites exceed population"));
        }
        for (name, p) in [("mutation_prob", self.mutation_prob), ("crossover_prob", self.crossover_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(crate::Violation::new("bounds", format!("{name} {p} not in [0, 1]")));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub bin: usize,
    pub candidate: usize,
    pub params: usize,
    pub fitness: f64,
}

pub const HISTORY_HEADER: &str = "epoch,bin,candidate,params,fitness";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.bin, r.candidate, r.params, r.fitness).expect("string write");
    }
    s
}

/// Everything needed to continue one bin's search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinState {
    pub bin_index: usize,
    pub bin: ParamBin,
    /// Epochs completed.
    pub epoch: usize,
    /// Current population, best first.
    pub population: Vec<Candidate>,
    /// Every candidate ever evaluated, in discovery order.
    pub evaluated: Vec<Candidate>,
    pub history: Vec<HistoryRow>,
}

impl BinState {
    pub fn best(&self) -> Option<&Candidate> {
        self.population.first()
    }

    /// Best fitness recorded at each epoch.
    pub fn best_per_epoch(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.history {
            if r.epoch == out.len() {
                out.push(r.fitness);
            } else {
                let last = out.last_mut().expect("rows grouped by epoch");
                *last = last.min(r.fitness);
            }
        }
        out
    }
}

/// A configured search over one supernet.
pub struct Search<'a> {
    pub model: &'a Supernet,
    pub space: &'a SearchSpace,
    pub evo: &'a EvoParams,
    pub metric: Metric<'a>,
    pub exec: Execution,
}

/// Per-bin result of [`run_search`].
#[derive(Debug)]
pub struct BinOutcome {
    pub bin: ParamBin,
    pub result: Result<BinState>,
}

struct Registry {
    by_key: HashMap<String, usize>,
}

impl Search<'_> {
    fn sup(&self) -> &crate::model::SupernetConfig {
        self.model.config()
    }

    /// Evaluate configs not yet seen, in order, and return their candidates.
    fn admit(&self, state: &mut BinState, reg: &mut Registry, cfgs: Vec<SubnetworkConfig>) -> Result<Vec<Candidate>> {
        let mut fresh = Vec::new();
        let mut fresh_keys = HashMap::new();
        for cfg in &cfgs {
            let key = cfg.key();
            if !reg.by_key.contains_key(&key) && !fresh_keys.contains_key(&key) {
                fresh_keys.insert(key, fresh.len());
                fresh.push(cfg.clone());
            }
        }
        let scores = par_map(self.exec, &fresh, |cfg| evaluate_fitness(self.model, cfg, self.metric));
        for (cfg, score) in fresh.into_iter().zip(scores) {
            let params = count_params(self.sup(), &cfg)?;
            if !state.bin.admits(params) {
                return Err(Error::Parameter(format!("candidate with {params} params escaped its bin")));
            }
            let id = state.evaluated.len();
            reg.by_key.insert(cfg.key(), id);
            state.evaluated.push(Candidate {
                id,
                cfg,
                params,
                fitness: score.unwrap_or(WORST_FITNESS),
            });
        }
        Ok(cfgs
            .iter()
            .map(|c| state.evaluated[reg.by_key[&c.key()]].clone())
            .collect())
    }

    fn record(state: &mut BinState) {
        for c in &state.population {
            state.history.push(HistoryRow {
                epoch: state.epoch,
                bin: state.bin_index,
                candidate: c.id,
                params: c.params,
                fitness: c.fitness,
            });
        }
    }

    fn select(mut pool: Vec<Candidate>, n: usize) -> Vec<Candidate> {
        pool.sort_by(rank);
        pool.dedup_by_key(|c| c.id);
        pool.truncate(n);
        pool
    }

    /// Sample and evaluate the initial population of a bin.
    pub fn init_bin(&self, bin_index: usize, bin: ParamBin) -> Result<BinState> {
        self.evo.validate()?;
        self.space.check(self.sup())?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.evo.seed, &[bin_index as u64, u64::MAX]));
        let mut cfgs = Vec::with_capacity(self.evo.population);
        for _ in 0..self.evo.population {
            cfgs.push(sample_in_bin(&bin, self.space, self.sup(), &mut rng, self.evo.max_attempts)?);
        }
        let mut state = BinState {
            bin_index,
            bin,
            epoch: 0,
            population: Vec::new(),
            evaluated: Vec::new(),
            history: Vec::new(),
        };
        let mut reg = Registry { by_key: HashMap::new() };
        let members = self.admit(&mut state, &mut reg, cfgs)?;
        state.population = Self::select(members, self.evo.population);
        Self::record(&mut state);
        Ok(state)
    }

    fn offspring_slot(
        &self,
        state: &BinState,
        elites: &[Candidate],
        crossover_slot: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<SubnetworkConfig> {
        let (sup, evo) = (self.sup(), self.evo);
        let prob = if crossover_slot { evo.crossover_prob } else { evo.mutation_prob };
        if rng.random_bool(prob) {
            for _ in 0..evo.max_attempts {
                let child = if crossover_slot {
                    let a = elites.choose(rng).expect("elites non-empty");
                    let mates: Vec<&Candidate> =
                        elites.iter().filter(|b| b.cfg.n_layers() == a.cfg.n_layers()).collect();
                    let b = mates.choose(rng).expect("a matches itself");
                    crossover(&a.cfg, &b.cfg, sup, rng)?
                } else {
                    let a = elites.choose(rng).expect("elites non-empty");
                    mutate(&a.cfg, self.space, sup, rng)
                };
                if state.bin.admits(count_params(sup, &child)?) {
                    return Ok(child);
                }
            }
        }
        sample_in_bin(&state.bin, self.space, sup, rng, evo.max_attempts)
    }

    /// Run one epoch: elites, offspring, random samples, selection.
    pub fn step(&self, state: &mut BinState) -> Result<()> {
        let evo = self.evo;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(evo.seed, &[state.bin_index as u64, state.epoch as u64]));
        let mut reg = Registry {
            by_key: state.evaluated.iter().map(|c| (c.cfg.key(), c.id)).collect(),
        };
        let elites: Vec<Candidate> = state.population.iter().take(evo.elites).cloned().collect();
        let mut cfgs = Vec::with_capacity(2 * evo.offspring + evo.random);
        for _ in 0..evo.offspring {
            cfgs.push(self.offspring_slot(state, &elites, false, &mut rng)?);
        }
        for _ in 0..evo.offspring {
            cfgs.push(self.offspring_slot(state, &elites, true, &mut rng)?);
        }
        for _ in 0..evo.random {
            cfgs.push(sample_in_bin(&state.bin, self.space, self.sup(), &mut rng, evo.max_attempts)?);
        }
        let mut pool = elites;
        pool.extend(self.admit(state, &mut reg, cfgs)?);
        state.population = Self::select(pool, evo.population);
        state.epoch += 1;
        Self::record(state);
        Ok(())
    }

    /// Run a bin to completion, starting from `resume` when given and
    /// calling `on_epoch` after initialization and after every epoch.
    pub fn run_bin(
        &self,
        bin_index: usize,
        bin: ParamBin,
        resume: Option<BinState>,
        on_epoch: &mut dyn FnMut(&BinState) -> Result<()>,
    ) -> Result<BinState> {
        let mut state = match resume {
            Some(s) => s,
            None => {
                let s = self.init_bin(bin_index, bin)?;
                on_epoch(&s)?;
                s
            }
        };
        while state.epoch < self.evo.epochs {
            self.step(&mut state)?;
            on_epoch(&state)?;
        }
        Ok(state)
    }
}

/// Search every bin independently; a failing bin does not stop the others.
pub fn run_search(search: &Search<'_>, bins: &[ParamBin]) -> Vec<BinOutcome> {
    bins.iter()
        .enumerate()
        .map(|(i, &bin)| BinOutcome {
            bin,
            result: search.run_bin(i, bin, None, &mut |_| Ok(())),
        })
        .collect()
}
