//! Constraint-aware regularized evolution over [`SubnetChoice`]s.
//!
//! The population is a queue: each step a tournament picks a parent, its
//! mutant (resampled until it meets the MAC budget) joins the back and the
//! oldest member leaves. Initial members are uniform samples; one that
//! keeps missing the budget is shrunk gene by gene until it fits. Candidates are ranked by fitness, then by fewer
//! MACs, then by the smaller choice encoding.

use std::cmp::Ordering;
use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::decode::aggregate;
use crate::engine::{forward, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::supernet::{extract_to, sample_with, subnet_arch, SearchSpace, SubnetChoice, WeightStore};
use crate::synth::{generate, SynthParams};

/// Scores a sub-network; higher is better. Must be deterministic.
pub trait FitnessEvaluator: Sync {
    fn evaluate(&self, space: &SearchSpace, choice: &SubnetChoice) -> Result<f64>;
}

/// Fitness = −MACs.
pub struct NegMacs;

impl FitnessEvaluator for NegMacs {
    fn evaluate(&self, space: &SearchSpace, choice: &SubnetChoice) -> Result<f64> {
        Ok(-(space.macs(choice)? as f64))
    }
}

/// Fitness = −|total channels − target|: single-peaked in the channel sum.
pub struct PlantedUnimodal {
    pub target_channels: f64,
}

impl FitnessEvaluator for PlantedUnimodal {
    fn evaluate(&self, space: &SearchSpace, choice: &SubnetChoice) -> Result<f64> {
        let total: u32 = choice.channels(space).iter().sum();
        Ok(-(total as f64 - self.target_channels).abs())
    }
}

/// −MSE between aggregated predicted heatmaps and `target` heatmaps
/// (the first `J` channels of `target` are used).
pub fn heatmap_score(outputs: &[Tensor<f32>], target: &Tensor<f32>) -> Result<f64> {
    let (heat, _) = aggregate(outputs)?;
    let j = heat.c();
    let t = target.channels(0..j.min(target.c()));
    if heat.dims() != t.dims() {
        return Err(Error::ShapeMismatch {
            layer: "heatmaps".into(),
            reason: format!("prediction {:?} vs target {:?}", heat.dims(), t.dims()),
        });
    }
    let n = heat.data().len() as f64;
    let sse: f64 = heat.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(-sse / n)
}

/// (input image, target heatmaps) pairs.
pub type ProxyScenes = Vec<(Tensor<f32>, Tensor<f32>)>;

/// Runs each sub-network (weights sliced from a shared store) on synthetic
/// scenes and scores its heatmaps against the planted ones.
pub struct HeatmapProxy {
    pub store: WeightStore<f32>,
    pub data: HashMap<u32, ProxyScenes>,
}

impl HeatmapProxy {
    /// `images` scenes per resolution of `space`, drawn from `seed`.
    pub fn new(space: &SearchSpace, store: WeightStore<f32>, images: usize, seed: u64) -> Result<Self> {
        let root = SeedTree::new(seed).split("heatmap-proxy");
        let j = space.arch.num_joints as usize;
        let largest = *space.arch.outputs.iter().min().unwrap_or(&1);
        let mut data = HashMap::new();
        for &r in &space.resolutions {
            let size = (r / largest) as usize;
            let params = SynthParams {
                persons: if size >= 32 { 2 } else { 1 },
                joints: j,
                size,
                window: 3,
                ..Default::default()
            };
            let scenes = (0..images)
                .map(|i| {
                    let s = generate(root.index(r as u64).index(i as u64).seed(), &params)?;
                    Ok((s.render_image(r as usize), s.render()))
                })
                .collect::<Result<Vec<_>>>()?;
            data.insert(r, scenes);
        }
        Ok(Self { store, data })
    }
}

impl FitnessEvaluator for HeatmapProxy {
    fn evaluate(&self, space: &SearchSpace, choice: &SubnetChoice) -> Result<f64> {
        let sub = subnet_arch(&space.arch, choice)?;
        let weights = extract_to(&self.store, &sub)?;
        let scenes = self
            .data
            .get(&choice.resolution)
            .ok_or_else(|| Error::InvalidChoice(format!("no proxy data at resolution {}", choice.resolution)))?;
        let mut total = 0.0;
        for (x, target) in scenes {
            let (outs, _) = forward(&sub, &weights, x)?;
            total += heatmap_score(&outs, target)?;
        }
        Ok(total / scenes.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvolutionParams {
    pub population: usize,
    pub tournament: usize,
    pub p_mut: f64,
    pub retry_cap: usize,
    /// Number of mutants evaluated after the initial population.
    pub generations: usize,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        Self { population: 64, tournament: 8, p_mut: 0.1, retry_cap: 100, generations: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub choice: SubnetChoice,
    pub fitness: f64,
    pub macs: u64,
}

/// Total order: `Greater` means `a` is the better candidate.
pub fn compare(a: &Candidate, b: &Candidate) -> Ordering {
    a.fitness
        .total_cmp(&b.fitness)
        .then(b.macs.cmp(&a.macs))
        .then(b.choice.cmp(&a.choice))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub generation: usize,
    pub best: SubnetChoice,
    pub fitness: f64,
    pub gmacs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchState {
    pub population: VecDeque<Candidate>,
    pub generation: usize,
    pub best: Candidate,
    pub seed: u64,
    pub constraint: u64,
    /// Best candidate after the initial population (generation 0) and after each step.
    pub history: Vec<HistoryEntry>,
    pub evaluations: usize,
}

/// Resample each gene (resolution and every ratio) with probability
/// `p_mut`; a resampled gene always takes a different value when one exists.
pub fn mutate(choice: &SubnetChoice, space: &SearchSpace, p_mut: f64, seed: u64) -> SubnetChoice {
    mutate_with(choice, space, p_mut, &mut SeedTree::new(seed).split("mutate").rng())
}

fn resample<T: Copy + PartialEq>(current: T, options: &[T], rng: &mut impl Rng) -> T {
    let others: Vec<T> = options.iter().copied().filter(|&o| o != current).collect();
    if others.is_empty() {
        current
    } else {
        others[rng.gen_range(0..others.len())]
    }
}

fn mutate_with(choice: &SubnetChoice, space: &SearchSpace, p_mut: f64, rng: &mut impl Rng) -> SubnetChoice {
    let p = p_mut.clamp(0.0, 1.0);
    let mut out = choice.clone();
    if rng.gen_bool(p) {
        out.resolution = resample(out.resolution, &space.resolutions, rng);
    }
    for r in &mut out.ratios {
        if rng.gen_bool(p) {
            *r = resample(*r, &space.width_ratios, rng);
        }
    }
    out
}

fn below<T: Copy + Ord>(v: T, options: &[T]) -> Option<T> {
    options.iter().copied().filter(|&o| o < v).max()
}

/// Lower one randomly picked non-minimal gene by one step at a time until
/// `c` fits under `limit`. Terminates because the minimal choice fits.
fn repair(mut c: SubnetChoice, space: &SearchSpace, limit: u64, cache: &mut Cache, rng: &mut impl Rng) -> Result<SubnetChoice> {
    while cache.macs(&c)? > limit {
        let mut genes: Vec<usize> = Vec::new();
        if below(c.resolution, &space.resolutions).is_some() {
            genes.push(0);
        }
        genes.extend((0..c.ratios.len()).filter(|&i| below(c.ratios[i], &space.width_ratios).is_some()).map(|i| i + 1));
        if genes.is_empty() {
            break;
        }
        match genes[rng.gen_range(0..genes.len())] {
            0 => c.resolution = below(c.resolution, &space.resolutions).expect("checked"),
            g => c.ratios[g - 1] = below(c.ratios[g - 1], &space.width_ratios).expect("checked"),
        }
    }
    Ok(c)
}

struct Cache<'a> {
    space: &'a SearchSpace,
    evaluator: &'a dyn FitnessEvaluator,
    macs: HashMap<SubnetChoice, u64>,
    fitness: HashMap<SubnetChoice, f64>,
    evaluations: usize,
}

impl Cache<'_> {
    fn macs(&mut self, c: &SubnetChoice) -> Result<u64> {
        if let Some(&m) = self.macs.get(c) {
            return Ok(m);
        }
        let m = self.space.macs(c)?;
        self.macs.insert(c.clone(), m);
        Ok(m)
    }

    /// Evaluate a batch concurrently; results come back in submission order.
    fn fitness(&mut self, batch: &[SubnetChoice]) -> Result<Vec<f64>> {
        let todo: Vec<&SubnetChoice> = {
            let mut seen = std::collections::HashSet::new();
            batch.iter().filter(|c| !self.fitness.contains_key(*c) && seen.insert(*c)).collect()
        };
        let (space, evaluator) = (self.space, self.evaluator);
        let scores: Vec<Result<f64>> = todo.par_iter().map(|c| evaluator.evaluate(space, c)).collect();
        for (c, s) in todo.into_iter().zip(scores) {
            self.fitness.insert(c.clone(), s?);
        }
        self.evaluations += batch.len();
        Ok(batch.iter().map(|c| self.fitness[c]).collect())
    }
}

pub fn evolve(
    space: &SearchSpace,
    constraint_macs: u64,
    evaluator: &dyn FitnessEvaluator,
    params: &EvolutionParams,
    seed: u64,
) -> Result<SearchState> {
    space.check()?;
    if params.population == 0 || params.tournament == 0 {
        return Err(Error::InvalidInput("population and tournament sizes must be positive".into()));
    }
    let mut cache = Cache { space, evaluator, macs: HashMap::new(), fitness: HashMap::new(), evaluations: 0 };
    let min_macs = cache.macs(&space.min_choice())?;
    if min_macs > constraint_macs {
        return Err(Error::InfeasibleConstraint { min_macs, limit: constraint_macs });
    }
    let mut rng = SeedTree::new(seed).split("evolve").rng();

    let mut init = Vec::with_capacity(params.population);
    for _ in 0..params.population {
        let mut tries = 0;
        let c = loop {
            let c = sample_with(space, &mut rng);
            if cache.macs(&c)? <= constraint_macs {
                break c;
            }
            tries += 1;
            if tries >= params.retry_cap.max(1) {
                break repair(c, space, constraint_macs, &mut cache, &mut rng)?;
            }
        };
        init.push(c);
    }
    let scores = cache.fitness(&init)?;
    let mut population: VecDeque<Candidate> = init
        .into_iter()
        .zip(scores)
        .map(|(choice, fitness)| {
            let macs = cache.macs[&choice];
            Candidate { choice, fitness, macs }
        })
        .collect();
    let mut best = population.iter().max_by(|a, b| compare(a, b)).expect("non-empty").clone();
    let entry = |g: usize, b: &Candidate| HistoryEntry {
        generation: g,
        best: b.choice.clone(),
        fitness: b.fitness,
        gmacs: b.macs as f64 / 1e9,
    };
    let mut history = vec![entry(0, &best)];

    for g in 1..=params.generations {
        let parent = (0..params.tournament)
            .map(|_| &population[rng.gen_range(0..population.len())])
            .max_by(|a, b| compare(a, b))
            .expect("tournament is non-empty")
            .choice
            .clone();
        let mut tries = 0;
        let child = loop {
            let c = mutate_with(&parent, space, params.p_mut, &mut rng);
            if cache.macs(&c)? <= constraint_macs {
                break c;
            }
            tries += 1;
            if tries >= params.retry_cap {
                return Err(Error::RetryCapExhausted(params.retry_cap));
            }
        };
        let fitness = cache.fitness(std::slice::from_ref(&child))?[0];
        let cand = Candidate { macs: cache.macs[&child], choice: child, fitness };
        if compare(&cand, &best) == Ordering::Greater {
            best = cand.clone();
        }
        population.push_back(cand);
        population.pop_front();
        history.push(entry(g, &best));
    }

    Ok(SearchState {
        population,
        generation: params.generations,
        best,
        seed,
        constraint: constraint_macs,
        history,
        evaluations: cache.evaluations,
    })
}
