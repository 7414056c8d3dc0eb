//! Synthetic GUI worlds for exercising the training and evaluation loop.
//!
//! A shared [`Library`] of abstract task graphs is rendered by several
//! [`World`]s, each with its own surface vocabulary and screen layout. Every
//! concept also carries a few world-independent tokens, so what a model
//! learns in one world partly transfers to the others.

pub mod library;
pub mod world;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use library::{AbstractAction, AbstractNode, Library, LibraryConfig, ScreenContext, Template, Verb};
pub use world::{EmbedConfig, StepKind, StepMeta, World, WorldError, WorldSpec, DISMISS};

use crate::store::{split_by_task, DatasetSplit, StoreError, TaskCompletion, Trajectory, DEFAULT_SPLIT_RATIOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPlan {
    pub spec: WorldSpec,
    pub tasks: usize,
    /// Extra tasks generated after the split and placed in test only.
    pub heldout_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub library: LibraryConfig,
    pub embed: EmbedConfig,
    pub worlds: Vec<WorldPlan>,
    pub seed: u64,
}

impl SuiteConfig {
    /// Two source worlds and a smaller target world `C` with a held-out test pool.
    pub fn standard(seed: u64) -> Self {
        let plan = |id: &str, s: u64, tasks, heldout_tasks| WorldPlan { spec: WorldSpec::new(id, s), tasks, heldout_tasks };
        Self {
            library: LibraryConfig::default(),
            embed: EmbedConfig::default(),
            worlds: vec![plan("A", 101, 600, 0), plan("B", 202, 600, 0), plan("C", 303, 300, 400)],
            seed,
        }
    }

    /// Scales every world's task counts by `factor` (at least 20 tasks each).
    pub fn scaled(mut self, factor: f64) -> Self {
        for w in &mut self.worlds {
            w.tasks = ((w.tasks as f64 * factor).round() as usize).max(20);
            w.heldout_tasks = (w.heldout_tasks as f64 * factor).round() as usize;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStats {
    pub world: String,
    pub tasks: usize,
    pub steps: usize,
    pub mean_len: f64,
    /// Fraction of tasks with at least one labeled-incorrect step.
    pub incorrect_task_frac: f64,
    pub incorrect_step_frac: f64,
    pub thought_frac: f64,
    pub failed_frac: f64,
    pub unknown_frac: f64,
}

impl WorldStats {
    pub fn measure<'a>(world: &str, tasks: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let (mut n, mut steps, mut with_inc, mut inc, mut thought, mut failed, mut unknown) = (0, 0, 0, 0, 0, 0, 0);
        for t in tasks {
            n += 1;
            steps += t.len();
            let k = t.incorrect_steps().count();
            inc += k;
            with_inc += (k > 0) as usize;
            thought += t.steps.iter().filter(|s| s.thought.is_present()).count();
            failed += (t.task_completion == TaskCompletion::Failed) as usize;
            unknown += (t.task_completion == TaskCompletion::Unknown) as usize;
        }
        let per = |x: usize, d: usize| if d == 0 { 0.0 } else { x as f64 / d as f64 };
        Self {
            world: world.to_string(),
            tasks: n,
            steps,
            mean_len: per(steps, n),
            incorrect_task_frac: per(with_inc, n),
            incorrect_step_frac: per(inc, steps),
            thought_frac: per(thought, steps),
            failed_frac: per(failed, n),
            unknown_frac: per(unknown, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config: SuiteConfig,
    pub stats: Vec<WorldStats>,
    pub split_sizes: BTreeMap<String, [usize; 3]>,
}

pub struct Suite {
    pub config: SuiteConfig,
    pub worlds: Vec<World>,
    pub trajectories: Vec<Trajectory>,
    pub metas: BTreeMap<String, Vec<StepMeta>>,
    pub split: DatasetSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Suite {
    /// Generates every world, splitting each 85/10/5 by task on its own.
    pub fn generate(config: SuiteConfig) -> Result<Self, StoreError> {
        let library = Library::generate(config.library);
        let mut worlds = Vec::new();
        let mut trajectories = Vec::new();
        let mut metas = BTreeMap::new();
        let mut split = DatasetSplit { train: Default::default(), val: Default::default(), test: Default::default(), seed: config.seed };
        for (w, plan) in config.worlds.iter().enumerate() {
            let mut world = World::generate(plan.spec.clone(), library.clone(), config.embed);
            let seed = config.seed.wrapping_add(w as u64 * 0x9e37_79b9);
            let main: Vec<(Trajectory, Vec<StepMeta>)> = world.rollout(plan.tasks, 0, seed);
            let tasks: Vec<Trajectory> = main.iter().map(|(t, _)| t.clone()).collect();
            let part = split_by_task(&tasks, DEFAULT_SPLIT_RATIOS, config.seed ^ w as u64)?;
            split.train.extend(part.train);
            split.val.extend(part.val);
            split.test.extend(part.test);
            let heldout = world.rollout(plan.heldout_tasks, plan.tasks, seed ^ 0xdead_beef);
            split.test.extend(heldout.iter().map(|(t, _)| t.task_id.clone()));
            for (t, m) in main.into_iter().chain(heldout) {
                metas.insert(t.task_id.clone(), m);
                trajectories.push(t);
            }
            worlds.push(world);
        }
        Ok(Self { config, worlds, trajectories, metas, split })
    }

    pub fn world_mut(&mut self, id: &str) -> Option<&mut World> {
        self.worlds.iter_mut().find(|w| w.id() == id)
    }

    /// Trajectories in `part` recorded in any of `worlds` (all worlds when empty).
    pub fn tasks(&self, part: Part, worlds: &[&str]) -> Vec<&Trajectory> {
        let set = match part {
            Part::Train => &self.split.train,
            Part::Val => &self.split.val,
            Part::Test => &self.split.test,
        };
        self.trajectories
            .iter()
            .filter(|t| set.contains(&t.task_id))
            .filter(|t| worlds.is_empty() || worlds.contains(&t.os_tag.as_str()))
            .collect()
    }

    pub fn manifest(&self) -> SuiteManifest {
        let mut stats = Vec::new();
        let mut split_sizes = BTreeMap::new();
        for w in &self.worlds {
            let id = w.id();
            stats.push(WorldStats::measure(id, self.trajectories.iter().filter(|t| t.os_tag.as_str() == id)));
            let sizes = [Part::Train, Part::Val, Part::Test].map(|p| self.tasks(p, &[id]).len());
            split_sizes.insert(id.to_string(), sizes);
        }
        SuiteManifest { config: self.config.clone(), stats, split_sizes }
    }
}
