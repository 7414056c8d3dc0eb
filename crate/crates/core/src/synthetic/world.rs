//! One synthetic world: a surface vocabulary and screen layout over the
//! shared library, plus labeled rollouts rendered to pseudo-embeddings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::library::{AbstractAction, Library, Verb};
use crate::embedding::{word_dropout_variant, PseudoEmbedder, MAX_VARIANTS};
use crate::store::{OsTag, Step, TaskCompletion, TextField, Trajectory};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("style {style} not in world {world} (has {styles})")]
    UnknownStyle { world: String, style: usize, styles: usize },
}

/// Dimensions and seed of the stand-in frozen encoders; identical across worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub text_dim: usize,
    pub vision_dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { text_dim: 64, vision_dim: 96, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub world_id: String,
    pub seed: u64,
    /// World-specific tokens per concept.
    pub surface_tokens: usize,
    /// Tokens per concept common to every world.
    pub shared_tokens: usize,
    pub styles: usize,
    /// Random per-screen clutter tokens in screenshots.
    pub clutter_tokens: usize,
    /// Per-step probability of a wrong-branch detour.
    pub injection_prob: f64,
    pub failure_prob: f64,
    /// Fraction of all tasks labeled unknown.
    pub unknown_prob: f64,
    pub thought_prob: f64,
    /// Probability that a step's observation text names the element its
    /// executed action targets, as post-hoc annotations of recorded traces do.
    pub observation_leak: f64,
    /// Whether action text and code carry the task's instance tokens.
    pub instance_in_actions: bool,
    /// Task-specific entity tokens (file names, values) per mention.
    pub instance_tokens: usize,
    pub xy_jitter: f64,
}

impl WorldSpec {
    pub fn new(world_id: impl Into<String>, seed: u64) -> Self {
        Self {
            world_id: world_id.into(),
            seed,
            surface_tokens: 2,
            shared_tokens: 2,
            styles: 3,
            clutter_tokens: 3,
            injection_prob: 0.075,
            failure_prob: 0.071,
            unknown_prob: 0.465,
            thought_prob: 0.59,
            observation_leak: 0.0,
            instance_in_actions: true,
            instance_tokens: 2,
            xy_jitter: 0.004,
        }
    }

    /// Same world with every noise source off.
    pub fn noiseless(mut self) -> Self {
        self.injection_prob = 0.0;
        self.failure_prob = 0.0;
        self.unknown_prob = 0.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// The template's correct action at this node.
    OnPath,
    /// A distractor sibling (labeled incorrect).
    Wrong,
    /// Dismissing the screen a wrong action opened.
    Corrective,
}

/// Abstract identity of a generated step, kept outside the trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub template: usize,
    pub node: usize,
    pub kind: StepKind,
    pub action: AbstractAction,
    pub context: usize,
    pub instance: u64,
    pub xy: [f32; 2],
}

#[derive(Debug, Clone)]
struct ScreenState {
    context: usize,
    done: Vec<usize>,
    popup: Option<usize>,
    clutter: u64,
}

/// Element concept index reserved for the dismiss control.
pub const DISMISS: usize = usize::MAX;

pub struct World {
    pub spec: WorldSpec,
    pub library: Library,
    pub embed: EmbedConfig,
    /// `positions[context][slot]` for the context's element list.
    positions: Vec<Vec<[f32; 2]>>,
    dismiss_xy: [f32; 2],
    text: PseudoEmbedder,
    vision: PseudoEmbedder,
}

fn element_name(e: usize) -> String {
    if e == DISMISS {
        "dismiss".to_string()
    } else {
        format!("el{e}")
    }
}

impl World {
    pub fn generate(spec: WorldSpec, library: Library, embed: EmbedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0077_6f72_6c64);
        let positions = library
            .contexts
            .iter()
            .map(|c| {
                let mut placed: Vec<[f32; 2]> = Vec::with_capacity(c.elements.len());
                while placed.len() < c.elements.len() {
                    let p = [rng.gen_range(0.05..0.95f32), rng.gen_range(0.05..0.95f32)];
                    if placed.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > 0.08) {
                        placed.push(p);
                    }
                }
                placed
            })
            .collect();
        let dismiss_xy = [rng.gen_range(0.6..0.95f32), rng.gen_range(0.05..0.2f32)];
        Self {
            text: PseudoEmbedder::new(embed.text_dim, embed.seed),
            vision: PseudoEmbedder::new(embed.vision_dim, embed.seed ^ 0xa5a5),
            spec,
            library,
            embed,
            positions,
            dismiss_xy,
        }
    }

    pub fn id(&self) -> &str {
        &self.spec.world_id
    }

    /// Surface tokens of `concept` in this world followed by its shared tokens.
    pub fn concept(&self, concept: &str) -> Vec<String> {
        let w = &self.spec.world_id;
        let mut out: Vec<String> = (0..self.spec.surface_tokens).map(|k| format!("{w}:{concept}:{k}")).collect();
        out.extend((0..self.spec.shared_tokens).map(|k| format!("*:{concept}:{k}")));
        out
    }

    fn position(&self, context: usize, element: usize) -> [f32; 2] {
        if element == DISMISS {
            return self.dismiss_xy;
        }
        let slot = self.library.contexts[context].elements.iter().position(|&e| e == element).expect("element on screen");
        self.positions[context][slot]
    }

    fn screen_tokens(&self, state: &ScreenState, with_clutter: bool) -> Vec<String> {
        let mut t = self.concept(&format!("ctx{}", state.context));
        for &e in &self.library.contexts[state.context].elements {
            t.extend(self.concept(&element_name(e)));
        }
        for &d in &state.done {
            t.extend(self.concept(&format!("done{d}")));
        }
        if let Some(p) = state.popup {
            t.extend(self.concept("popup"));
            t.extend(self.concept(&format!("popup{p}")));
        }
        if with_clutter {
            let w = &self.spec.world_id;
            let mut r = ChaCha8Rng::seed_from_u64(state.clutter);
            t.extend((0..self.spec.clutter_tokens).map(|_| format!("{w}:clutter{}", r.gen_range(0..500))));
        }
        t
    }

    fn instance_tokens(&self, instance: u64) -> Vec<String> {
        (0..self.spec.instance_tokens).map(|k| format!("inst:{instance}:{k}")).collect()
    }

    fn action_tokens(&self, meta: &StepMeta, style: usize) -> Vec<String> {
        let w = &self.spec.world_id;
        let verb = meta.action.verb.name();
        let mut t = self.concept(&format!("verb:{verb}"));
        t.push(format!("{w}:verb:{verb}:s{style}"));
        t.extend(self.concept(&element_name(meta.action.element)));
        t.push(format!("{w}:fill:s{style}"));
        if self.spec.instance_in_actions && meta.kind != StepKind::Corrective {
            t.extend(self.instance_tokens(meta.instance));
        }
        t
    }

    fn code_tokens(&self, meta: &StepMeta, style: usize) -> Vec<String> {
        let bucket = |v: f32| ((v * 20.0).floor() as i32).clamp(0, 19);
        let mut t = vec![format!("code:{}", meta.action.verb.api()), format!("code:style{style}")];
        if meta.action.verb.is_click() {
            t.push(format!("code:x{}", bucket(meta.xy[0])));
            t.push(format!("code:y{}", bucket(meta.xy[1])));
        } else if meta.action.verb == Verb::Type && self.spec.instance_in_actions {
            t.extend(self.instance_tokens(meta.instance));
        }
        // the leading comment names the target
        t.extend(self.concept(&element_name(meta.action.element)));
        t
    }

    fn thought_tokens(&self, meta: &StepMeta) -> Vec<String> {
        let mut t = self.concept("intent");
        t.extend(self.concept(&format!("goal{}", meta.template)));
        t.extend(self.concept(&format!("verb:{}", meta.action.verb.name())));
        t.extend(self.concept(&element_name(meta.action.element)));
        t
    }

    /// Action-text and code embeddings re-rendered in `style`.
    pub fn paraphrase_view(&mut self, meta: &StepMeta, style: usize) -> Result<(Vec<f32>, Vec<f32>), WorldError> {
        if style >= self.spec.styles {
            return Err(WorldError::UnknownStyle { world: self.spec.world_id.clone(), style, styles: self.spec.styles });
        }
        let a = self.action_tokens(meta, style);
        let c = self.code_tokens(meta, style);
        Ok((self.text.embed(&a), self.text.embed(&c)))
    }

    fn text_field(&mut self, tokens: Vec<String>) -> TextField {
        let emb = self.text.embed(&tokens);
        TextField::new(Some(tokens.join(" ")), Some(emb))
    }

    fn variant_field<R: Rng>(&mut self, tokens: Vec<String>, rng: &mut R) -> TextField {
        let mut field = self.text_field(tokens.clone());
        field.variants = (0..MAX_VARIANTS)
            .map(|_| {
                let rate = rng.gen_range(0.30..=0.50);
                let kept = word_dropout_variant(&tokens, rate, rng);
                self.text.embed(&kept)
            })
            .collect();
        field
    }

    /// Generates `n_tasks` labeled trajectories with their step metadata.
    /// Task ids are `{world}-{offset + i}`.
    pub fn rollout(&mut self, n_tasks: usize, offset: usize, seed: u64) -> Vec<(Trajectory, Vec<StepMeta>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.spec.seed.rotate_left(17));
        (0..n_tasks).map(|i| self.rollout_task(offset + i, &mut rng)).collect()
    }

    fn rollout_task(&mut self, index: usize, rng: &mut ChaCha8Rng) -> (Trajectory, Vec<StepMeta>) {
        let spec = self.spec.clone();
        let template = rng.gen_range(0..self.library.templates.len());
        let nodes = self.library.templates[template].nodes.clone();
        let instance: u64 = rng.gen();
        let failed = rng.gen_bool(spec.failure_prob);
        let completion = if failed {
            TaskCompletion::Failed
        } else if spec.failure_prob < 1.0 && rng.gen_bool((spec.unknown_prob / (1.0 - spec.failure_prob)).min(1.0)) {
            TaskCompletion::Unknown
        } else {
            TaskCompletion::Completed
        };
        let fail_at = rng.gen_range(0..nodes.len());

        // (state before, meta) for every executed action
        let mut plan: Vec<(ScreenState, StepMeta)> = Vec::new();
        let mut state = ScreenState { context: nodes[0].context, done: Vec::new(), popup: None, clutter: rng.gen() };
        let mut truncated = false;
        for (n, node) in nodes.iter().enumerate() {
            if node.context != state.context {
                state = ScreenState { context: node.context, done: Vec::new(), popup: None, clutter: rng.gen() };
            }
            let inject = (failed && n == fail_at) || rng.gen_bool(spec.injection_prob);
            let jitter = |rng: &mut ChaCha8Rng, p: [f32; 2]| {
                let j = spec.xy_jitter as f32;
                [(p[0] + rng.gen_range(-j..=j)).clamp(0.0, 1.0), (p[1] + rng.gen_range(-j..=j)).clamp(0.0, 1.0)]
            };
            if inject {
                let wrong = *node.distractors.choose(rng).expect("node has distractors");
                let xy = jitter(rng, self.position(node.context, wrong.element));
                plan.push((state.clone(), StepMeta { template, node: n, kind: StepKind::Wrong, action: wrong, context: node.context, instance, xy }));
                if failed && n == fail_at {
                    truncated = true;
                    state.popup = Some(wrong.element);
                    break;
                }
                let mut popup = state.clone();
                popup.popup = Some(wrong.element);
                let dismiss = AbstractAction { verb: Verb::Hotkey, element: DISMISS };
                let xy = jitter(rng, self.dismiss_xy);
                plan.push((popup, StepMeta { template, node: n, kind: StepKind::Corrective, action: dismiss, context: node.context, instance, xy }));
            }
            let xy = jitter(rng, self.position(node.context, node.action.element));
            plan.push((state.clone(), StepMeta { template, node: n, kind: StepKind::OnPath, action: node.action, context: node.context, instance, xy }));
            state.done.push(node.action.element);
        }
        debug_assert!(!failed || truncated);
        let terminal = state;

        let instruction = {
            let mut t = self.concept(&format!("goal{template}"));
            let last = nodes.last().expect("nonempty template");
            t.extend(self.concept(&element_name(last.action.element)));
            t.extend(self.instance_tokens(instance));
            t
        };
        let screenshots: Vec<Vec<f32>> = plan
            .iter()
            .map(|(s, _)| s)
            .chain(std::iter::once(&terminal))
            .map(|s| {
                let tokens = self.screen_tokens(s, true);
                self.vision.embed(&tokens)
            })
            .collect();

        let mut steps = Vec::with_capacity(plan.len());
        let mut metas = Vec::with_capacity(plan.len());
        for (i, (before, meta)) in plan.iter().enumerate() {
            let mut observation = self.screen_tokens(before, false);
            if rng.gen_bool(spec.observation_leak) {
                observation.extend(self.concept(&format!("verb:{}", meta.action.verb.name())));
                observation.extend(self.concept(&element_name(meta.action.element)));
            }
            let observation = self.text_field(observation);
            let action = self.action_tokens(meta, 0);
            let action = self.variant_field(action, rng);
            let code = self.code_tokens(meta, 0);
            let code = self.variant_field(code, rng);
            let thought =
                if rng.gen_bool(spec.thought_prob) { self.text_field(self.thought_tokens(meta)) } else { TextField::absent() };
            let reflection = match i.checked_sub(1).map(|p| &plan[p].1) {
                None => TextField::absent(),
                Some(prev) => {
                    let mut t = self.concept("reflect");
                    t.extend(self.concept(&element_name(prev.action.element)));
                    t.extend(self.concept(if prev.kind == StepKind::Wrong { "mistake" } else { "ok" }));
                    self.text_field(t)
                }
            };
            let instruction = self.text_field(instruction.clone());
            steps.push(Step {
                step_index: i as u32 + 1,
                screenshot_before: screenshots[i].clone(),
                screenshot_after: Some(screenshots[i + 1].clone()),
                observation,
                action,
                code,
                thought,
                reflection,
                instruction,
                xy: meta.xy,
                correct: meta.kind != StepKind::Wrong,
            });
            metas.push(*meta);
        }
        let trajectory = Trajectory {
            task_id: format!("{}-{index:05}", self.spec.world_id),
            os_tag: OsTag::new(self.spec.world_id.clone()),
            task_completion: completion,
            steps,
        };
        (trajectory, metas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine;
    use crate::store::verify_chain;
    use crate::synthetic::library::LibraryConfig;

    fn world(id: &str, seed: u64) -> World {
        World::generate(WorldSpec::new(id, seed), Library::generate(LibraryConfig::default()), EmbedConfig::default())
    }

    #[test]
    fn rollouts_are_deterministic_and_chained() {
        let a = world("A", 1).rollout(20, 0, 5);
        let b = world("A", 1).rollout(20, 0, 5);
        for ((ta, ma), (tb, mb)) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
            assert_eq!(ma, mb);
            assert!(verify_chain(ta).is_empty());
            for s in &ta.steps {
                for v in [&s.screenshot_before, s.action.embedding.as_ref().unwrap(), s.code.embedding.as_ref().unwrap()] {
                    assert!((crate::store::l2_norm(v) - 1.0).abs() < 1e-4);
                }
                assert_eq!(s.action.variants.len(), 3);
            }
        }
    }

    #[test]
    fn noiseless_world_is_all_correct() {
        let mut w = World::generate(
            WorldSpec::new("A", 1).noiseless(),
            Library::generate(LibraryConfig::default()),
            EmbedConfig::default(),
        );
        for (t, _) in w.rollout(50, 0, 3) {
            assert_eq!(t.task_completion, TaskCompletion::Completed);
            assert!(t.steps.iter().all(|s| s.correct));
        }
    }

    #[test]
    fn wrong_steps_are_followed_by_corrections() {
        let mut w = world("B", 2);
        for (t, metas) in w.rollout(200, 0, 9) {
            for (i, m) in metas.iter().enumerate() {
                if m.kind == StepKind::Wrong {
                    assert!(!t.steps[i].correct);
                    match metas.get(i + 1) {
                        Some(next) => assert_eq!(next.kind, StepKind::Corrective),
                        None => assert_eq!(t.task_completion, TaskCompletion::Failed),
                    }
                }
            }
        }
    }

    #[test]
    fn paraphrase_views() {
        let mut w = world("A", 1);
        let (t, metas) = w.rollout(1, 0, 0).remove(0);
        let meta = metas[0];
        let (a0, _) = w.paraphrase_view(&meta, 0).unwrap();
        assert_eq!(Some(&a0), t.steps[0].action.embedding.as_ref());
        let (a1, _) = w.paraphrase_view(&meta, 1).unwrap();
        let c = cosine(&a0, &a1);
        assert!(c < 1.0 - 1e-6 && c > 0.5, "cosine {c}");
        assert!(matches!(w.paraphrase_view(&meta, 7), Err(WorldError::UnknownStyle { .. })));
    }
}
