//! Abstract task structure shared by every synthetic world.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Click,
    DoubleClick,
    RightClick,
    Type,
    Hotkey,
}

impl Verb {
    pub const ALL: [Verb; 5] = [Verb::Click, Verb::DoubleClick, Verb::RightClick, Verb::Type, Verb::Hotkey];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Click => "click",
            Verb::DoubleClick => "double_click",
            Verb::RightClick => "right_click",
            Verb::Type => "type",
            Verb::Hotkey => "hotkey",
        }
    }

    /// The scripting call used for this verb in generated code.
    pub fn api(self) -> &'static str {
        match self {
            Verb::Click => "pyautogui.click",
            Verb::DoubleClick => "pyautogui.doubleClick",
            Verb::RightClick => "pyautogui.rightClick",
            Verb::Type => "pyautogui.write",
            Verb::Hotkey => "pyautogui.hotkey",
        }
    }

    pub fn is_click(self) -> bool {
        matches!(self, Verb::Click | Verb::DoubleClick | Verb::RightClick)
    }
}

/// `(verb, element)` with the element indexing the library's element concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbstractAction {
    pub verb: Verb,
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenContext {
    pub elements: Vec<usize>,
}

/// One node on a template's correct path with its distractor siblings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractNode {
    pub context: usize,
    pub action: AbstractAction,
    pub distractors: Vec<AbstractAction>,
}

/// A task template: the single correct path through the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub family: usize,
    pub nodes: Vec<AbstractNode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LibraryConfig {
    pub seed: u64,
    pub n_elements: usize,
    pub n_contexts: usize,
    pub elements_per_context: usize,
    pub n_templates: usize,
    /// Templates per family; members share a path prefix.
    pub family_size: usize,
    pub length_range: (usize, usize),
    pub distractors_per_node: usize,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            n_elements: 48,
            n_contexts: 16,
            elements_per_context: 6,
            n_templates: 160,
            family_size: 3,
            length_range: (4, 10),
            distractors_per_node: 2,
        }
    }
}

/// The abstract task-graph library: screens, their elements, and templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub config: LibraryConfig,
    pub contexts: Vec<ScreenContext>,
    pub templates: Vec<Template>,
}

fn pick_verb<R: Rng + ?Sized>(rng: &mut R) -> Verb {
    // clicks dominate real GUI traces
    match rng.gen_range(0..10) {
        0..=4 => Verb::Click,
        5 => Verb::DoubleClick,
        6 => Verb::RightClick,
        7 | 8 => Verb::Type,
        _ => Verb::Hotkey,
    }
}

impl Library {
    pub fn generate(config: LibraryConfig) -> Self {
        assert!(config.elements_per_context >= 3, "contexts need room for a target and distractors");
        assert!(config.length_range.0 >= 2 && config.length_range.0 <= config.length_range.1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let all: Vec<usize> = (0..config.n_elements).collect();
        let contexts: Vec<ScreenContext> = (0..config.n_contexts)
            .map(|_| ScreenContext { elements: all.choose_multiple(&mut rng, config.elements_per_context).copied().collect() })
            .collect();

        let mut templates = Vec::with_capacity(config.n_templates);
        let mut family_prefix: Vec<AbstractNode> = Vec::new();
        for t in 0..config.n_templates {
            let family = t / config.family_size.max(1);
            let len = rng.gen_range(config.length_range.0..=config.length_range.1);
            let first_in_family = t % config.family_size.max(1) == 0;
            let shared = if first_in_family { 0 } else { rng.gen_range(1..=3).min(family_prefix.len()).min(len - 1) };
            let mut nodes: Vec<AbstractNode> = family_prefix[..shared].to_vec();
            let mut used_contexts: Vec<usize> = nodes.iter().map(|n| n.context).collect();
            used_contexts.dedup();
            let mut context = nodes.last().map(|n| n.context);
            let mut in_context = nodes.iter().rev().take_while(|n| Some(n.context) == context).count();
            let mut done_here: Vec<usize> =
                nodes.iter().rev().take_while(|n| Some(n.context) == context).map(|n| n.action.element).collect();
            // a diverging member must leave the shared prefix on a different action
            let diverge_from = if shared > 0 { family_prefix.get(shared).map(|n| n.action) } else { None };
            while nodes.len() < len {
                let move_on = match context {
                    None => true,
                    Some(c) => {
                        let left = contexts[c].elements.len() - done_here.len();
                        in_context >= 3 || left <= 2 || (in_context >= 1 && rng.gen_bool(0.45))
                    }
                };
                if move_on {
                    let fresh: Vec<usize> = (0..config.n_contexts).filter(|c| !used_contexts.contains(c)).collect();
                    let c = match fresh.choose(&mut rng) {
                        Some(&c) => c,
                        None => rng.gen_range(0..config.n_contexts),
                    };
                    used_contexts.push(c);
                    context = Some(c);
                    in_context = 0;
                    done_here.clear();
                }
                let c = context.expect("context chosen");
                let prev = nodes.last().map(|n| n.action);
                let options: Vec<usize> = contexts[c]
                    .elements
                    .iter()
                    .copied()
                    .filter(|e| !done_here.contains(e))
                    .filter(|e| prev.map_or(true, |p| p.element != *e))
                    .collect();
                let element = *options.choose(&mut rng).expect("context has free elements");
                let mut action = AbstractAction { verb: pick_verb(&mut rng), element };
                if nodes.len() == shared {
                    if let Some(d) = diverge_from {
                        if d == action {
                            action.verb = if d.verb == Verb::Click { Verb::DoubleClick } else { Verb::Click };
                        }
                    }
                }
                let siblings: Vec<usize> = contexts[c].elements.iter().copied().filter(|&e| e != element).collect();
                let picked: Vec<usize> = siblings.choose_multiple(&mut rng, config.distractors_per_node).copied().collect();
                let distractors = picked
                    .into_iter()
                    .map(|e| {
                        let verb = if rng.gen_bool(0.7) { action.verb } else { pick_verb(&mut rng) };
                        AbstractAction { verb, element: e }
                    })
                    .collect();
                nodes.push(AbstractNode { context: c, action, distractors });
                in_context += 1;
                done_here.push(element);
            }
            if first_in_family {
                family_prefix = nodes.clone();
            }
            templates.push(Template { family, nodes });
        }
        Self { config, contexts, templates }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_is_deterministic() {
        assert_eq!(Library::generate(LibraryConfig::default()), Library::generate(LibraryConfig::default()));
    }

    #[test]
    fn nodes_have_distractor_siblings_on_the_same_screen() {
        let lib = Library::generate(LibraryConfig::default());
        for t in &lib.templates {
            let (lo, hi) = lib.config.length_range;
            assert!((lo..=hi).contains(&t.nodes.len()));
            for n in &t.nodes {
                assert!(!n.distractors.is_empty());
                let screen = &lib.contexts[n.context].elements;
                assert!(screen.contains(&n.action.element));
                for d in &n.distractors {
                    assert!(screen.contains(&d.element));
                    assert_ne!(d.element, n.action.element);
                }
            }
            for w in t.nodes.windows(2) {
                assert_ne!(w[0].action, w[1].action);
            }
        }
    }

    #[test]
    fn family_members_share_a_prefix() {
        let lib = Library::generate(LibraryConfig::default());
        let a = &lib.templates[0];
        let b = &lib.templates[1];
        assert_eq!(a.family, b.family);
        assert_eq!(a.nodes[0], b.nodes[0]);
        let first_diff = a.nodes.iter().zip(&b.nodes).position(|(x, y)| x != y);
        assert!(first_diff.is_some());
    }
}
