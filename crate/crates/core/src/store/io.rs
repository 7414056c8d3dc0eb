use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sidecar::{emb_ref, Sidecar};
use super::{l2_norm, verify_chain, OsTag, Step, StoreError, TaskCompletion, TextField, Trajectory, NORM_TOLERANCE};

pub const DATA_FILE: &str = "trajectories.jsonl";
pub const SIDECAR_FILE: &str = "embeddings.iseb";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    task_id: String,
    os_tag: OsTag,
    task_completion: TaskCompletion,
    steps: Vec<StepRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    step_index: u32,
    xy: [f32; 2],
    correct: bool,
    text: TextRecord,
    emb_refs: EmbRefs,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextRecord {
    observation: Option<String>,
    action: Option<String>,
    code: Option<String>,
    thought: Option<String>,
    reflection: Option<String>,
    instruction: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbRefs {
    screenshot_before: Option<String>,
    screenshot_after: Option<String>,
    observation: Option<String>,
    action: Option<String>,
    code: Option<String>,
    thought: Option<String>,
    reflection: Option<String>,
    instruction: Option<String>,
    #[serde(default)]
    action_variants: Vec<String>,
    #[serde(default)]
    code_variants: Vec<String>,
}

/// Adjacent steps whose screenshots fail the chain property.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainMismatch {
    pub task_id: String,
    pub step_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub trajectories: Vec<Trajectory>,
    pub warnings: Vec<ChainMismatch>,
}

/// Resolves `path` to `(metadata, sidecar)`: a directory holds the standard
/// file names, a `.jsonl` file pairs with the same stem plus `.iseb`.
fn dataset_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(DATA_FILE), path.join(SIDECAR_FILE))
    } else {
        (path.to_path_buf(), path.with_extension("iseb"))
    }
}

struct Resolver<'a> {
    sidecar: &'a Sidecar,
    task_id: &'a str,
    step_index: u32,
    text_dim: Option<usize>,
    vision_dim: Option<usize>,
}

enum Kind {
    Text,
    Vision,
}

impl Resolver<'_> {
    fn fetch(&mut self, field: &str, reference: &str, kind: Kind) -> Result<Vec<f32>, StoreError> {
        let v = self.sidecar.get(reference).ok_or_else(|| StoreError::MissingEmbedding {
            task_id: self.task_id.to_string(),
            step_index: self.step_index,
            field: field.to_string(),
        })?;
        let norm = l2_norm(v);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(StoreError::NormViolation { emb_ref: reference.to_string(), norm });
        }
        let slot = match kind {
            Kind::Text => &mut self.text_dim,
            Kind::Vision => &mut self.vision_dim,
        };
        match *slot {
            Some(d) if d != v.len() => {
                return Err(StoreError::DimensionMismatch { emb_ref: reference.to_string(), expected: d, found: v.len() })
            }
            None => *slot = Some(v.len()),
            _ => {}
        }
        Ok(v.to_vec())
    }

    fn required(&mut self, field: &str, reference: &Option<String>, kind: Kind) -> Result<Vec<f32>, StoreError> {
        match reference {
            Some(r) => self.fetch(field, r, kind),
            None => Err(StoreError::MissingEmbedding {
                task_id: self.task_id.to_string(),
                step_index: self.step_index,
                field: field.to_string(),
            }),
        }
    }

    fn optional(&mut self, field: &str, reference: &Option<String>, kind: Kind) -> Result<Option<Vec<f32>>, StoreError> {
        reference.as_ref().map(|r| self.fetch(field, r, kind)).transpose()
    }

    fn text(&mut self, field: &str, text: Option<String>, reference: &Option<String>, required: bool) -> Result<TextField, StoreError> {
        let embedding = if required {
            Some(self.required(field, reference, Kind::Text)?)
        } else {
            self.optional(field, reference, Kind::Text)?
        };
        Ok(TextField { text, embedding, variants: Vec::new() })
    }

    fn variants(&mut self, field: &str, refs: &[String]) -> Result<Vec<Vec<f32>>, StoreError> {
        if refs.len() > 3 {
            return Err(StoreError::schema(
                format!("task {} step {}", self.task_id, self.step_index),
                format!("{field} has {} variants (at most 3)", refs.len()),
            ));
        }
        refs.iter().map(|r| self.fetch(field, r, Kind::Text)).collect()
    }
}

/// Loads a dataset, validating every step. Any violation rejects the file;
/// broken screenshot chains are reported as warnings.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, StoreError> {
    let (meta_path, sidecar_path) = dataset_paths(path);
    let sidecar = Sidecar::read(&sidecar_path)?;
    let file = std::fs::File::open(&meta_path).map_err(|e| StoreError::io(meta_path.display(), e))?;
    let mut trajectories = Vec::new();
    let mut warnings = Vec::new();
    let mut text_dim = None;
    let mut vision_dim = None;
    let mut seen = std::collections::HashSet::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StoreError::io(meta_path.display(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", meta_path.display(), line_no + 1);
        let record: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| StoreError::schema(location.clone(), e.to_string()))?;
        if !seen.insert(record.task_id.clone()) {
            return Err(StoreError::schema(location, format!("duplicate task_id {}", record.task_id)));
        }
        if record.steps.is_empty() {
            return Err(StoreError::schema(location, format!("task {} has no steps", record.task_id)));
        }
        let mut steps = Vec::with_capacity(record.steps.len());
        for (i, s) in record.steps.into_iter().enumerate() {
            let expected = i as u32 + 1;
            if s.step_index != expected {
                return Err(StoreError::NonContiguousSteps { task_id: record.task_id.clone(), expected, found: s.step_index });
            }
            if !s.xy.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(StoreError::schema(
                    format!("{location} task {} step {}", record.task_id, s.step_index),
                    format!("xy {:?} outside [0, 1]", s.xy),
                ));
            }
            let mut r = Resolver { sidecar: &sidecar, task_id: &record.task_id, step_index: s.step_index, text_dim, vision_dim };
            let refs = &s.emb_refs;
            let text = s.text;
            let screenshot_before = r.required("screenshot_before", &refs.screenshot_before, Kind::Vision)?;
            let screenshot_after = r.optional("screenshot_after", &refs.screenshot_after, Kind::Vision)?;
            let observation = r.text("observation", text.observation, &refs.observation, true)?;
            let mut action = r.text("action", text.action, &refs.action, true)?;
            action.variants = r.variants("action", &refs.action_variants)?;
            let mut code = r.text("code", text.code, &refs.code, true)?;
            code.variants = r.variants("code", &refs.code_variants)?;
            let thought = r.text("thought", text.thought, &refs.thought, false)?;
            let reflection = r.text("reflection", text.reflection, &refs.reflection, false)?;
            let instruction = r.text("instruction", text.instruction, &refs.instruction, true)?;
            text_dim = r.text_dim;
            vision_dim = r.vision_dim;
            steps.push(Step {
                step_index: s.step_index,
                screenshot_before,
                screenshot_after,
                observation,
                action,
                code,
                thought,
                reflection,
                instruction,
                xy: s.xy,
                correct: s.correct,
            });
        }
        let trajectory =
            Trajectory { task_id: record.task_id, os_tag: record.os_tag, task_completion: record.task_completion, steps };
        let broken = verify_chain(&trajectory);
        if !broken.is_empty() {
            log::warn!("task {}: screenshot chain mismatch at {:?}", trajectory.task_id, broken);
            warnings.push(ChainMismatch { task_id: trajectory.task_id.clone(), step_indices: broken });
        }
        trajectories.push(trajectory);
    }
    Ok(LoadedDataset { trajectories, warnings })
}

fn put(sidecar: &mut Sidecar, key: String, v: &[f32]) -> Result<String, StoreError> {
    sidecar.insert(key.clone(), v)?;
    Ok(key)
}

/// Writes the canonical metadata file and sidecar for `trajectories`.
pub fn save_dataset(path: &Path, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    let (meta_path, sidecar_path) = if path.extension().is_some_and(|e| e == "jsonl") {
        dataset_paths(path)
    } else {
        std::fs::create_dir_all(path).map_err(|e| StoreError::io(path.display(), e))?;
        (path.join(DATA_FILE), path.join(SIDECAR_FILE))
    };
    let mut sidecar = Sidecar::new();
    let mut out = Vec::new();
    for t in trajectories {
        let mut steps = Vec::with_capacity(t.steps.len());
        for s in &t.steps {
            let id = t.task_id.as_str();
            let i = s.step_index;
            let mut field = |name: &str, f: &TextField| -> Result<Option<String>, StoreError> {
                f.emb().map(|v| put(&mut sidecar, emb_ref(id, i, name, None), v)).transpose()
            };
            let observation = field("observation", &s.observation)?;
            let action = field("action", &s.action)?;
            let code = field("code", &s.code)?;
            let thought = field("thought", &s.thought)?;
            let reflection = field("reflection", &s.reflection)?;
            let instruction = field("instruction", &s.instruction)?;
            let screenshot_before = Some(put(&mut sidecar, emb_ref(id, i, "screenshot_before", None), &s.screenshot_before)?);
            let screenshot_after = s
                .screenshot_after
                .as_ref()
                .map(|v| put(&mut sidecar, emb_ref(id, i, "screenshot_after", None), v))
                .transpose()?;
            let mut variants = |name: &str, f: &TextField| -> Result<Vec<String>, StoreError> {
                f.variants.iter().enumerate().map(|(k, v)| put(&mut sidecar, emb_ref(id, i, name, Some(k)), v)).collect()
            };
            let action_variants = variants("action", &s.action)?;
            let code_variants = variants("code", &s.code)?;
            steps.push(StepRecord {
                step_index: i,
                xy: s.xy,
                correct: s.correct,
                text: TextRecord {
                    observation: s.observation.text.clone(),
                    action: s.action.text.clone(),
                    code: s.code.text.clone(),
                    thought: s.thought.text.clone(),
                    reflection: s.reflection.text.clone(),
                    instruction: s.instruction.text.clone(),
                },
                emb_refs: EmbRefs {
                    screenshot_before,
                    screenshot_after,
                    observation,
                    action,
                    code,
                    thought,
                    reflection,
                    instruction,
                    action_variants,
                    code_variants,
                },
            });
        }
        let record = TrajectoryRecord {
            task_id: t.task_id.clone(),
            os_tag: t.os_tag.clone(),
            task_completion: t.task_completion,
            steps,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| StoreError::schema(&t.task_id, e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&meta_path).map_err(|e| StoreError::io(meta_path.display(), e))?;
    f.write_all(&out).map_err(|e| StoreError::io(meta_path.display(), e))?;
    sidecar.write(&sidecar_path)
}
