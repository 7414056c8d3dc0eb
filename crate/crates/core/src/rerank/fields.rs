//! Maps an agent's raw candidate record onto the scorer's text fields.
//!
//! Plans are expected to carry parenthesized or markdown section headings such
//! as `(Screenshot Analysis)` and `(Next Action)`.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const OBSERVATION_SECTION: &str = "screenshot analysis";
pub const THOUGHT_SECTION: &str = "next action";
/// Position used when the code has no absolute coordinates.
pub const NO_COORDINATES_XY: [f32; 2] = [0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub plan: String,
    pub code: String,
    #[serde(default)]
    pub reflection: Option<String>,
    pub resolution: [u32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldWarning {
    /// No screenshot-analysis section: the whole plan became the observation.
    UnparseablePlan,
    /// No coordinate call in the code: xy is the screen center.
    NoCoordinates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedFields {
    pub observation: String,
    pub thought: String,
    pub action: String,
    pub code: String,
    pub xy: [f32; 2],
    pub reflection: String,
    pub warnings: Vec<FieldWarning>,
}

fn heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?m)^[ \t]*(?:#{1,6}[ \t]*)?(?:\(([^()\n]+)\)|\*\*([^*\n]+)\*\*|([A-Z][A-Za-z ]+):)[ \t]*:?[ \t]*$")
            .expect("valid pattern")
    })
}

fn md_heading_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*#{1,6}[ \t]+([^\n]+?)[ \t]*:?[ \t]*$").expect("valid pattern"))
}

/// `(heading, body)` for each section, headings lowercased.
pub fn sections(plan: &str) -> Vec<(String, String)> {
    let mut marks: Vec<(usize, usize, String)> = Vec::new();
    for c in heading_re().captures_iter(plan) {
        let m = c.get(0).expect("whole match");
        let name = c.get(1).or(c.get(2)).or(c.get(3)).expect("one alternative").as_str();
        marks.push((m.start(), m.end(), name.trim().to_lowercase()));
    }
    for c in md_heading_re().captures_iter(plan) {
        let m = c.get(0).expect("whole match");
        if !marks.iter().any(|&(s, _, _)| s == m.start()) {
            let name = c[1].trim_matches(|ch: char| ch == '(' || ch == ')' || ch == '*').trim();
            marks.push((m.start(), m.end(), name.to_lowercase()));
        }
    }
    marks.sort_by_key(|m| m.0);
    marks
        .iter()
        .enumerate()
        .map(|(i, (_, end, name))| {
            let stop = marks.get(i + 1).map_or(plan.len(), |m| m.0);
            (name.clone(), plan[*end..stop].trim().to_string())
        })
        .collect()
}

fn section(all: &[(String, String)], name: &str) -> Option<String> {
    all.iter().find(|(n, _)| n == name).map(|(_, b)| b.clone())
}

/// Drops the leading run of import lines (and blank lines among them).
pub fn strip_import_preamble(code: &str) -> String {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*(import\s+\S|from\s+\S+\s+import\s)").expect("valid pattern"));
    let lines: Vec<&str> = code.lines().collect();
    let skip = lines.iter().take_while(|l| l.trim().is_empty() || re.is_match(l)).count();
    lines[skip..].join("\n")
}

/// The code's leading `#` comment block, markers removed.
pub fn leading_comment(code: &str) -> String {
    code.lines()
        .skip_while(|l| l.trim().is_empty())
        .take_while(|l| l.trim_start().starts_with('#'))
        .map(|l| l.trim_start().trim_start_matches('#').trim())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pixel coordinates of the first call taking two leading numeric arguments.
pub fn first_coordinates(code: &str) -> Option<(f64, f64)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"\w\s*\(\s*(?:x\s*=\s*)?(-?\d+(?:\.\d+)?)\s*,\s*(?:y\s*=\s*)?(-?\d+(?:\.\d+)?)").expect("valid pattern")
    });
    let c = re.captures(code)?;
    Some((c[1].parse().ok()?, c[2].parse().ok()?))
}

pub fn map_fields(record: &AgentRecord) -> MappedFields {
    let mut warnings = Vec::new();
    let all = sections(&record.plan);
    let (observation, thought) = match section(&all, OBSERVATION_SECTION) {
        Some(obs) => (obs, section(&all, THOUGHT_SECTION).unwrap_or_default()),
        None => {
            warnings.push(FieldWarning::UnparseablePlan);
            (record.plan.trim().to_string(), String::new())
        }
    };
    let code = strip_import_preamble(&record.code);
    let [w, h] = record.resolution;
    let xy = match first_coordinates(&code) {
        Some((x, y)) if w > 0 && h > 0 => [(x / w as f64) as f32, (y / h as f64) as f32],
        _ => {
            warnings.push(FieldWarning::NoCoordinates);
            NO_COORDINATES_XY
        }
    };
    MappedFields {
        observation,
        thought,
        action: leading_comment(&code),
        code,
        xy,
        reflection: record.reflection.clone().unwrap_or_default(),
        warnings,
    }
}
