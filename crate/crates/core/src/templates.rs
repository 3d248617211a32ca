//! Prompt templates. Defaults are embedded from `assets/`; any of them can be
//! overridden by a same-named `.txt` file in a directory.
//!
//! Placeholders are written `{name}`; unknown placeholders are left as-is.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const TEMPLATE_VERSION: &str = "chemau-prompts/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: String,
    pub initial_system: String,
    pub question: String,
    pub regenerate_system: String,
    pub reflect_system: String,
    pub regenerate_user: String,
    pub decompose: String,
    pub verify: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let t = |s: &str| s.trim_end().to_string();
        Self {
            version: TEMPLATE_VERSION.to_string(),
            initial_system: t(include_str!("../assets/initial_system.txt")),
            question: t(include_str!("../assets/question.txt")),
            regenerate_system: t(include_str!("../assets/regenerate_system.txt")),
            reflect_system: t(include_str!("../assets/reflect_system.txt")),
            regenerate_user: t(include_str!("../assets/regenerate_user.txt")),
            decompose: t(include_str!("../assets/decompose.txt")),
            verify: t(include_str!("../assets/verify.txt")),
        }
    }
}

impl PromptTemplates {
    /// Defaults with every `<name>.txt` found in `dir` substituted in.
    pub fn from_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        let mut templates = Self::default();
        let mut overridden = false;
        for (name, slot) in [
            ("initial_system", &mut templates.initial_system),
            ("question", &mut templates.question),
            ("regenerate_system", &mut templates.regenerate_system),
            ("reflect_system", &mut templates.reflect_system),
            ("regenerate_user", &mut templates.regenerate_user),
            ("decompose", &mut templates.decompose),
            ("verify", &mut templates.verify),
        ] {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    *slot = text.trim_end().to_string();
                    overridden = true;
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        if overridden {
            templates.version = format!("{TEMPLATE_VERSION}+{}", dir.display());
        }
        Ok(templates)
    }
}

/// Substitutes `{name}` placeholders in one pass; inserted values are not
/// rescanned.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let vars: HashMap<&str, &str> = vars.iter().copied().collect();
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if vars.contains_key(&after[..close]) => {
                out.push_str(vars[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        assert_eq!(fill("a {x} b {y}", &[("x", "{y}"), ("y", "2")]), "a {y} b 2");
        assert_eq!(fill("{unknown} {", &[]), "{unknown} {");
    }

    #[test]
    fn defaults_have_placeholders() {
        let t = PromptTemplates::default();
        assert!(t.question.contains("{question}") && t.question.contains("{options}"));
        assert!(t.verify.contains("{claim}"));
        assert!(t.decompose.contains("{step}"));
        assert!(t.regenerate_user.contains("{guidance}"));
        assert!(t.initial_system.contains("\"-- \""));
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("verify.txt"), "Check: {claim}\n").unwrap();
        let t = PromptTemplates::from_dir(dir.path()).unwrap();
        assert_eq!(t.verify, "Check: {claim}");
        assert_eq!(t.decompose, PromptTemplates::default().decompose);
        assert_ne!(t.version, TEMPLATE_VERSION);
    }
}
