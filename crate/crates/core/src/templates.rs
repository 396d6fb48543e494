//! Prompt template registry. Templates are UTF-8 text with `{{name}}`
//! placeholders; a TOML manifest maps each template name to its file and
//! the placeholders it must contain.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {name}: required placeholder {{{{{placeholder}}}}} not in body")]
    MissingInBody { name: String, placeholder: String },
    #[error("template {name}: no binding for {{{{{placeholder}}}}}")]
    Unbound { name: String, placeholder: String },
    #[error("template {name}: unterminated placeholder")]
    Unterminated { name: String },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    body: String,
    required: BTreeSet<String>,
}

impl PromptTemplate {
    pub fn new(
        name: &str,
        body: &str,
        required: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, TemplateError> {
        let t = PromptTemplate {
            name: name.to_string(),
            body: body.to_string(),
            required: required.into_iter().map(Into::into).collect(),
        };
        let present = t.placeholders()?;
        if let Some(missing) = t.required.iter().find(|r| !present.contains(*r)) {
            return Err(TemplateError::MissingInBody {
                name: t.name.clone(),
                placeholder: missing.clone(),
            });
        }
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<String> {
        &self.required
    }

    /// Every placeholder name occurring in the body.
    pub fn placeholders(&self) -> Result<BTreeSet<String>, TemplateError> {
        let mut out = BTreeSet::new();
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                name: self.name.clone(),
            })?;
            out.insert(after[..end].trim().to_string());
            rest = &after[end + 2..];
        }
        Ok(out)
    }

    /// Substitutes every placeholder in one pass. Bound values are inserted
    /// verbatim, so braces inside them are never re-expanded.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| TemplateError::Unterminated {
                name: self.name.clone(),
            })?;
            let key = after[..end].trim();
            let value = bindings.get(key).ok_or_else(|| TemplateError::Unbound {
                name: self.name.clone(),
                placeholder: key.to_string(),
            })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Deserialize)]
struct Manifest {
    version: String,
    #[serde(rename = "template")]
    templates: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
    #[serde(default)]
    required: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Names every registry must provide.
pub const REQUIRED_TEMPLATES: [&str; 10] = [
    "profile_generation",
    "random_event",
    "profile_event",
    "conversation_no_se",
    "conversation_with_se",
    "group_profile",
    "topic_steps",
    "next_speaker",
    "member_response",
    "agreement_check",
];

const BUNDLED: [(&str, &str); 12] = [
    ("manifest.toml", include_str!("../templates/manifest.toml")),
    ("profile_generation.txt", include_str!("../templates/profile_generation.txt")),
    ("random_event.txt", include_str!("../templates/random_event.txt")),
    ("profile_event.txt", include_str!("../templates/profile_event.txt")),
    ("conversation_no_se.txt", include_str!("../templates/conversation_no_se.txt")),
    ("conversation_with_se.txt", include_str!("../templates/conversation_with_se.txt")),
    ("group_profile.txt", include_str!("../templates/group_profile.txt")),
    ("topic_steps.txt", include_str!("../templates/topic_steps.txt")),
    ("next_speaker.txt", include_str!("../templates/next_speaker.txt")),
    ("member_response.txt", include_str!("../templates/member_response.txt")),
    ("agreement_check.txt", include_str!("../templates/agreement_check.txt")),
    ("change_judgment.txt", include_str!("../templates/change_judgment.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    version: String,
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        TemplateRegistry::from_source(|file| {
            BUNDLED
                .iter()
                .find(|(name, _)| *name == file)
                .map(|(_, body)| body.to_string())
                .ok_or_else(|| format!("no bundled template file {file}"))
        })
        .expect("bundled templates are valid")
    }
}

impl TemplateRegistry {
    /// Loads `manifest.toml` and the files it lists from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        TemplateRegistry::from_source(|file| {
            std::fs::read_to_string(dir.join(file))
                .map_err(|e| format!("{}: {e}", dir.join(file).display()))
        })
    }

    fn from_source(read: impl Fn(&str) -> Result<String, String>) -> Result<Self, TemplateError> {
        let manifest: Manifest = toml::from_str(&read(MANIFEST_FILE).map_err(TemplateError::Manifest)?)
            .map_err(|e| TemplateError::Manifest(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for entry in manifest.templates {
            let body = read(&entry.file).map_err(TemplateError::Manifest)?;
            let t = PromptTemplate::new(&entry.name, &body, entry.required)?;
            if templates.insert(entry.name.clone(), t).is_some() {
                return Err(TemplateError::Manifest(format!("duplicate template {}", entry.name)));
            }
        }
        if let Some(missing) = REQUIRED_TEMPLATES.iter().find(|n| !templates.contains_key(**n)) {
            return Err(TemplateError::Manifest(format!("missing template {missing}")));
        }
        Ok(TemplateRegistry {
            version: manifest.version,
            templates,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    pub fn render(&self, name: &str, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        self.get(name)?.render(bindings)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Writes the bundled templates and manifest into `dir` for editing.
    pub fn export_bundled(dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (file, body) in BUNDLED {
            std::fs::write(dir.join(file), body)?;
        }
        Ok(())
    }
}

/// Builds a binding map from `(name, value)` pairs.
pub fn bindings<const N: usize>(pairs: [(&'static str, String); N]) -> BTreeMap<&'static str, String> {
    pairs.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_registry_loads_all_templates() {
        let reg = TemplateRegistry::default();
        assert_eq!(reg.version(), "1");
        for name in REQUIRED_TEMPLATES {
            let t = reg.get(name).unwrap();
            assert!(!t.required_placeholders().is_empty(), "{name}");
        }
    }

    #[test]
    fn required_placeholder_must_appear() {
        let err = PromptTemplate::new("t", "hello {{a}}", ["a", "b"]).unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingInBody {
                name: "t".into(),
                placeholder: "b".into()
            }
        );
    }

    #[test]
    fn incomplete_binding_fails() {
        let t = PromptTemplate::new("t", "{{a}} and {{b}}", ["a"]).unwrap();
        let err = t.render(&bindings([("a", "x".into())])).unwrap_err();
        assert!(matches!(err, TemplateError::Unbound { placeholder, .. } if placeholder == "b"));
    }

    #[test]
    fn values_are_not_re_expanded() {
        let t = PromptTemplate::new("t", "<{{a}}>", ["a"]).unwrap();
        assert_eq!(t.render(&bindings([("a", "{{a}}".into())])).unwrap(), "<{{a}}>");
    }

    #[test]
    fn unterminated_placeholder_rejected() {
        assert!(matches!(
            PromptTemplate::new("t", "oops {{a", Vec::<String>::new()),
            Err(TemplateError::Unterminated { .. })
        ));
    }

    #[test]
    fn exported_bundle_reloads() {
        let dir = tempfile::tempdir().unwrap();
        TemplateRegistry::export_bundled(dir.path()).unwrap();
        assert_eq!(TemplateRegistry::load_dir(dir.path()).unwrap(), TemplateRegistry::default());
    }

    proptest! {
        #[test]
        fn complete_binding_leaves_no_placeholder(values in prop::collection::vec("[a-zA-Z0-9 .,]{0,20}", 10)) {
            let reg = TemplateRegistry::default();
            for t in reg.iter() {
                let names = t.placeholders().unwrap();
                let map: BTreeMap<&str, String> = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.as_str(), values[i % values.len()].clone()))
                    .collect();
                let out = t.render(&map).unwrap();
                prop_assert!(!out.contains("{{"));
            }
        }
    }
}
