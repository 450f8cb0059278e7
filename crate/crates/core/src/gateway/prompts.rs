//! Versioned prompt catalog. Templates live in `prompts/` next to the crate
//! manifest; each has a `[system]` and a `[user]` section and `{{name}}`
//! placeholders.

use std::collections::BTreeMap;

use super::{ChatMessage, GatewayError};

pub const CATALOG_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub source: &'static str,
}

pub const REWRITER: PromptTemplate = PromptTemplate { id: "rewriter", source: include_str!("../../prompts/rewriter.txt") };
pub const TUTOR: PromptTemplate = PromptTemplate { id: "tutor", source: include_str!("../../prompts/tutor.txt") };
pub const TUTOR_REPAIR: PromptTemplate =
    PromptTemplate { id: "tutor_repair", source: include_str!("../../prompts/tutor_repair.txt") };
pub const JUDGE: PromptTemplate = PromptTemplate { id: "judge", source: include_str!("../../prompts/judge.txt") };
pub const PERSONA_GENERATOR: PromptTemplate =
    PromptTemplate { id: "persona_generator", source: include_str!("../../prompts/persona_generator.txt") };
pub const MEMORY_GENERATOR: PromptTemplate =
    PromptTemplate { id: "memory_generator", source: include_str!("../../prompts/memory_generator.txt") };
pub const JSON_REPAIR: PromptTemplate =
    PromptTemplate { id: "json_repair", source: include_str!("../../prompts/json_repair.txt") };
pub const STUDENT_SIM: PromptTemplate =
    PromptTemplate { id: "student_sim", source: include_str!("../../prompts/student_sim.txt") };

pub const ALL: [PromptTemplate; 8] =
    [REWRITER, TUTOR, TUTOR_REPAIR, JUDGE, PERSONA_GENERATOR, MEMORY_GENERATOR, JSON_REPAIR, STUDENT_SIM];

pub fn lookup(id: &str) -> Result<PromptTemplate, GatewayError> {
    ALL.iter().copied().find(|t| t.id == id).ok_or_else(|| GatewayError::UnknownTemplate(id.to_string()))
}

impl PromptTemplate {
    fn sections(&self) -> (&'static str, &'static str) {
        let body = self.source.strip_prefix("[system]\n").expect("template starts with [system]");
        let (system, user) = body.split_once("\n[user]\n").expect("template has a [user] section");
        (system, user.trim_end_matches('\n'))
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        let (system, user) = self.sections();
        for part in [system, user] {
            let mut rest = part;
            while let Some(start) = rest.find("{{") {
                let Some(len) = rest[start + 2..].find("}}") else { break };
                let name = rest[start + 2..start + 2 + len].to_string();
                if !names.contains(&name) {
                    names.push(name);
                }
                rest = &rest[start + 2 + len + 2..];
            }
        }
        names
    }

    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>, GatewayError> {
        let (system, user) = self.sections();
        Ok(vec![
            ChatMessage::system(substitute(self.id, system, bindings)?),
            ChatMessage::user(substitute(self.id, user, bindings)?),
        ])
    }
}

/// Single-pass substitution: bound values are never re-scanned.
fn substitute(template: &str, text: &str, bindings: &BTreeMap<String, String>) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(len) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = &after[..len];
        let value = bindings.get(name).ok_or_else(|| GatewayError::MissingBinding {
            template: template.to_string(),
            name: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[len + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_prompt<K, V, I>(template_id: &str, bindings: I) -> Result<Vec<ChatMessage>, GatewayError>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    let map: BTreeMap<String, String> = bindings.into_iter().map(|(k, v)| (k.into(), v.into())).collect();
    lookup(template_id)?.render(&map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatRole;

    #[test]
    fn rewriter_renders_two_messages() {
        let msgs = render_prompt(
            "rewriter",
            [
                ("description", "Student excels at fraction addition"),
                ("concept", "fraction addition"),
                ("mastery", "0.82"),
                ("elapsed_days", "14.0"),
                ("forgetting", "0.32"),
            ],
        )
        .unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, ChatRole::System);
        assert!(msgs[0].content.starts_with("You are a personalized math tutor. Given a student's original state"));
        assert_eq!(
            msgs[1].content,
            "The student's original state: \"Student excels at fraction addition\" for concept fraction addition, with mastery 0.82.\n\
             This concept was last practiced 14.0 days ago.\n\
             Current forgetting score: 0.32."
        );
    }

    #[test]
    fn judge_system_message() {
        let msgs = render_prompt("judge", [("student_context", "x"), ("dialogue_a", "a"), ("dialogue_b", "b")]).unwrap();
        assert!(msgs[0].content.starts_with("You are an expert educational AI evaluator"));
        assert!(msgs[0].content.contains("\"Dialogue A is more personalized\" or \"Dialogue B is more personalized\""));
    }

    #[test]
    fn missing_binding_is_error() {
        let err = render_prompt("rewriter", [("description", "x")]).unwrap_err();
        assert!(matches!(err, GatewayError::MissingBinding { ref name, .. } if name == "concept"));
        assert!(matches!(render_prompt("nope", Vec::<(String, String)>::new()), Err(GatewayError::UnknownTemplate(_))));
    }

    #[test]
    fn values_are_not_rescanned() {
        let msgs = render_prompt(
            "rewriter",
            [
                ("description", "{{concept}}"),
                ("concept", "c"),
                ("mastery", "m"),
                ("elapsed_days", "d"),
                ("forgetting", "f"),
            ],
        )
        .unwrap();
        assert!(msgs[1].content.contains("\"{{concept}}\""));
    }

    #[test]
    fn every_template_parses() {
        for t in ALL {
            let names = t.placeholders();
            let bindings: BTreeMap<String, String> = names.iter().map(|n| (n.clone(), "v".to_string())).collect();
            let msgs = t.render(&bindings).unwrap();
            assert!(!msgs[0].content.contains("{{"), "{}", t.id);
            assert!(!msgs[1].content.contains("{{"), "{}", t.id);
        }
        assert_eq!(REWRITER.placeholders(), ["description", "concept", "mastery", "elapsed_days", "forgetting"]);
    }
}
