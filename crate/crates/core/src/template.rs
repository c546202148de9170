//! Prompt templates with named slots.
//!
//! A template is plain text in which `{name}` marks a slot. `{{` and `}}`
//! produce literal braces; any other brace is literal too unless it encloses
//! a known slot name. When a slot has no value (for example `{persona}` in a
//! persona-free run) every template line mentioning it is left out.
//!
//! Structured answers are requested inside XML-style tags (`<persona>`,
//! `<request>`, `<instruction>`); see [`extract_tagged`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const SLOTS: [&str; 5] = ["document", "persona", "scope_hint", "instruction", "draft"];

/// Tags wrapping structured answers.
pub mod tag {
    pub const PERSONA: &str = "persona";
    pub const REQUEST: &str = "request";
    pub const INSTRUCTION: &str = "instruction";
    pub const ALL: [&str; 3] = [PERSONA, REQUEST, INSTRUCTION];
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template:?}: unknown slot {{{slot}}}")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template:?}: missing required slot {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {0:?} not provided")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    lines: Vec<Vec<Segment>>,
}

fn is_slot_char(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

impl Template {
    pub fn parse(name: &str, source: &str, required: &[&str]) -> Result<Self, TemplateError> {
        let mut lines = Vec::new();
        for line in source.split('\n') {
            lines.push(parse_line(name, line)?);
        }
        let t = Self {
            name: name.to_string(),
            lines,
        };
        for slot in required {
            if !t.uses(slot) {
                return Err(TemplateError::MissingSlot {
                    template: name.to_string(),
                    slot: slot.to_string(),
                });
            }
        }
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn uses(&self, slot: &str) -> bool {
        self.lines
            .iter()
            .flatten()
            .any(|s| matches!(s, Segment::Slot(n) if *n == slot))
    }

    /// Fills slots from `values`. Lines with a slot that has no value are
    /// dropped.
    pub fn render(&self, values: &[(&str, Option<&str>)]) -> String {
        let lookup = |slot: &str| values.iter().find(|(k, _)| *k == slot).and_then(|(_, v)| *v);
        let mut out = String::new();
        let mut first = true;
        for line in &self.lines {
            let complete = line.iter().all(|s| match s {
                Segment::Slot(n) => lookup(n).is_some(),
                Segment::Text(_) => true,
            });
            if !complete {
                continue;
            }
            if !first {
                out.push('\n');
            }
            first = false;
            for seg in line {
                match seg {
                    Segment::Text(t) => out.push_str(t),
                    Segment::Slot(n) => out.push_str(lookup(n).unwrap_or_default()),
                }
            }
        }
        out
    }
}

fn parse_line(name: &str, line: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segs = Vec::new();
    let mut text = String::new();
    let mut rest = line;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with("{{") {
            text.push('{');
            rest = &rest[2..];
            continue;
        }
        if rest.starts_with("}}") {
            text.push('}');
            rest = &rest[2..];
            continue;
        }
        if c == '{' {
            let body_len = rest[1..].chars().take_while(|c| is_slot_char(*c)).count();
            if body_len > 0 && rest[1 + body_len..].starts_with('}') {
                let slot = &rest[1..1 + body_len];
                let known = SLOTS.iter().find(|s| **s == slot).ok_or_else(|| {
                    TemplateError::UnknownSlot {
                        template: name.to_string(),
                        slot: slot.to_string(),
                    }
                })?;
                if !text.is_empty() {
                    segs.push(Segment::Text(core::mem::take(&mut text)));
                }
                segs.push(Segment::Slot(known));
                rest = &rest[body_len + 2..];
                continue;
            }
        }
        text.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if !text.is_empty() {
        segs.push(Segment::Text(text));
    }
    Ok(segs)
}

pub mod name {
    pub const PERSONA: &str = "persona";
    pub const WAI_WHOLE: &str = "wai_whole";
    pub const WAI_PART: &str = "wai_part";
    pub const WAR_WHOLE: &str = "war_whole";
    pub const WAR_PART: &str = "war_part";
    pub const REFINE: &str = "refine";
    pub const JUDGE: &str = "judge";

    pub const SYNTHESIS: [&str; 6] = [PERSONA, WAI_WHOLE, WAI_PART, WAR_WHOLE, WAR_PART, REFINE];
}

pub fn required_slots(template: &str) -> &'static [&'static str] {
    match template {
        name::REFINE => &["document", "instruction", "draft"],
        name::JUDGE => &["instruction"],
        _ => &["document"],
    }
}

/// The six synthesis templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub persona: Template,
    pub wai_whole: Template,
    pub wai_part: Template,
    pub war_whole: Template,
    pub war_part: Template,
    pub refine: Template,
}

impl TemplateSet {
    pub fn from_sources(sources: &BTreeMap<String, String>) -> Result<Self, TemplateError> {
        let get = |n: &str| -> Result<Template, TemplateError> {
            let src = sources
                .get(n)
                .ok_or_else(|| TemplateError::Missing(n.to_string()))?;
            Template::parse(n, src, required_slots(n))
        };
        Ok(Self {
            persona: get(name::PERSONA)?,
            wai_whole: get(name::WAI_WHOLE)?,
            wai_part: get(name::WAI_PART)?,
            war_whole: get(name::WAR_WHOLE)?,
            war_part: get(name::WAR_PART)?,
            refine: get(name::REFINE)?,
        })
    }
}

/// Content of the last `<tag>…</tag>` block, trimmed. A missing closing tag
/// takes the rest of the text. `None` when the tag is absent or empty.
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = alloc::format!("<{tag}>");
    let close = alloc::format!("</{tag}>");
    let start = text.rfind(&open)? + open.len();
    let body = &text[start..];
    let body = match body.find(&close) {
        Some(end) => &body[..end],
        None => body,
    };
    let body = body.trim();
    (!body.is_empty()).then_some(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_slots_and_escapes() {
        let t = Template::parse("t", "Doc: {document}\n{{literal}} {not a slot}", &["document"]).unwrap();
        assert_eq!(
            t.render(&[("document", Some("X {persona} Y"))]),
            "Doc: X {persona} Y\n{literal} {not a slot}"
        );
    }

    #[test]
    fn missing_value_drops_line() {
        let t = Template::parse("t", "a\nPersona: {persona}\nb {document}", &[]).unwrap();
        assert_eq!(t.render(&[("document", Some("D")), ("persona", None)]), "a\nb D");
        assert_eq!(
            t.render(&[("document", Some("D")), ("persona", Some("P"))]),
            "a\nPersona: P\nb D"
        );
    }

    #[test]
    fn unknown_and_missing_slots() {
        assert!(matches!(
            Template::parse("t", "{documnet}", &[]),
            Err(TemplateError::UnknownSlot { .. })
        ));
        assert!(matches!(
            Template::parse("t", "nothing", &["document"]),
            Err(TemplateError::MissingSlot { .. })
        ));
    }

    #[test]
    fn tagged_answers() {
        assert_eq!(extract_tagged("x <persona> A chef. </persona> y", "persona"), Some("A chef."));
        assert_eq!(extract_tagged("<request>open ended", "request"), Some("open ended"));
        assert_eq!(extract_tagged("<request>  </request>", "request"), None);
        assert_eq!(extract_tagged("no tags", "request"), None);
        assert_eq!(
            extract_tagged("<request>a</request><request>b</request>", "request"),
            Some("b")
        );
    }

    proptest::proptest! {
        #[test]
        fn plain_text_round_trips(s in "[^{}]{0,80}") {
            let t = Template::parse("t", &s, &[]).unwrap();
            proptest::prop_assert_eq!(t.render(&[]), s);
        }
    }
}
