//! Plain-text prompt templates.
//!
//! A template file holds the system part, a line containing only `---`, then
//! the user part. `{{name}}` placeholders are substituted in a single pass,
//! so substituted values are never re-expanded.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateError(pub String);

impl fmt::Display for TemplateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "template: {}", self.0)
    }
}

impl std::error::Error for TemplateError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// System and user parts joined, as a single-string view of the prompt.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

impl Template {
    pub fn parse(name: &'static str, src: &str) -> Result<Self, TemplateError> {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut seen_sep = false;
        for line in src.lines() {
            if !seen_sep && line.trim() == "---" {
                seen_sep = true;
            } else if seen_sep {
                user.push(line);
            } else {
                system.push(line);
            }
        }
        if !seen_sep {
            return Err(TemplateError(format!("{name}: missing `---` separator")));
        }
        Ok(Self {
            name,
            system: system.join("\n").trim().to_string(),
            user: user.join("\n").trim().to_string(),
        })
    }

    pub fn render(&self, vars: &[(&str, &str)]) -> RenderedPrompt {
        RenderedPrompt {
            system: substitute(&self.system, vars),
            user: substitute(&self.user, vars),
        }
    }
}

fn substitute(src: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(src.len());
    let mut rest = src;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = after[..end].trim();
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
