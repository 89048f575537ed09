//! Secret masking applied to captured agent output before it is persisted.

use regex::Regex;

pub const MASK: &str = "[REDACTED]";

/// Default secret shapes. Key/value pairs keep the key so the evidence stays readable.
const DEFAULT_PATTERNS: &[&str] = &[
    r"sk-ant-[A-Za-z0-9_\-]{16,}",
    r"sk-[A-Za-z0-9_\-]{16,}",
    r"AKIA[0-9A-Z]{16}",
    r"gh[pousr]_[A-Za-z0-9]{30,}",
    r"AIza[0-9A-Za-z_\-]{30,}",
    r"xox[abpr]-[A-Za-z0-9\-]{10,}",
    r"(?i)bearer\s+[A-Za-z0-9._\-]{8,}",
];

const KEY_VALUE: &str = r#"(?i)\b([A-Z0-9_\-]*(?:api[_\-]?key|token|secret|password|passwd)[A-Z0-9_\-]*)(\s*[:=]\s*)("[^"]*"|'[^']*'|[^\s,;]+)"#;

#[derive(Debug, Clone)]
pub struct Redactor {
    patterns: Vec<Regex>,
    key_value: Option<Regex>,
    literals: Vec<String>,
}

impl Default for Redactor {
    fn default() -> Self {
        Redactor {
            patterns: DEFAULT_PATTERNS.iter().map(|p| Regex::new(p).expect("valid default pattern")).collect(),
            key_value: Some(Regex::new(KEY_VALUE).expect("valid key/value pattern")),
            literals: Vec::new(),
        }
    }
}

impl Redactor {
    /// A redactor that changes nothing.
    pub fn none() -> Self {
        Redactor {
            patterns: Vec::new(),
            key_value: None,
            literals: Vec::new(),
        }
    }

    pub fn with_pattern(mut self, pattern: &str) -> Result<Self, regex::Error> {
        self.patterns.push(Regex::new(pattern)?);
        Ok(self)
    }

    /// Masks the current values of the named environment variables, when set.
    pub fn with_env_values<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for name in names {
            if let Ok(v) = std::env::var(name.as_ref()) {
                if v.len() >= 4 {
                    self.literals.push(v);
                }
            }
        }
        self
    }

    pub fn with_literal(mut self, secret: impl Into<String>) -> Self {
        self.literals.push(secret.into());
        self
    }

    pub fn redact(&self, text: &str) -> String {
        let mut out = text.to_string();
        for lit in &self.literals {
            out = out.replace(lit.as_str(), MASK);
        }
        if let Some(kv) = &self.key_value {
            out = kv.replace_all(&out, format!("${{1}}${{2}}{MASK}")).into_owned();
        }
        for p in &self.patterns {
            out = p.replace_all(&out, MASK).into_owned();
        }
        out
    }

    pub fn redact_all(&self, lines: &[String]) -> Vec<String> {
        lines.iter().map(|l| self.redact(l)).collect()
    }
}
