//! Identifier helpers shared across the pipeline.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Natural ordering: runs of ASCII digits compare numerically, everything else
/// byte-wise. `"IP-05" < "IP-28"`, `"3" < "13" < "128"`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut ai, mut bi) = (a.as_bytes(), b.as_bytes());
    loop {
        match (ai.first(), bi.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let an = ai.iter().take_while(|c| c.is_ascii_digit()).count();
                let bn = bi.iter().take_while(|c| c.is_ascii_digit()).count();
                let (ad, bd) = (&ai[..an], &bi[..bn]);
                let at = trim_zeros(ad);
                let bt = trim_zeros(bd);
                let ord = at.len().cmp(&bt.len()).then_with(|| at.cmp(bt));
                if ord != Ordering::Equal {
                    return ord;
                }
                // "05" vs "5": fewer leading zeros first, so the order stays total.
                if an != bn {
                    return an.cmp(&bn);
                }
                ai = &ai[an..];
                bi = &bi[bn..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                ai = &ai[1..];
                bi = &bi[1..];
            }
        }
    }
}

fn trim_zeros(d: &[u8]) -> &[u8] {
    let n = d.iter().take_while(|c| **c == b'0').count();
    &d[n..]
}

/// Action identifier. Catalog files may carry integers or strings; internally
/// the id is an opaque string and all-digit ids serialize back as integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionId(String);

impl ActionId {
    pub fn new(id: impl Into<String>) -> Self {
        ActionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn as_integer(&self) -> Option<u64> {
        if self.0.is_empty() || (self.0.len() > 1 && self.0.starts_with('0')) {
            return None;
        }
        self.0.parse().ok()
    }
}

impl Ord for ActionId {
    fn cmp(&self, other: &Self) -> Ordering {
        natural_cmp(&self.0, &other.0)
    }
}

impl PartialOrd for ActionId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ActionId {
    fn from(s: &str) -> Self {
        ActionId(s.to_string())
    }
}

impl From<u64> for ActionId {
    fn from(n: u64) -> Self {
        ActionId(n.to_string())
    }
}

impl Serialize for ActionId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.as_integer() {
            Some(n) => s.serialize_u64(n),
            None => s.serialize_str(&self.0),
        }
    }
}

impl<'de> Deserialize<'de> for ActionId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Int(n) => ActionId(n.to_string()),
            Raw::Str(s) => ActionId(s),
        })
    }
}

/// Serializes an [`ActionId`] always as a string (the seed template shape).
pub(crate) mod action_id_as_string {
    use super::ActionId;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(id: &ActionId, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(id.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ActionId, D::Error> {
        ActionId::deserialize(d)
    }
}

/// An agent + model configuration, e.g. `Codex CLI` / `GPT-5.1-Codex-Mini`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfigId {
    pub agent: String,
    pub model: String,
}

impl ConfigId {
    pub fn new(agent: impl Into<String>, model: impl Into<String>) -> Self {
        ConfigId {
            agent: agent.into(),
            model: model.into(),
        }
    }

    /// Directory-safe name: `codex-cli__gpt-5.1-codex-mini`.
    pub fn slug(&self) -> String {
        format!("{}__{}", slugify(&self.agent), slugify(&self.model))
    }

    /// Parses the `agent/model` display form.
    pub fn parse(s: &str) -> Option<Self> {
        let (agent, model) = s.split_once('/')?;
        let (agent, model) = (agent.trim(), model.trim());
        if agent.is_empty() || model.is_empty() {
            return None;
        }
        Some(ConfigId::new(agent, model))
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.agent, self.model)
    }
}

fn slugify(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut dash = false;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || c == '.' {
            out.push(c.to_ascii_lowercase());
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// Zero-padded seed template id (`0001`).
pub fn seed_template_id(n: usize) -> String {
    format!("{n:04}")
}

/// Case id derived from a seed template id (`Test-0001`).
pub fn case_id_for_seed(seed_template_id: &str) -> String {
    format!("Test-{seed_template_id}")
}

/// Step id for a 1-based position (`S01`).
pub fn step_id(n: usize) -> String {
    format!("S{n:02}")
}
