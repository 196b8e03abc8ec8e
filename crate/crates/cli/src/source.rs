use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use aloha_num::network::{build_linear, build_sample10, build_star, load_network};
use aloha_num::{Network, Result};
use serde::Serialize;

/// Where a network comes from: a generator, the bundled sample or a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum NetworkSpec {
    Linear(usize),
    Star(usize),
    Sample10,
    File(PathBuf),
}

impl NetworkSpec {
    pub fn load(&self) -> Result<Network> {
        Ok(match self {
            NetworkSpec::Linear(n) => Network::bare(build_linear(*n)?),
            NetworkSpec::Star(n) => Network::bare(build_star(*n)?),
            NetworkSpec::Sample10 => build_sample10(),
            NetworkSpec::File(path) => {
                let (t, sessions) = load_network(path)?;
                Network::new(t, sessions)?
            }
        })
    }

    pub fn family(&self) -> &'static str {
        match self {
            NetworkSpec::Linear(_) => "linear",
            NetworkSpec::Star(_) => "star",
            NetworkSpec::Sample10 => "sample10",
            NetworkSpec::File(_) => "file",
        }
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetworkSpec::Linear(n) => write!(f, "linear:{n}"),
            NetworkSpec::Star(n) => write!(f, "star:{n}"),
            NetworkSpec::Sample10 => write!(f, "sample10"),
            NetworkSpec::File(p) => write!(f, "{}", p.display()),
        }
    }
}

impl From<NetworkSpec> for String {
    fn from(spec: NetworkSpec) -> String {
        spec.to_string()
    }
}

impl FromStr for NetworkSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "sample10" {
            return Ok(NetworkSpec::Sample10);
        }
        for (prefix, make) in [("linear:", NetworkSpec::Linear as fn(usize) -> _), ("star:", NetworkSpec::Star)] {
            if let Some(n) = s.strip_prefix(prefix) {
                return n.parse().map(make).map_err(|_| format!("bad node count in '{s}'"));
            }
        }
        if s.is_empty() {
            return Err("empty network spec".into());
        }
        Ok(NetworkSpec::File(PathBuf::from(s)))
    }
}

/// A network spec that may name a size range, `linear:4..32:4` (end inclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub struct NetworkRange {
    pub specs: Vec<NetworkSpec>,
    text: String,
}

impl From<NetworkRange> for String {
    fn from(r: NetworkRange) -> String {
        r.text
    }
}

impl FromStr for NetworkRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let specs = match s.split_once(':') {
            Some((family @ ("linear" | "star"), rest)) if rest.contains("..") => {
                let (range, step) = match rest.split_once(':') {
                    Some((r, st)) => (r, st.parse::<usize>().map_err(|_| format!("bad step in '{s}'"))?),
                    None => (rest, 1),
                };
                let (a, b) = range.split_once("..").expect("checked above");
                let a: usize = a.parse().map_err(|_| format!("bad range start in '{s}'"))?;
                let b: usize = b.parse().map_err(|_| format!("bad range end in '{s}'"))?;
                if step == 0 || a > b {
                    return Err(format!("empty range '{s}'"));
                }
                (a..=b)
                    .step_by(step)
                    .map(|n| if family == "linear" { NetworkSpec::Linear(n) } else { NetworkSpec::Star(n) })
                    .collect()
            }
            _ => vec![s.parse()?],
        };
        Ok(NetworkRange { specs, text: s.to_string() })
    }
}
