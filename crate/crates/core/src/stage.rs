use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One truncation stage of the ranking cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Coarse,
    Fine,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pre, Stage::Coarse, Stage::Fine];

    pub fn index(self) -> usize {
        match self {
            Stage::Pre => 0,
            Stage::Coarse => 1,
            Stage::Fine => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pre => "pre",
            Stage::Coarse => "coarse",
            Stage::Fine => "fine",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(Stage::Pre),
            "coarse" => Ok(Stage::Coarse),
            "fine" => Ok(Stage::Fine),
            other => Err(format!(
                "unknown stage `{other}` (expected pre, coarse or fine)"
            )),
        }
    }
}
