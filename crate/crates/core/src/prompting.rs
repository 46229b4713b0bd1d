//! Level-specific prompt text fed to the alignment module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl Level {
    pub const ONE: Level = Level(1);
    pub const TWO: Level = Level(2);
    pub const THREE: Level = Level(3);
    pub const ALL: [Level; 3] = [Level::ONE, Level::TWO, Level::THREE];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=3).contains(&level) {
            Ok(Level(level))
        } else {
            Err(Error::Level(level))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index for per-level arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn is_binary(self) -> bool {
        self.0 < 3
    }
}

impl TryFrom<u8> for Level {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Level::new(v)
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTable {
    pub level1: String,
    pub level2: String,
    pub level3: String,
}

impl Default for PromptTable {
    fn default() -> Self {
        Self {
            level1: "Focus on the global image".into(),
            level2: "Focus on different organs in the image".into(),
            level3: "pay attention to the density difference between the lesion and the surrounding tissue"
                .into(),
        }
    }
}

impl PromptTable {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in [&self.level1, &self.level2, &self.level3]
            .iter()
            .enumerate()
        {
            if p.trim().is_empty() {
                return Err(Error::Config(format!(
                    "prompt for level {} is empty",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn prompt_for_level(&self, level: Level) -> &str {
        match level.get() {
            1 => &self.level1,
            2 => &self.level2,
            _ => &self.level3,
        }
    }
}

/// Prompt for a raw level number.
pub fn prompt_for_level(level: u8, table: &PromptTable) -> Result<&str> {
    Ok(table.prompt_for_level(Level::new(level)?))
}
