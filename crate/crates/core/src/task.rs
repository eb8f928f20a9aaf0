use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The dense prediction tasks a model can be trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Depth,
    Motion,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::Depth, Task::Motion];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Depth => "depth",
            Task::Motion => "motion",
        }
    }

    /// Short column label used in CSV headers and tables.
    pub fn short(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Depth => "depth",
            Task::Motion => "motion",
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Depth)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segmentation" | "seg" => Ok(Task::Segmentation),
            "depth" => Ok(Task::Depth),
            "motion" => Ok(Task::Motion),
            other => Err(Error::Config(format!(
                "unknown task `{other}`, expected segmentation, depth or motion"
            ))),
        }
    }
}
