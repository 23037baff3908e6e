//! Scripted task behaviour for the `sim-task` runtime.
//!
//! The entry string holds one script per launch attempt, separated by `|`;
//! the last script repeats for later attempts. Scripts:
//!
//! * `forever`
//! * `sleep N; exit K` (alias `exit K after N`)
//! * `crash at N`

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::domain::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad sim-task script `{0}`")]
pub struct BadScript(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimBehavior {
    Forever,
    Exit { after: Tick, code: i32 },
    Crash { at: Tick },
}

impl FromStr for SimBehavior {
    type Err = BadScript;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || BadScript(s.to_string());
        let words: Vec<&str> = s
            .split(|c: char| c.is_whitespace() || c == ';')
            .filter(|w| !w.is_empty())
            .collect();
        let num = |w: &str| w.parse::<i64>().map_err(|_| bad());
        match words.as_slice() {
            ["forever"] => Ok(SimBehavior::Forever),
            ["sleep", n, "exit", k] | ["exit", k, "after", n] => {
                let after = num(n)?;
                if after < 0 {
                    return Err(bad());
                }
                Ok(SimBehavior::Exit {
                    after: after as Tick,
                    code: i32::try_from(num(k)?).map_err(|_| bad())?,
                })
            }
            ["crash", "at", n] => {
                let at = num(n)?;
                if at < 0 {
                    return Err(bad());
                }
                Ok(SimBehavior::Crash { at: at as Tick })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SimBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimBehavior::Forever => f.write_str("forever"),
            SimBehavior::Exit { after, code } => write!(f, "sleep {after}; exit {code}"),
            SimBehavior::Crash { at } => write!(f, "crash at {at}"),
        }
    }
}

/// Picks the script for a zero-based launch attempt.
pub fn behavior_for_attempt(entry: &str, attempt: u32) -> Result<SimBehavior, BadScript> {
    let scripts: Vec<&str> = entry.split('|').map(str::trim).collect();
    let idx = (attempt as usize).min(scripts.len() - 1);
    scripts[idx].parse()
}

pub fn validate_script(entry: &str) -> Result<(), BadScript> {
    entry
        .split('|')
        .map(str::trim)
        .try_for_each(|s| s.parse::<SimBehavior>().map(|_| ()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimOutcome {
    Exited(i32),
    Crashed,
}

/// One scripted execution, advanced by the simulation clock.
#[derive(Debug, Clone)]
pub struct SimTaskRun {
    pub behavior: SimBehavior,
    pub started_at: Tick,
}

impl SimTaskRun {
    pub fn new(behavior: SimBehavior, started_at: Tick) -> Self {
        Self {
            behavior,
            started_at,
        }
    }

    pub fn outcome_at(&self, now: Tick) -> Option<SimOutcome> {
        let elapsed = now.saturating_sub(self.started_at);
        match self.behavior {
            SimBehavior::Forever => None,
            SimBehavior::Exit { after, code } if elapsed >= after => Some(SimOutcome::Exited(code)),
            SimBehavior::Crash { at } if elapsed >= at => Some(SimOutcome::Crashed),
            _ => None,
        }
    }
}
