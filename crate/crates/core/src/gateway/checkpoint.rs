//! Per-agent checkpoints of the tasks a proxy believes active, so a
//! restarted gateway can re-adopt executors that kept running.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AgentId, FrameworkId, ResourceVector, TaskId, TaskState, Tick};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub task_id: TaskId,
    pub framework_id: FrameworkId,
    pub spec_hash: String,
    pub state: TaskState,
    pub attempt: u32,
    pub resources: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub agent_id: AgentId,
    pub tasks: Vec<CheckpointEntry>,
    pub written_at: Tick,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint for {agent} is corrupt: {detail}")]
    Corrupt { agent: AgentId, detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
}

pub trait CheckpointIo: Send {
    fn write(&mut self, checkpoint: &Checkpoint) -> Result<(), CheckpointError>;
    /// `Ok(None)` when the agent never wrote a checkpoint.
    fn read(&self, agent: &AgentId) -> Result<Option<Checkpoint>, CheckpointError>;
}

fn parse(agent: &AgentId, text: &str) -> Result<Checkpoint, CheckpointError> {
    let cp: Checkpoint = serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt {
        agent: agent.clone(),
        detail: e.to_string(),
    })?;
    if &cp.agent_id != agent {
        return Err(CheckpointError::Corrupt {
            agent: agent.clone(),
            detail: format!("written by {}", cp.agent_id),
        });
    }
    Ok(cp)
}

/// One JSON file per agent, replaced atomically.
#[derive(Debug, Clone)]
pub struct FsCheckpoints {
    dir: PathBuf,
}

impl FsCheckpoints {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, agent: &AgentId) -> PathBuf {
        // agent ids contain ':' which some filesystems refuse
        self.dir.join(format!("{}.json", agent.as_str().replace([':', '/'], "_")))
    }
}

impl CheckpointIo for FsCheckpoints {
    fn write(&mut self, cp: &Checkpoint) -> Result<(), CheckpointError> {
        let path = self.path(&cp.agent_id);
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(serde_json::to_string(cp).expect("checkpoint serializes").as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn read(&self, agent: &AgentId) -> Result<Option<Checkpoint>, CheckpointError> {
        match fs::read_to_string(self.path(agent)) {
            Ok(text) => parse(agent, &text).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

/// In-memory checkpoints. Clones share storage so a test can corrupt what a
/// gateway wrote.
#[derive(Debug, Clone, Default)]
pub struct MemCheckpoints {
    files: Arc<Mutex<BTreeMap<AgentId, String>>>,
}

impl MemCheckpoints {
    pub fn new() -> Self {
        Self::default()
    }

    fn files(&self) -> std::sync::MutexGuard<'_, BTreeMap<AgentId, String>> {
        self.files.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Truncates the stored checkpoint. Returns false if there was none.
    pub fn corrupt(&self, agent: &AgentId) -> bool {
        match self.files().get_mut(agent) {
            Some(text) => {
                let half = text.len() / 2;
                text.truncate(half);
                true
            }
            None => false,
        }
    }

    pub fn agents(&self) -> Vec<AgentId> {
        self.files().keys().cloned().collect()
    }
}

impl CheckpointIo for MemCheckpoints {
    fn write(&mut self, cp: &Checkpoint) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(cp).expect("checkpoint serializes");
        self.files().insert(cp.agent_id.clone(), text);
        Ok(())
    }

    fn read(&self, agent: &AgentId) -> Result<Option<Checkpoint>, CheckpointError> {
        match self.files().get(agent) {
            Some(text) => parse(agent, text).map(Some),
            None => Ok(None),
        }
    }
}
