//! Content-addressed blob store plus a JSON index of plugins, stories and
//! jobs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use storyplug_core::plugin::PluginMetadata;

use crate::error::{Error, Result};
use crate::io;

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Augment,
    Train,
    Extract,
    Frame,
    Story,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// queued -> running -> {done, failed}; queued -> failed is allowed for
    /// jobs that never got a worker.
    pub fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done | JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub result_ref: Option<String>,
    pub error_detail: Option<String>,
    /// Object holding the submitted request body.
    pub request_ref: Option<String>,
    pub request_hash: Option<String>,
    /// Named output objects (`image`, `diagnostics`, `checkpoint`, `manifest`).
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

impl Job {
    pub fn new(id: String, kind: JobKind) -> Self {
        Self {
            id,
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result_ref: None,
            error_detail: None,
            request_ref: None,
            request_hash: None,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn transition(&mut self, next: JobState) -> Result<()> {
        if !self.state.can_become(next) {
            return Err(Error::Usage(format!("job {}: {:?} cannot become {:?}", self.id, self.state, next)));
        }
        self.state = next;
        if next == JobState::Done {
            self.progress = 1.0;
        }
        Ok(())
    }

    /// Progress never moves backwards.
    pub fn advance(&mut self, progress: f64) {
        if progress.is_finite() {
            self.progress = self.progress.max(progress.clamp(0.0, 1.0));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginEntry {
    pub object: String,
    pub metadata: PluginMetadata,
    pub rows: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryEntry {
    pub object: String,
    pub title: String,
    /// Rendered manifest object, once a story job has finished.
    pub manifest: Option<String>,
    /// Frame id to PNG object.
    #[serde(default)]
    pub frames: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub plugins: BTreeMap<String, PluginEntry>,
    pub stories: BTreeMap<String, StoryEntry>,
    pub jobs: BTreeMap<String, Job>,
    pub next_job: u64,
}

pub struct Store {
    root: PathBuf,
    pub index: Index,
}

impl Store {
    /// Opens (or creates) a store. Jobs left unfinished by an earlier process
    /// are marked failed.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("objects")).map_err(|e| Error::io(root, e))?;
        let index_path = root.join(INDEX_FILE);
        let mut index: Index = if index_path.exists() { io::read_json(&index_path)? } else { Index::default() };
        for job in index.jobs.values_mut().filter(|j| !j.state.is_terminal()) {
            job.state = JobState::Failed;
            job.error_detail = Some("interrupted by a service restart".into());
        }
        let store = Self { root: root.into(), index };
        store.save()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self) -> Result<()> {
        io::write_json(&self.root.join(INDEX_FILE), &self.index)
    }

    fn object_path(&self, hash: &str) -> PathBuf {
        self.root.join("objects").join(hash)
    }

    /// Stores `bytes` under their SHA-256 and returns the hash.
    pub fn put(&self, bytes: &[u8]) -> Result<String> {
        let hash = io::sha256_hex(bytes);
        let path = self.object_path(&hash);
        if !path.exists() {
            io::write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Usage(format!("bad object id `{hash}`")));
        }
        io::read(&self.object_path(hash))
    }

    pub fn new_job(&mut self, kind: JobKind) -> Result<Job> {
        self.index.next_job += 1;
        let job = Job::new(format!("job-{:06}", self.index.next_job), kind);
        self.index.jobs.insert(job.id.clone(), job.clone());
        self.save()?;
        Ok(job)
    }

    pub fn update_job(&mut self, id: &str, f: impl FnOnce(&mut Job) -> Result<()>) -> Result<Job> {
        let job = self.index.jobs.get_mut(id).ok_or_else(|| Error::Usage(format!("unknown job `{id}`")))?;
        f(job)?;
        let snapshot = job.clone();
        self.save()?;
        Ok(snapshot)
    }
}
