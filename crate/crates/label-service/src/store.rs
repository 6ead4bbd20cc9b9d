//! Task queue and label persistence.
//!
//! Durable state lives in `snapshot.json` plus an append-only `labels.wal`
//! of JSON lines. Every label or skip is appended and synced before the
//! in-memory state changes. Leases are not persisted: after a restart every
//! unlabeled task is back in the pool.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use oppo_core::data::{
    is_valid_label, sample_pairs, LabelSource, OfflineDataset, PreferenceDataset, PreferenceTriple,
};

pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const WAL_FILE: &str = "labels.wal";
pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;
/// WAL entries that trigger a compaction into the snapshot.
const COMPACT_EVERY: usize = 256;
pub const MAX_RENDER_POINTS: usize = 200;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64)
    }
}

/// A clock that only moves when told to.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(Arc::new(AtomicU64::new(start_ms)))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("injected fault: {0}")]
    Injected(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] oppo_core::Error),
}

pub type StoreResult<T> = std::result::Result<T, StoreError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Labeled,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub annotator_id: String,
    pub assigned_at: u64,
    pub expires_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTask {
    pub task_id: String,
    pub i: usize,
    pub j: usize,
    pub status: TaskStatus,
    #[serde(skip)]
    pub lease: Option<Lease>,
    pub labeled_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub task_id: String,
    pub y: f64,
    pub annotator_id: String,
    pub submitted_at: u64,
}

/// What an annotator sends back for a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: String,
    #[serde(default)]
    pub y: Option<f64>,
    pub annotator_id: String,
    /// Marks the task skipped instead of labeling it.
    #[serde(default)]
    pub skip: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum WalEntry {
    Labeled(LabelRecord),
    Skipped {
        task_id: String,
        annotator_id: String,
        at: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    dataset_ref: String,
    tasks: Vec<LabelTask>,
    records: Vec<LabelRecord>,
}

/// A state-path polyline for drawing one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRender {
    pub id: usize,
    pub env_id: String,
    pub length: usize,
    /// Positions at `steps[k]`, at most `MAX_RENDER_POINTS` of them.
    pub points: Vec<[f64; 2]>,
    pub steps: Vec<usize>,
    pub goal: [f64; 2],
}

/// Task payload handed to an annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub i: usize,
    pub j: usize,
    pub status: TaskStatus,
    pub assigned_at: u64,
    pub lease_expires_at: u64,
    pub left: TrajectoryRender,
    pub right: TrajectoryRender,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub pending: usize,
    pub assigned: usize,
    pub labeled: usize,
    pub skipped: usize,
    pub total: usize,
}

/// Points where a test can make the store fail on purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Fail a submission after its WAL entry is durable but before the
    /// in-memory state changes, as a crash before the ack would.
    pub crash_after_wal_write: bool,
}

pub struct LabelStore {
    dir: PathBuf,
    dataset: OfflineDataset,
    tasks: BTreeMap<String, LabelTask>,
    records: BTreeMap<String, LabelRecord>,
    wal: File,
    wal_entries: usize,
    clock: Arc<dyn Clock>,
    lease_ms: u64,
    pub faults: Faults,
}

pub fn task_id(k: usize) -> String {
    format!("task-{k:06}")
}

impl LabelStore {
    /// Opens the store in `dir`, creating a queue of `n_pairs` pairs drawn
    /// with the scripted teacher's pair sampler when none exists yet.
    pub fn open_or_create(
        dir: &Path,
        dataset: OfflineDataset,
        n_pairs: usize,
        seed: u64,
        clock: Arc<dyn Clock>,
    ) -> StoreResult<Self> {
        fs::create_dir_all(dir)?;
        if !dir.join(SNAPSHOT_FILE).exists() {
            let tasks = sample_pairs(dataset.len(), n_pairs, seed)?
                .into_iter()
                .enumerate()
                .map(|(k, (i, j))| LabelTask {
                    task_id: task_id(k),
                    i,
                    j,
                    status: TaskStatus::Pending,
                    lease: None,
                    labeled_at: None,
                })
                .collect();
            write_snapshot(
                dir,
                &Snapshot {
                    dataset_ref: dataset.content_hash.clone(),
                    tasks,
                    records: Vec::new(),
                },
            )?;
        }
        Self::open(dir, dataset, clock)
    }

    /// Loads the snapshot and replays the WAL. A torn final WAL line (a
    /// crash mid-append) is dropped.
    pub fn open(dir: &Path, dataset: OfflineDataset, clock: Arc<dyn Clock>) -> StoreResult<Self> {
        let snap: Snapshot = serde_json::from_str(&fs::read_to_string(dir.join(SNAPSHOT_FILE))?)?;
        if snap.dataset_ref != dataset.content_hash {
            return Err(StoreError::Conflict(format!(
                "label store belongs to dataset {}, not {}",
                snap.dataset_ref, dataset.content_hash
            )));
        }
        let mut store = Self {
            dir: dir.to_path_buf(),
            tasks: snap.tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect(),
            records: snap.records.into_iter().map(|r| (r.task_id.clone(), r)).collect(),
            dataset,
            wal: OpenOptions::new().create(true).append(true).open(dir.join(WAL_FILE))?,
            wal_entries: 0,
            clock,
            lease_ms: DEFAULT_LEASE_MS,
            faults: Faults::default(),
        };
        let text = fs::read_to_string(dir.join(WAL_FILE))?;
        let lines: Vec<&str> = text.lines().collect();
        for (n, line) in lines.iter().enumerate() {
            match serde_json::from_str::<WalEntry>(line) {
                Ok(entry) => store.apply(entry),
                Err(_) if n + 1 == lines.len() => log::warn!("dropping torn WAL tail"),
                Err(e) => return Err(e.into()),
            }
        }
        store.compact()?;
        Ok(store)
    }

    pub fn with_lease_ms(mut self, ms: u64) -> Self {
        self.lease_ms = ms;
        self
    }

    pub fn dataset_ref(&self) -> &str {
        &self.dataset.content_hash
    }

    fn apply(&mut self, entry: WalEntry) {
        match entry {
            WalEntry::Labeled(rec) => {
                if let Some(t) = self.tasks.get_mut(&rec.task_id) {
                    if t.status == TaskStatus::Pending {
                        t.status = TaskStatus::Labeled;
                        t.labeled_at = Some(rec.submitted_at);
                        t.lease = None;
                        self.records.insert(rec.task_id.clone(), rec);
                    }
                }
            }
            WalEntry::Skipped { task_id, at, .. } => {
                if let Some(t) = self.tasks.get_mut(&task_id) {
                    if t.status == TaskStatus::Pending {
                        t.status = TaskStatus::Skipped;
                        t.labeled_at = Some(at);
                        t.lease = None;
                    }
                }
            }
        }
        self.wal_entries += 1;
    }

    /// Folds the WAL into a fresh snapshot and truncates it.
    pub fn compact(&mut self) -> StoreResult<()> {
        write_snapshot(
            &self.dir,
            &Snapshot {
                dataset_ref: self.dataset.content_hash.clone(),
                tasks: self.tasks.values().cloned().collect(),
                records: self.records.values().cloned().collect(),
            },
        )?;
        self.wal = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.dir.join(WAL_FILE))?;
        self.wal.sync_all()?;
        self.wal = OpenOptions::new().append(true).open(self.dir.join(WAL_FILE))?;
        self.wal_entries = 0;
        Ok(())
    }

    fn append(&mut self, entry: &WalEntry) -> StoreResult<()> {
        let mut line = serde_json::to_vec(entry)?;
        line.push(b'\n');
        self.wal.write_all(&line)?;
        self.wal.sync_data()?;
        Ok(())
    }

    fn lease_live(&self, lease: &Option<Lease>, now: u64) -> bool {
        lease.as_ref().is_some_and(|l| now < l.expires_at)
    }

    /// Leases the oldest pending task that nobody holds. An annotator who
    /// already holds a live lease gets that task again.
    pub fn next_task(&mut self, annotator_id: &str) -> StoreResult<Option<TaskView>> {
        if annotator_id.trim().is_empty() {
            return Err(StoreError::Validation("annotator id must not be empty".into()));
        }
        let now = self.clock.now_ms();
        let held = self.tasks.values().find(|t| {
            t.status == TaskStatus::Pending
                && self.lease_live(&t.lease, now)
                && t.lease.as_ref().is_some_and(|l| l.annotator_id == annotator_id)
        });
        let id = match held {
            Some(t) => t.task_id.clone(),
            None => {
                let Some(t) = self
                    .tasks
                    .values()
                    .find(|t| t.status == TaskStatus::Pending && !self.lease_live(&t.lease, now))
                else {
                    return Ok(None);
                };
                t.task_id.clone()
            }
        };
        let lease_ms = self.lease_ms;
        let task = self.tasks.get_mut(&id).expect("found above");
        if task.lease.as_ref().is_none_or(|l| l.annotator_id != annotator_id || now >= l.expires_at) {
            task.lease = Some(Lease {
                annotator_id: annotator_id.to_string(),
                assigned_at: now,
                expires_at: now + lease_ms,
            });
        }
        let task = task.clone();
        let lease = task.lease.clone().expect("just leased");
        Ok(Some(TaskView {
            left: self.render(task.i)?,
            right: self.render(task.j)?,
            task_id: task.task_id,
            i: task.i,
            j: task.j,
            status: task.status,
            assigned_at: lease.assigned_at,
            lease_expires_at: lease.expires_at,
        }))
    }

    /// Persists a label or skip. Only the current lease holder may submit,
    /// and a task is settled at most once.
    pub fn submit(&mut self, sub: &Submission) -> StoreResult<TaskStatus> {
        let y = match (sub.skip, sub.y) {
            (true, None) => None,
            (true, Some(_)) => return Err(StoreError::Validation("a skip carries no label".into())),
            (false, Some(y)) if is_valid_label(y) => Some(y),
            (false, Some(y)) => return Err(StoreError::Validation(format!("label {y} is not one of 0, 0.5, 1"))),
            (false, None) => return Err(StoreError::Validation("missing label".into())),
        };
        let now = self.clock.now_ms();
        let task = self
            .tasks
            .get(&sub.task_id)
            .ok_or_else(|| StoreError::NotFound(format!("unknown task {}", sub.task_id)))?;
        if task.status != TaskStatus::Pending {
            return Err(StoreError::Conflict(format!("task {} is already settled", sub.task_id)));
        }
        let holds = task
            .lease
            .as_ref()
            .is_some_and(|l| l.annotator_id == sub.annotator_id && now < l.expires_at);
        if !holds {
            return Err(StoreError::Conflict(format!(
                "task {} is not leased to {}",
                sub.task_id, sub.annotator_id
            )));
        }
        let entry = match y {
            Some(y) => WalEntry::Labeled(LabelRecord {
                task_id: sub.task_id.clone(),
                y,
                annotator_id: sub.annotator_id.clone(),
                submitted_at: now,
            }),
            None => WalEntry::Skipped {
                task_id: sub.task_id.clone(),
                annotator_id: sub.annotator_id.clone(),
                at: now,
            },
        };
        self.append(&entry)?;
        if self.faults.crash_after_wal_write {
            return Err(StoreError::Injected("crash after WAL write"));
        }
        self.apply(entry);
        if self.wal_entries >= COMPACT_EVERY {
            self.compact()?;
        }
        Ok(self.tasks[&sub.task_id].status)
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now_ms();
        let mut p = Progress {
            total: self.tasks.len(),
            ..Progress::default()
        };
        for t in self.tasks.values() {
            match t.status {
                TaskStatus::Pending if self.lease_live(&t.lease, now) => p.assigned += 1,
                TaskStatus::Pending => p.pending += 1,
                TaskStatus::Labeled => p.labeled += 1,
                TaskStatus::Skipped => p.skipped += 1,
            }
        }
        p
    }

    pub fn records(&self) -> Vec<LabelRecord> {
        self.records.values().cloned().collect()
    }

    /// Labeled tasks as a training preference set, in task-id order.
    pub fn export(&self, dataset_ref: &str) -> StoreResult<PreferenceDataset> {
        if dataset_ref != self.dataset.content_hash {
            return Err(StoreError::Conflict(format!(
                "labels belong to dataset {}, not {dataset_ref}",
                self.dataset.content_hash
            )));
        }
        if self.records.is_empty() {
            return Err(StoreError::NotFound("no labeled tasks yet".into()));
        }
        let triples = self
            .records
            .values()
            .map(|r| {
                let t = &self.tasks[&r.task_id];
                PreferenceTriple {
                    i: t.i,
                    j: t.j,
                    y: r.y,
                    source: LabelSource::Human,
                    annotator_id: Some(r.annotator_id.clone()),
                }
            })
            .collect();
        Ok(PreferenceDataset {
            triples,
            dataset_ref: self.dataset.content_hash.clone(),
        })
    }

    pub fn render(&self, id: usize) -> StoreResult<TrajectoryRender> {
        let traj = self
            .dataset
            .trajectories
            .get(id)
            .ok_or_else(|| StoreError::NotFound(format!("unknown trajectory {id}")))?;
        let stride = traj.length.div_ceil(MAX_RENDER_POINTS).max(1);
        let mut steps: Vec<usize> = (0..traj.length).step_by(stride).collect();
        if steps.last() != Some(&(traj.length - 1)) && steps.len() < MAX_RENDER_POINTS {
            steps.push(traj.length - 1);
        }
        let points = steps
            .iter()
            .map(|&t| {
                let s = traj.state(t);
                [s[0] as f64, s[1] as f64]
            })
            .collect();
        let goal = &self.dataset.env.goal;
        Ok(TrajectoryRender {
            id,
            env_id: self.dataset.env.env_id.as_str().to_string(),
            length: traj.length,
            points,
            steps,
            goal: [goal[0], goal[1]],
        })
    }
}

fn write_snapshot(dir: &Path, snap: &Snapshot) -> StoreResult<()> {
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(snap)?)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
    Ok(())
}
