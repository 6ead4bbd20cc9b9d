//! HTTP service that hands trajectory pairs to human annotators and exports
//! their labels as a training preference file.

mod http;
mod store;

pub use http::{router, serve, SharedStore};
pub use store::{
    task_id, Clock, Faults, LabelRecord, LabelStore, LabelTask, Lease, ManualClock, Progress, StoreError,
    StoreResult, Submission, SystemClock, TaskStatus, TaskView, TrajectoryRender, DEFAULT_LEASE_MS,
    MAX_RENDER_POINTS, SNAPSHOT_FILE, WAL_FILE,
};
