use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use surrogate_core::drag::{DragStatus, TrajectoryRecord};
use surrogate_core::image::RenderedImage;
use surrogate_core::patch::PatchSelection;
use surrogate_core::synthdata::ParameterVector;
use tokio::sync::watch;

use crate::error::ApiError;
use crate::CheckpointEntry;

/// Session state as seen by clients; a superset of the drag statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceStatus {
    Configured,
    Running,
    Reached,
    Disappeared,
    MaxItersExhausted,
    Aborted,
    Cancelled,
}

impl ServiceStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, ServiceStatus::Configured | ServiceStatus::Running)
    }
}

impl From<DragStatus> for ServiceStatus {
    fn from(s: DragStatus) -> Self {
        match s {
            DragStatus::Running => ServiceStatus::Running,
            DragStatus::Reached => ServiceStatus::Reached,
            DragStatus::Disappeared => ServiceStatus::Disappeared,
            DragStatus::MaxItersExhausted => ServiceStatus::MaxItersExhausted,
            DragStatus::Aborted => ServiceStatus::Aborted,
        }
    }
}

/// Payload of one `frame` event: the trajectory record plus its image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    #[serde(flatten)]
    pub record: TrajectoryRecord,
    /// Base64 PNG.
    pub frame: String,
}

impl FrameEvent {
    pub fn new(record: &TrajectoryRecord, image: &RenderedImage) -> Result<Self, ApiError> {
        Ok(Self { record: record.clone(), frame: png_base64(image)? })
    }
}

/// Payload of the closing `end` event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndEvent {
    pub status: ServiceStatus,
    pub steps: usize,
    pub error: Option<String>,
}

pub fn png_base64(image: &RenderedImage) -> Result<String, ApiError> {
    Ok(B64.encode(image.to_png_bytes()?))
}

pub(crate) struct SessionState {
    pub status: ServiceStatus,
    pub selections: Vec<PatchSelection>,
    pub trajectory: Vec<TrajectoryRecord>,
    pub last_access: Instant,
}

/// Serialized events of one run, shared between the worker and any number of
/// stream subscribers.
#[derive(Default)]
pub(crate) struct EventLog {
    pub frames: Vec<Arc<str>>,
    pub end: Option<Arc<str>>,
}

pub struct Session {
    pub id: String,
    pub created_at: u64,
    pub checkpoint: Arc<CheckpointEntry>,
    pub theta: ParameterVector,
    pub image: RenderedImage,
    pub(crate) state: Mutex<SessionState>,
    pub(crate) log: Mutex<EventLog>,
    /// Bumped after every log change.
    pub(crate) version: watch::Sender<u64>,
    pub(crate) cancel: AtomicBool,
}

impl Session {
    pub(crate) fn new(id: String, checkpoint: Arc<CheckpointEntry>, theta: ParameterVector, image: RenderedImage) -> Self {
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            id,
            created_at,
            checkpoint,
            theta,
            image,
            state: Mutex::new(SessionState {
                status: ServiceStatus::Configured,
                selections: Vec::new(),
                trajectory: Vec::new(),
                last_access: Instant::now(),
            }),
            log: Mutex::new(EventLog::default()),
            version: watch::channel(0).0,
            cancel: AtomicBool::new(false),
        }
    }

    pub(crate) fn state(&self) -> MutexGuard<'_, SessionState> {
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        s.last_access = Instant::now();
        s
    }

    pub(crate) fn events(&self) -> MutexGuard<'_, EventLog> {
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn push_frame(&self, json: String) {
        self.events().frames.push(json.into());
        self.version.send_modify(|v| *v += 1);
    }

    pub(crate) fn finish(&self, end: &EndEvent) {
        let json = serde_json::to_string(end).expect("end event serializes");
        self.events().end = Some(json.into());
        self.version.send_modify(|v| *v += 1);
    }

    pub fn status(&self) -> ServiceStatus {
        self.state().status
    }
}
