//! Supervised execution of guest programs: static safety scan, source
//! normalization, child-process execution with a wall-clock limit, and
//! artifact tracking inside a per-session workspace.
//!
//! Workspace layout under the sandbox root:
//!
//! ```text
//! <root>/<session_id>/input/     copy of the task image
//! <root>/<session_id>/out/       guest working directory
//! <root>/<session_id>/artifacts/ archived per-step artifacts
//! <root>/<session_id>/steps/     generated step and runner programs
//! ```

mod artifacts;
pub mod lexer;
mod normalize;
mod scan;
mod session;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::trajectory::{ErrorKind, Observation};

pub use artifacts::{collect_artifacts, snapshot_dir, FileStamp, Snapshot};
pub use normalize::{
    clamp_box, infer_crop_boxes, normalize_guest_program, ClampedBox, CropBox, NormalizeContext,
    NormalizationFailed, PRELUDE_MARKER,
};
pub use scan::{scan_guest_program, BlockReason, SafetyVerdict};
pub use session::{Sandbox, SandboxSession};

/// Marker printed to guest stderr by the clamping helper when the requested
/// box has zero width or height before clamping.
pub const ZERO_AREA_WARNING: &str = "[sandbox] warning: zero-area crop box";
/// Marker printed to guest stderr when clamping collapsed a box and it was
/// padded to one pixel.
pub const DEGENERATE_WARNING: &str = "[sandbox] warning: degenerate crop box padded";
/// Prefix of the stderr message returned for programs rejected by the scan.
pub const BLOCKED_MESSAGE: &str = "execution blocked by sandbox policy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaKind {
    Image,
    Text,
    Other,
}

impl MediaKind {
    pub fn from_path(path: &str) -> Self {
        let ext = path
            .rsplit_once('.')
            .map(|(_, e)| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "jpg" | "jpeg" | "png" | "gif" | "bmp" | "tif" | "tiff" | "webp" => MediaKind::Image,
            "txt" | "csv" | "json" | "md" | "log" | "tsv" => MediaKind::Text,
            _ => MediaKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the sandbox root of the archived copy.
    pub path: String,
    /// Path relative to the guest working directory as the guest wrote it.
    pub name: String,
    pub media_kind: MediaKind,
    pub bytes_size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Ok,
    Timeout,
    SafetyBlocked,
    RuntimeError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResult {
    pub step_index: usize,
    pub stdout: String,
    pub stderr: String,
    pub stdout_truncated: bool,
    pub artifacts: Vec<Artifact>,
    pub wall_time: Duration,
    pub outcome: Outcome,
    pub verdict: SafetyVerdict,
    /// Set when the normalizer could not patch the source and it ran as-is.
    pub normalization_failed: bool,
    pub warnings: Vec<String>,
}

impl SandboxResult {
    pub fn error_kind(&self) -> Option<ErrorKind> {
        match self.outcome {
            Outcome::Ok => None,
            Outcome::Timeout => Some(ErrorKind::Timeout),
            Outcome::SafetyBlocked => Some(ErrorKind::SafetyBlocked),
            Outcome::RuntimeError => Some(ErrorKind::RuntimeError),
        }
    }

    pub fn to_observation(&self, step_index: usize) -> Observation {
        Observation {
            step_index,
            stdout: self.stdout.clone(),
            stderr: self.stderr.clone(),
            artifacts: self.artifacts.iter().map(|a| a.path.clone()).collect(),
            error_kind: self.error_kind(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    pub wall_clock_limit: Duration,
    pub max_stdout_bytes: usize,
    pub max_artifact_bytes: u64,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        Self {
            wall_clock_limit: Duration::from_secs(30),
            max_stdout_bytes: 64 * 1024,
            max_artifact_bytes: 64 * 1024 * 1024,
        }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.wall_clock_limit.is_zero() || self.max_stdout_bytes == 0 || self.max_artifact_bytes == 0 {
            return Err(SandboxError::InvalidLimits);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub root: PathBuf,
    pub interpreter_path: PathBuf,
    pub limits: ExecutionLimits,
    /// Optional guest-side shim appended to the prelude of every program.
    pub shim_path: Option<PathBuf>,
}

impl SandboxConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            interpreter_path: PathBuf::from("python3"),
            limits: ExecutionLimits::default(),
            shim_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("execution limits must be strictly positive")]
    InvalidLimits,
    #[error("invalid session id {0:?}")]
    InvalidSessionId(String),
    #[error("session {0:?} already exists")]
    SessionExists(String),
    #[error("input image {0:?} not found")]
    MissingInput(PathBuf),
    #[error("could not start interpreter {path:?}: {source}")]
    Spawn {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sandbox i/o: {0}")]
    Io(#[from] std::io::Error),
}
