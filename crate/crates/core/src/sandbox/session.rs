use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use super::artifacts::{collect_artifacts, snapshot_dir};
use super::normalize::{normalize_guest_program, py_str, render_prelude, NormalizeContext};
use super::scan::scan_guest_program;
use super::{ExecutionLimits, Outcome, SandboxConfig, SandboxError, SandboxResult, BLOCKED_MESSAGE};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

/// Shared supervisor. Cheap to share across rollout workers; each rollout
/// opens its own [`SandboxSession`].
#[derive(Debug)]
pub struct Sandbox {
    config: SandboxConfig,
    shim: Option<String>,
    spawned: AtomicU64,
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        config.limits.validate()?;
        fs::create_dir_all(&config.root)?;
        let shim = match &config.shim_path {
            Some(p) => Some(fs::read_to_string(p)?),
            None => None,
        };
        Ok(Self {
            config,
            shim,
            spawned: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.config.root
    }

    /// Number of child processes started so far.
    pub fn spawn_count(&self) -> u64 {
        self.spawned.load(Ordering::SeqCst)
    }

    /// Create `<root>/<session_id>/` and copy the input image into `input/`
    /// under `declared_name`, the filename the policy is told about.
    pub fn open_session(
        &self,
        session_id: &str,
        input_image: &Path,
        declared_name: &str,
    ) -> Result<SandboxSession, SandboxError> {
        let valid_id = !session_id.is_empty()
            && session_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !session_id.starts_with('.');
        if !valid_id {
            return Err(SandboxError::InvalidSessionId(session_id.to_string()));
        }
        if !input_image.is_file() {
            return Err(SandboxError::MissingInput(input_image.to_path_buf()));
        }
        let declared = Path::new(declared_name)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image.png".to_string());
        let root = fs::canonicalize(&self.config.root)?;
        let workspace = root.join(session_id);
        match fs::create_dir(&workspace) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(SandboxError::SessionExists(session_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        for sub in ["input", "out", "artifacts", "steps", "replay", "home"] {
            fs::create_dir(workspace.join(sub))?;
        }
        let input_path = workspace.join("input").join(&declared);
        fs::copy(input_image, &input_path)?;
        Ok(SandboxSession {
            session_id: session_id.to_string(),
            root,
            workspace_root: workspace,
            input_image: input_path,
            declared_image: declared,
            accumulated: Vec::new(),
            step_counter: 0,
        })
    }

    /// Scan, normalize and run one guest program. Guest failures are reported
    /// through [`SandboxResult::outcome`]; `Err` means the supervisor itself
    /// failed (interpreter missing, workspace i/o).
    pub fn execute_step(
        &self,
        session: &mut SandboxSession,
        src: &str,
        limits: &ExecutionLimits,
    ) -> Result<SandboxResult, SandboxError> {
        limits.validate()?;
        session.step_counter += 1;
        let step = session.step_counter;
        let verdict = scan_guest_program(src);
        if !verdict.allowed {
            let reasons: Vec<String> = verdict.blocked_reasons.iter().map(|r| format!("{r:?}")).collect();
            return Ok(SandboxResult {
                step_index: step,
                stdout: String::new(),
                stderr: format!("{BLOCKED_MESSAGE}: {}", reasons.join(", ")),
                stdout_truncated: false,
                artifacts: Vec::new(),
                wall_time: Duration::ZERO,
                outcome: Outcome::SafetyBlocked,
                verdict,
                normalization_failed: false,
                warnings: Vec::new(),
            });
        }

        let ctx = NormalizeContext {
            declared_image: session.declared_image.clone(),
            input_path: session.input_image.to_string_lossy().into_owned(),
        };
        let (body, normalization_failed) = match normalize_guest_program(src, &ctx) {
            Ok(b) => (b, false),
            Err(_) => (src.to_string(), true),
        };
        let steps_dir = session.workspace_root.join("steps");
        let step_file = steps_dir.join(format!("step_{step}.py"));
        fs::write(&step_file, &body)?;
        let runner = steps_dir.join(format!("run_{step}.py"));
        fs::write(&runner, self.compose_program(session, step, &step_file))?;

        let replay = session.workspace_root.join("replay");
        fs::remove_dir_all(&replay)?;
        fs::create_dir(&replay)?;

        let out_dir = session.out_dir();
        let before = snapshot_dir(&out_dir)?;
        let home = session.workspace_root.join("home");
        let mut cmd = Command::new(&self.config.interpreter_path);
        cmd.arg("-u")
            .arg("-I")
            .arg("-B")
            .arg(&runner)
            .current_dir(&out_dir)
            .env_clear()
            .env("HOME", &home)
            .env("MPLBACKEND", "Agg")
            .env("MPLCONFIGDIR", &home)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(path) = std::env::var_os("PATH") {
            cmd.env("PATH", path);
        }
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn {
            path: self.config.interpreter_path.clone(),
            source,
        })?;
        self.spawned.fetch_add(1, Ordering::SeqCst);
        let out_reader = capture(child.stdout.take().expect("piped"), limits.max_stdout_bytes);
        let err_reader = capture(child.stderr.take().expect("piped"), limits.max_stdout_bytes);
        let (timed_out, success) = wait_with_deadline(&mut child, limits.wall_clock_limit)?;
        let wall_time = started.elapsed();
        let (stdout, stdout_truncated) = out_reader.join().unwrap_or_default();
        let (stderr, _) = err_reader.join().unwrap_or_default();

        let after = snapshot_dir(&out_dir)?;
        let mut warnings = Vec::new();
        let mut artifacts = Vec::new();
        for mut a in collect_artifacts(&before, &after) {
            if a.bytes_size > limits.max_artifact_bytes {
                warnings.push(format!("artifact {} exceeds {} bytes; not archived", a.name, limits.max_artifact_bytes));
                continue;
            }
            let archived = format!("step{step}_{}", a.name.replace('/', "_"));
            fs::copy(out_dir.join(&a.name), session.workspace_root.join("artifacts").join(&archived))?;
            a.path = format!("{}/artifacts/{archived}", session.session_id);
            artifacts.push(a);
        }
        if normalization_failed {
            warnings.push("normalization failed; source executed as-is".to_string());
        }

        let outcome = if timed_out {
            Outcome::Timeout
        } else if success {
            Outcome::Ok
        } else {
            Outcome::RuntimeError
        };
        if outcome == Outcome::Ok {
            session.accumulated.push(step_file);
        }
        Ok(SandboxResult {
            step_index: step,
            stdout,
            stderr,
            stdout_truncated,
            artifacts,
            wall_time,
            outcome,
            verdict,
            normalization_failed,
            warnings,
        })
    }

    /// Runner program: prelude once, silent replay of earlier successful
    /// steps, then the current step with the runner frame cut from tracebacks.
    fn compose_program(&self, session: &SandboxSession, step: usize, step_file: &Path) -> String {
        let mut p = render_prelude(
            step,
            &session.out_dir().to_string_lossy(),
            &session.input_image.to_string_lossy(),
            self.shim.as_deref(),
        );
        if !session.accumulated.is_empty() {
            let files: Vec<String> = session
                .accumulated
                .iter()
                .map(|f| py_str(&f.to_string_lossy()))
                .collect();
            p.push_str(&format!(
                r#"_sandbox_replaying = True
_sandbox_saved = (_sandbox_sys.stdout, _sandbox_sys.stderr, _sandbox_os.getcwd())
_sandbox_sys.stdout = _sandbox_io.StringIO()
_sandbox_sys.stderr = _sandbox_io.StringIO()
_sandbox_os.chdir({replay})
try:
    for _sandbox_f in [{files}]:
        with open(_sandbox_f) as _sandbox_h:
            exec(compile(_sandbox_h.read(), _sandbox_f, "exec"))
except BaseException:
    pass
finally:
    _sandbox_sys.stdout, _sandbox_sys.stderr = _sandbox_saved[0], _sandbox_saved[1]
    _sandbox_os.chdir(_sandbox_saved[2])
    _sandbox_replaying = False
"#,
                replay = py_str(&session.workspace_root.join("replay").to_string_lossy()),
                files = files.join(", "),
            ));
        }
        p.push_str(&format!(
            r#"with open({f}) as _sandbox_h:
    _sandbox_code = compile(_sandbox_h.read(), {f}, "exec")
try:
    exec(_sandbox_code)
except SystemExit:
    raise
except BaseException as _sandbox_e:
    import traceback as _sandbox_tb
    _sandbox_tb.print_exception(type(_sandbox_e), _sandbox_e, _sandbox_e.__traceback__.tb_next)
    _sandbox_sys.exit(1)
"#,
            f = py_str(&step_file.to_string_lossy()),
        ));
        p
    }
}

fn capture<R: Read + Send + 'static>(mut pipe: R, cap: usize) -> thread::JoinHandle<(String, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        let mut s = String::from_utf8_lossy(&kept).into_owned();
        // a cut multi-byte sequence decodes to a replacement char; drop it
        if truncated && s.ends_with('\u{FFFD}') {
            s.pop();
        }
        (s, truncated)
    })
}

/// Returns (timed_out, exited_successfully).
fn wait_with_deadline(child: &mut Child, limit: Duration) -> std::io::Result<(bool, bool)> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((false, status.success()));
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            child.wait()?;
            return Ok((true, false));
        }
        thread::sleep(POLL_INTERVAL);
    }
}

/// One trajectory's workspace. Steps run strictly in order.
#[derive(Debug)]
pub struct SandboxSession {
    session_id: String,
    root: PathBuf,
    workspace_root: PathBuf,
    input_image: PathBuf,
    declared_image: String,
    accumulated: Vec<PathBuf>,
    step_counter: usize,
}

impl SandboxSession {
    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    /// Sandbox root that artifact paths are relative to.
    pub fn sandbox_root(&self) -> &Path {
        &self.root
    }

    pub fn workspace_root(&self) -> &Path {
        &self.workspace_root
    }

    pub fn out_dir(&self) -> PathBuf {
        self.workspace_root.join("out")
    }

    pub fn input_image(&self) -> &Path {
        &self.input_image
    }

    pub fn declared_image(&self) -> &str {
        &self.declared_image
    }

    pub fn step_counter(&self) -> usize {
        self.step_counter
    }

    /// Number of earlier steps replayed before the next one.
    pub fn replayed_steps(&self) -> usize {
        self.accumulated.len()
    }

    /// Absolute path of an artifact reference.
    pub fn resolve(&self, artifact_path: &str) -> PathBuf {
        self.root.join(artifact_path)
    }
}
