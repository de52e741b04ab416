//! The one managed subprocess and its output log.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncRead, BufReader};
use tokio::process::Command;
use tokio::sync::mpsc;

use super::Input;

/// Rotation threshold for node logs.
pub const LOG_ROTATE_BYTES: u64 = 10 * 1024 * 1024;

/// Status reported when the child could not be started at all.
pub const SPAWN_FAILED: i32 = 127;

/// How long output is still read after the child itself has exited.
const PIPE_DRAIN: Duration = Duration::from_millis(500);

/// Returns the event name of a well-formed `EVENT <name>` line.
pub fn parse_event_line(line: &str) -> Option<&str> {
    let name = line.strip_prefix("EVENT ")?;
    let valid = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    valid.then_some(name)
}

/// Exit code as the machine sees it: the code itself, or 128 + signal.
pub fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(code), _) => code,
        (None, Some(sig)) => 128 + sig,
        (None, None) => 255,
    }
}

/// Append-only log with a single rotated predecessor.
#[derive(Debug)]
pub struct LogFile {
    path: PathBuf,
    file: File,
    size: u64,
    limit: u64,
}

impl LogFile {
    pub fn open(path: &Path) -> io::Result<Self> {
        Self::with_limit(path, LOG_ROTATE_BYTES)
    }

    pub fn with_limit(path: &Path, limit: u64) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let size = file.metadata()?.len();
        Ok(LogFile {
            path: path.to_path_buf(),
            file,
            size,
            limit,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_line(&mut self, line: &str) -> io::Result<()> {
        let len = line.len() as u64 + 1;
        if self.size > 0 && self.size + len > self.limit {
            self.rotate()?;
        }
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        self.size += len;
        Ok(())
    }

    fn rotate(&mut self) -> io::Result<()> {
        let mut old = self.path.clone().into_os_string();
        old.push(".1");
        fs::rename(&self.path, &old)?;
        self.file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        self.size = 0;
        Ok(())
    }
}

/// The last `lines` lines of the file at `path`, byte for byte.
pub fn tail(path: &Path, lines: usize) -> io::Result<String> {
    let mut file = File::open(path)?;
    let len = file.metadata()?.len();
    // Read backwards in blocks until enough newlines are seen.
    let mut buf: Vec<u8> = Vec::new();
    let mut pos = len;
    const BLOCK: u64 = 64 * 1024;
    loop {
        let start = pos.saturating_sub(BLOCK);
        let mut block = vec![0; (pos - start) as usize];
        file.seek(SeekFrom::Start(start))?;
        file.read_exact(&mut block)?;
        block.extend_from_slice(&buf);
        buf = block;
        pos = start;
        let body = buf.strip_suffix(b"\n").unwrap_or(&buf);
        if pos == 0 || body.iter().filter(|b| **b == b'\n').count() >= lines {
            break;
        }
    }
    let body_end = if buf.ends_with(b"\n") { buf.len() - 1 } else { buf.len() };
    let mut seen = 0;
    let mut cut = 0;
    for i in (0..body_end).rev() {
        if buf[i] == b'\n' {
            seen += 1;
            if seen == lines {
                cut = i + 1;
                break;
            }
        }
    }
    if lines == 0 {
        cut = buf.len();
    }
    Ok(String::from_utf8_lossy(&buf[cut..]).into_owned())
}

pub type SharedLog = Arc<Mutex<LogFile>>;

fn log_line(log: &SharedLog, line: &str) {
    if let Err(e) = log.lock().expect("log lock").write_line(line) {
        tracing::warn!(error = %e, "cannot write node log");
    }
}

/// A running child. Its waiter delivers exactly one exit per child.
#[derive(Debug)]
pub struct Child {
    pub id: u64,
    pub pid: i32,
    exited: Arc<AtomicBool>,
}

impl Child {
    /// Starts `exec` under `sh` in its own process group.
    pub fn spawn(
        id: u64,
        exec: &str,
        env: &[(&str, &str)],
        log: SharedLog,
        inputs: mpsc::UnboundedSender<Input>,
    ) -> io::Result<Child> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(format!("exec {exec}"))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        for (k, v) in env {
            cmd.env(k, v);
        }
        // The child must not outlive a daemon that dies without cleaning up.
        #[cfg(target_os = "linux")]
        // SAFETY: prctl is async-signal-safe and touches no shared state.
        unsafe {
            cmd.pre_exec(|| {
                if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                    return Err(io::Error::last_os_error());
                }
                Ok(())
            });
        }
        let mut child = cmd.spawn()?;
        let pid = child.id().map(|p| p as i32).unwrap_or(0);
        let exited = Arc::new(AtomicBool::new(false));

        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let out_reader = tokio::spawn(read_stdout(id, stdout, log.clone(), inputs.clone()));
        let err_reader = tokio::spawn(copy_to_log(stderr, log));
        let flag = exited.clone();
        tokio::spawn(async move {
            let code = match child.wait().await {
                Ok(status) => exit_code(status),
                Err(e) => {
                    tracing::error!(error = %e, "waiting for child failed");
                    255
                }
            };
            flag.store(true, Ordering::SeqCst);
            // Every event the child printed is queued before its exit. A
            // grandchild still holding the pipes must not hold up the exit.
            for mut reader in [out_reader, err_reader] {
                if tokio::time::timeout(PIPE_DRAIN, &mut reader).await.is_err() {
                    reader.abort();
                }
            }
            let _ = inputs.send(Input::ChildExit { id, code });
        });
        Ok(Child { id, pid, exited })
    }

    pub fn has_exited(&self) -> bool {
        self.exited.load(Ordering::SeqCst)
    }

    /// Graceful signal to the group now, forceful after `grace` if still alive.
    pub fn kill(&self, grace: Duration) {
        if self.has_exited() {
            return;
        }
        signal_group(self.pid, libc::SIGTERM);
        let (pid, exited) = (self.pid, self.exited.clone());
        tokio::spawn(async move {
            let step = Duration::from_millis(20);
            let mut waited = Duration::ZERO;
            while waited < grace {
                if exited.load(Ordering::SeqCst) {
                    return;
                }
                tokio::time::sleep(step).await;
                waited += step;
            }
            if !exited.load(Ordering::SeqCst) {
                tracing::warn!(pid, "child ignored SIGTERM, sending SIGKILL");
                signal_group(pid, libc::SIGKILL);
            }
        });
    }
}

fn signal_group(pid: i32, sig: libc::c_int) {
    if pid <= 0 {
        return;
    }
    // SAFETY: plain syscall; a stale group id only yields ESRCH.
    unsafe {
        libc::kill(-pid, sig);
    }
}

async fn read_stdout(
    id: u64,
    stdout: impl AsyncRead + Unpin,
    log: SharedLog,
    inputs: mpsc::UnboundedSender<Input>,
) {
    let mut lines = BufReader::new(stdout).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        log_line(&log, &line);
        if let Some(name) = parse_event_line(&line) {
            let _ = inputs.send(Input::ChildEvent {
                id,
                name: name.to_string(),
            });
        }
    }
}

async fn copy_to_log(stream: impl AsyncRead + Unpin, log: SharedLog) {
    let mut lines = BufReader::new(stream).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        log_line(&log, &line);
    }
}
