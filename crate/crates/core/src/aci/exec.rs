use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::pty::{self, ReadOutcome};
use super::scope::scope_guard;
use super::{
    AciError, CommandBody, ExitCode, ExtractedCommand, ScriptStep, ToolMode, ToolRegistry, ToolResult,
    ToolSpec, INTERACTIVE_STEP_CAP,
};
use crate::text::{escape_binary, truncate_bytes};

const TERM_GRACE: Duration = Duration::from_millis(500);
const POLL: Duration = Duration::from_millis(5);

/// What [`execute`] needs beyond the command itself.
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub scoped_targets: Vec<String>,
    pub local_ip: Option<String>,
    pub dry_run: bool,
}

/// Scope check, then dry-run recording or real execution.
pub fn execute(cmd: &ExtractedCommand, registry: &ToolRegistry, opts: &ExecOptions) -> Result<ToolResult, AciError> {
    let spec = registry.get(&cmd.tool).ok_or_else(|| AciError::InvalidTool {
        name: cmd.tool.clone(),
        message: "not registered".into(),
    })?;
    cmd.check_against(spec)?;
    if let Err(v) = scope_guard(cmd, &opts.scoped_targets, opts.local_ip.as_deref()) {
        tracing::warn!(tool = %cmd.tool, "scope guard blocked command: {v}");
        return Ok(ToolResult::blocked(cmd, &v));
    }
    if opts.dry_run {
        return Ok(ToolResult::dry_run(cmd));
    }
    match spec.mode {
        ToolMode::Static => execute_static(cmd, spec),
        ToolMode::Interactive => execute_interactive(cmd, spec),
    }
}

fn spawn(command: &mut Command, spec: &ToolSpec) -> Result<Child, AciError> {
    command.spawn().map_err(|e| match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => AciError::BinaryMissing(spec.binary_path.clone()),
        _ => AciError::Io(e),
    })
}

fn exit_code(status: ExitStatus) -> ExitCode {
    match status.code() {
        Some(c) => ExitCode::Code(c),
        None => {
            debug_assert!(status.signal().is_some());
            ExitCode::Killed
        }
    }
}

fn finish_transcript(bytes: &[u8], cap: usize) -> (String, bool) {
    let truncated = bytes.len() > cap;
    let mut text = escape_binary(&bytes[..bytes.len().min(cap)]);
    truncate_bytes(&mut text, cap);
    (text, truncated)
}

/// Runs an argv command in its own process group with combined output.
pub fn execute_static(cmd: &ExtractedCommand, spec: &ToolSpec) -> Result<ToolResult, AciError> {
    let CommandBody::Argv(args) = &cmd.body else {
        return Err(AciError::ModeMismatch {
            tool: cmd.tool.clone(),
            mode: spec.mode,
        });
    };
    if args.is_empty() {
        return Err(AciError::EmptyCommand(cmd.tool.clone()));
    }
    let timeout = cmd.timeout(spec);
    let (mut reader, writer) = io::pipe()?;
    let mut command = Command::new(&spec.binary_path);
    command
        .args(&spec.base_args)
        .args(args)
        .stdin(Stdio::null())
        .stdout(writer.try_clone()?)
        .stderr(writer)
        .process_group(0);
    let start = Instant::now();
    let child = spawn(&mut command, spec);
    // The command holds the write ends; drop them so EOF can arrive.
    drop(command);
    let mut child = child?;
    // Keep one byte past the cap to tell truncation apart.
    let limit = spec.max_output + 1;
    let drain = thread::spawn(move || -> io::Result<Vec<u8>> {
        let mut kept = Vec::new();
        let mut chunk = [0u8; 8192];
        loop {
            let n = reader.read(&mut chunk)?;
            if n == 0 {
                return Ok(kept);
            }
            let room = limit.saturating_sub(kept.len());
            kept.extend_from_slice(&chunk[..n.min(room)]);
        }
    });
    let deadline = start + timeout;
    let mut timed_out = false;
    while !pty::has_exited(&child)? {
        if Instant::now() >= deadline {
            timed_out = true;
            break;
        }
        thread::sleep(POLL);
    }
    let status = pty::shut_down(&mut child, TERM_GRACE)?;
    let duration = start.elapsed();
    let bytes = drain.join().map_err(|_| io::Error::other("output reader panicked"))??;
    let (transcript, truncated) = finish_transcript(&bytes, spec.max_output);
    Ok(ToolResult {
        tool: cmd.tool.clone(),
        command: cmd.display(),
        transcript,
        exit_code: if timed_out { ExitCode::Timeout } else { exit_code(status) },
        duration,
        truncated,
        pattern_timeouts: Vec::new(),
    })
}

enum Settle {
    Matched,
    Quiet,
    StepCap,
    Deadline,
    Closed,
}

struct Session {
    master: std::fs::File,
    transcript: Vec<u8>,
    closed: bool,
}

impl Session {
    /// Reads until `pattern` shows up in output after `mark`, the output
    /// stays silent for `quiet`, or a cap is hit.
    fn settle(
        &mut self,
        pattern: Option<&str>,
        mark: usize,
        quiet: Duration,
        step_deadline: Instant,
        deadline: Instant,
    ) -> io::Result<Settle> {
        let mut last_output = Instant::now();
        loop {
            if let Some(p) = pattern {
                if String::from_utf8_lossy(&self.transcript[mark..]).contains(p) {
                    return Ok(Settle::Matched);
                }
            }
            if self.closed {
                return Ok(Settle::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Settle::Deadline);
            }
            if now >= step_deadline {
                return Ok(Settle::StepCap);
            }
            let quiet_end = last_output + quiet;
            if now >= quiet_end {
                return Ok(Settle::Quiet);
            }
            let wait = quiet_end.min(step_deadline).min(deadline) - now;
            match pty::read_some(&mut self.master, &mut self.transcript, wait)? {
                ReadOutcome::Data => last_output = Instant::now(),
                ReadOutcome::Idle => {}
                ReadOutcome::Closed => self.closed = true,
            }
        }
    }
}

/// Drives an interactive tool on a pseudo-terminal, one script line at a
/// time. Sent lines are written into the transcript where they were sent.
pub fn execute_interactive(cmd: &ExtractedCommand, spec: &ToolSpec) -> Result<ToolResult, AciError> {
    let CommandBody::Script(steps) = &cmd.body else {
        return Err(AciError::ModeMismatch {
            tool: cmd.tool.clone(),
            mode: spec.mode,
        });
    };
    if steps.is_empty() {
        return Err(AciError::EmptyCommand(cmd.tool.clone()));
    }
    let timeout = cmd.timeout(spec);
    let pty::Pty { master, slave } = pty::open()?;
    let mut command = Command::new(&spec.binary_path);
    command.args(&spec.base_args);
    pty::attach(&mut command, &slave)?;
    let start = Instant::now();
    let child = spawn(&mut command, spec);
    drop(command);
    drop(slave);
    let mut child = child?;
    let deadline = start + timeout;
    let mut session = Session {
        master,
        transcript: Vec::new(),
        closed: false,
    };
    let run = drive(&mut session, steps, spec, deadline);
    // Ask politely with end-of-file, then escalate.
    if !session.closed {
        let _ = std::io::Write::write_all(&mut session.master, b"\x04");
    }
    let exited = pty::wait_exit(&child, TERM_GRACE)?;
    let status = pty::shut_down(&mut child, TERM_GRACE)?;
    while !session.closed {
        match pty::read_some(&mut session.master, &mut session.transcript, Duration::from_millis(50))? {
            ReadOutcome::Closed | ReadOutcome::Idle => break,
            ReadOutcome::Data => {}
        }
    }
    let (timed_out, pattern_timeouts) = run?;
    let (transcript, truncated) = finish_transcript(&session.transcript, spec.max_output);
    let exit_code = if timed_out {
        ExitCode::Timeout
    } else if exited {
        exit_code(status)
    } else {
        ExitCode::Killed
    };
    Ok(ToolResult {
        tool: cmd.tool.clone(),
        command: cmd.display(),
        transcript,
        exit_code,
        duration: start.elapsed(),
        truncated,
        pattern_timeouts,
    })
}

fn drive(session: &mut Session, steps: &[ScriptStep], spec: &ToolSpec, deadline: Instant) -> io::Result<(bool, Vec<usize>)> {
    let mut pattern_timeouts = Vec::new();
    let step_deadline = Instant::now() + INTERACTIVE_STEP_CAP;
    if let Settle::Deadline = session.settle(None, 0, spec.quiet_period, step_deadline, deadline)? {
        return Ok((true, pattern_timeouts));
    }
    for (i, step) in steps.iter().enumerate() {
        if session.closed {
            break;
        }
        session.transcript.extend_from_slice(step.send.as_bytes());
        session.transcript.push(b'\n');
        let mark = session.transcript.len();
        if let Err(e) = pty::write_line(&mut session.master, &step.send) {
            if e.raw_os_error() == Some(libc::EIO) {
                session.closed = true;
                break;
            }
            return Err(e);
        }
        let step_deadline = Instant::now() + INTERACTIVE_STEP_CAP;
        let outcome = session.settle(step.await_pattern.as_deref(), mark, spec.quiet_period, step_deadline, deadline)?;
        if let Some(p) = &step.await_pattern {
            if !matches!(outcome, Settle::Matched) {
                pattern_timeouts.push(i);
                if session.transcript.last().is_some_and(|b| *b != b'\n') {
                    session.transcript.push(b'\n');
                }
                session
                    .transcript
                    .extend_from_slice(format!("[pattern timeout: step {} never printed {p:?}]\n", i + 1).as_bytes());
            }
        }
        if let Settle::Deadline = outcome {
            return Ok((true, pattern_timeouts));
        }
    }
    Ok((false, pattern_timeouts))
}
