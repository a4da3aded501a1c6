//! Pseudo-terminal plumbing and process-group signalling.

use std::fs::File;
use std::io::{self, Read, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

pub(super) struct Pty {
    pub master: File,
    pub slave: OwnedFd,
}

/// Opens a pty pair with echo and output post-processing disabled, so the
/// transcript holds exactly what the tool wrote.
pub(super) fn open() -> io::Result<Pty> {
    let mut master: libc::c_int = -1;
    let mut slave: libc::c_int = -1;
    // SAFETY: out-pointers are valid; name/termios/winsize may be null.
    let rc = unsafe {
        libc::openpty(
            &mut master,
            &mut slave,
            std::ptr::null_mut(),
            std::ptr::null(),
            std::ptr::null(),
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: openpty returned two fresh descriptors we now own.
    let (master, slave) = unsafe { (OwnedFd::from_raw_fd(master), OwnedFd::from_raw_fd(slave)) };
    // SAFETY: plain fcntl/termios calls on descriptors owned above.
    unsafe {
        if libc::fcntl(master.as_raw_fd(), libc::F_SETFD, libc::FD_CLOEXEC) != 0 {
            return Err(io::Error::last_os_error());
        }
        let mut t: libc::termios = std::mem::zeroed();
        if libc::tcgetattr(slave.as_raw_fd(), &mut t) != 0 {
            return Err(io::Error::last_os_error());
        }
        t.c_lflag &= !(libc::ECHO | libc::ECHONL);
        t.c_oflag &= !libc::OPOST;
        if libc::tcsetattr(slave.as_raw_fd(), libc::TCSANOW, &t) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(Pty {
        master: File::from(master),
        slave,
    })
}

/// Makes the child a session leader with the pty as controlling terminal.
pub(super) fn attach(command: &mut Command, slave: &OwnedFd) -> io::Result<()> {
    command
        .stdin(Stdio::from(slave.try_clone()?))
        .stdout(Stdio::from(slave.try_clone()?))
        .stderr(Stdio::from(slave.try_clone()?));
    // SAFETY: only async-signal-safe calls between fork and exec.
    unsafe {
        command.pre_exec(|| {
            if libc::setsid() < 0 {
                return Err(io::Error::last_os_error());
            }
            if libc::ioctl(0, libc::TIOCSCTTY as _, 0) < 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
    Ok(())
}

pub(super) enum ReadOutcome {
    Data,
    Idle,
    Closed,
}

/// Waits up to `timeout` for output and appends it to `buf`.
pub(super) fn read_some(master: &mut File, buf: &mut Vec<u8>, timeout: Duration) -> io::Result<ReadOutcome> {
    let mut pfd = libc::pollfd {
        fd: master.as_raw_fd(),
        events: libc::POLLIN,
        revents: 0,
    };
    let ms = timeout.as_millis().min(i32::MAX as u128) as libc::c_int;
    // SAFETY: one valid pollfd.
    let rc = unsafe { libc::poll(&mut pfd, 1, ms) };
    if rc < 0 {
        let e = io::Error::last_os_error();
        return if e.kind() == io::ErrorKind::Interrupted {
            Ok(ReadOutcome::Idle)
        } else {
            Err(e)
        };
    }
    if rc == 0 {
        return Ok(ReadOutcome::Idle);
    }
    let mut chunk = [0u8; 8192];
    match master.read(&mut chunk) {
        Ok(0) => Ok(ReadOutcome::Closed),
        Ok(n) => {
            buf.extend_from_slice(&chunk[..n]);
            Ok(ReadOutcome::Data)
        }
        // Linux reports EIO once the slave side is closed.
        Err(e) if e.raw_os_error() == Some(libc::EIO) => Ok(ReadOutcome::Closed),
        Err(e) if e.kind() == io::ErrorKind::Interrupted => Ok(ReadOutcome::Idle),
        Err(e) => Err(e),
    }
}

pub(super) fn write_line(master: &mut File, line: &str) -> io::Result<()> {
    master.write_all(line.as_bytes())?;
    master.write_all(b"\n")?;
    master.flush()
}

pub(super) fn signal_group(pgid: u32, signal: libc::c_int) {
    // SAFETY: killpg has no memory-safety preconditions.
    unsafe {
        libc::killpg(pgid as libc::pid_t, signal);
    }
}

/// Non-reaping exit check, so the zombie keeps the group id reserved until
/// the rest of the group has been signalled.
pub(super) fn has_exited(child: &Child) -> io::Result<bool> {
    // SAFETY: siginfo is plain data; waitid writes into it.
    unsafe {
        let mut info: libc::siginfo_t = std::mem::zeroed();
        let rc = libc::waitid(
            libc::P_PID,
            child.id() as libc::id_t,
            &mut info,
            libc::WEXITED | libc::WNOHANG | libc::WNOWAIT,
        );
        if rc != 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(info.si_pid() != 0)
    }
}

pub(super) fn wait_exit(child: &Child, limit: Duration) -> io::Result<bool> {
    let deadline = Instant::now() + limit;
    loop {
        if has_exited(child)? {
            return Ok(true);
        }
        if Instant::now() >= deadline {
            return Ok(false);
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Terminate, then kill after `grace`. The leader is reaped afterwards.
pub(super) fn shut_down(child: &mut Child, grace: Duration) -> io::Result<ExitStatus> {
    let pgid = child.id();
    if !has_exited(child)? {
        signal_group(pgid, libc::SIGTERM);
        if !wait_exit(child, grace)? {
            signal_group(pgid, libc::SIGKILL);
        }
    }
    signal_group(pgid, libc::SIGKILL);
    child.wait()
}
