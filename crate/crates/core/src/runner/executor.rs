//! Execution backends.
//!
//! The coordinator drives an [`Executor`] through three calls: `submit` a
//! job, `poll` it for completion, and `terminate`/`kill` it on
//! cancellation. A batch-scheduler backend implements the same trait by
//! mapping `submit` to job submission, `poll` to a queue query and
//! `terminate`/`kill` to the scheduler's cancel command.

use std::fs::File;
use std::io;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};

/// What to run for one case.
#[derive(Debug, Clone)]
pub struct JobSpec {
    pub case_id: String,
    /// Shell command line with placeholders already substituted.
    pub command: String,
    pub workdir: PathBuf,
    pub stdout: PathBuf,
    pub stderr: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobExit {
    Code(i32),
    Signal(i32),
}

impl JobExit {
    pub fn success(self) -> bool {
        self == JobExit::Code(0)
    }

    pub fn describe(self) -> String {
        match self {
            JobExit::Code(127) => "exit status 127 (command not found)".to_string(),
            JobExit::Code(c) => format!("exit status {c}"),
            JobExit::Signal(s) => format!("terminated by signal {s}"),
        }
    }
}

pub trait Executor {
    type Job;

    fn submit(&mut self, spec: &JobSpec) -> io::Result<Self::Job>;

    /// Non-blocking completion check.
    fn poll(&mut self, job: &mut Self::Job) -> io::Result<Option<JobExit>>;

    /// Polite termination request (SIGTERM or equivalent).
    fn terminate(&mut self, job: &mut Self::Job) -> io::Result<()>;

    /// Forced termination.
    fn kill(&mut self, job: &mut Self::Job) -> io::Result<()>;
}

/// Runs each case as `sh -c <command>` in its own process group so the
/// whole process tree can be signalled.
#[derive(Debug, Default)]
pub struct LocalExecutor;

pub struct LocalJob {
    child: Child,
    pgid: libc::pid_t,
}

fn signal_group(pgid: libc::pid_t, sig: libc::c_int) -> io::Result<()> {
    let rc = unsafe { libc::kill(-pgid, sig) };
    if rc == 0 {
        return Ok(());
    }
    let err = io::Error::last_os_error();
    if err.raw_os_error() == Some(libc::ESRCH) {
        Ok(())
    } else {
        Err(err)
    }
}

impl Executor for LocalExecutor {
    type Job = LocalJob;

    fn submit(&mut self, spec: &JobSpec) -> io::Result<LocalJob> {
        let stdout = File::create(&spec.stdout)?;
        let stderr = File::create(&spec.stderr)?;
        let child = Command::new("sh")
            .arg("-c")
            .arg(&spec.command)
            .current_dir(&spec.workdir)
            .env("LABRUN_CASE_ID", &spec.case_id)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0)
            .spawn()?;
        let pgid = child.id() as libc::pid_t;
        Ok(LocalJob { child, pgid })
    }

    fn poll(&mut self, job: &mut LocalJob) -> io::Result<Option<JobExit>> {
        Ok(job.child.try_wait()?.map(|status| match status.code() {
            Some(code) => JobExit::Code(code),
            None => JobExit::Signal(status.signal().unwrap_or(0)),
        }))
    }

    fn terminate(&mut self, job: &mut LocalJob) -> io::Result<()> {
        signal_group(job.pgid, libc::SIGTERM)
    }

    fn kill(&mut self, job: &mut LocalJob) -> io::Result<()> {
        signal_group(job.pgid, libc::SIGKILL)
    }
}

impl Drop for LocalJob {
    fn drop(&mut self) {
        // Reap the leader and clear out any stragglers left in the group.
        if let Ok(None) = self.child.try_wait() {
            let _ = signal_group(self.pgid, libc::SIGKILL);
            let _ = self.child.wait();
        } else {
            let _ = signal_group(self.pgid, libc::SIGKILL);
        }
    }
}
