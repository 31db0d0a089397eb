use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use chrono::Utc;

use super::executor::{Executor, JobExit, JobSpec, LocalExecutor};
use super::store::{self, EventLog, StudyLock};
use super::template;
use super::{
    CancelAck, CancelOutcome, CaseState, EventKind, EventRecord, RunnerError, StatusSnapshot,
    StudyRun,
};
use crate::layout::{StudyDir, StudyError};
use crate::paramspace::{CaseRecord, CaseStatus, StudyConfig};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_parallel: usize,
    /// Time between the polite termination signal and the forced kill.
    pub grace: Duration,
    pub poll_interval: Duration,
    /// Reset every case to Pending before running.
    pub reset: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_parallel: thread::available_parallelism().map_or(1, |n| n.get()),
            grace: Duration::from_secs(5),
            poll_interval: Duration::from_millis(20),
            reset: false,
        }
    }
}

enum Control {
    Cancel {
        case_id: String,
        reply: Sender<Result<CancelAck, RunnerError>>,
    },
    Shutdown,
}

/// Handle to a run in progress.
pub struct RunHandle {
    control: Sender<Control>,
    snapshot: Arc<Mutex<StatusSnapshot>>,
    thread: JoinHandle<Result<StudyRun, RunnerError>>,
}

impl RunHandle {
    /// Cancels a case through the coordinator. A Pending case is skipped; a
    /// Running case has its process tree terminated.
    pub fn cancel(&self, case_id: &str) -> Result<CancelAck, RunnerError> {
        let (reply, rx) = mpsc::channel();
        self.control
            .send(Control::Cancel {
                case_id: case_id.to_string(),
                reply,
            })
            .map_err(|_| RunnerError::CoordinatorGone)?;
        rx.recv().map_err(|_| RunnerError::CoordinatorGone)?
    }

    /// Stops the run: pending cases are cancelled and running ones
    /// terminated.
    pub fn shutdown(&self) {
        let _ = self.control.send(Control::Shutdown);
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        self.snapshot.lock().unwrap().clone()
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    pub fn wait(self) -> Result<StudyRun, RunnerError> {
        self.thread.join().expect("run coordinator panicked")
    }
}

/// Runs every Pending case of the study to completion.
pub fn run(study: &StudyDir, options: RunOptions) -> Result<StudyRun, RunnerError> {
    start(study, options)?.wait()
}

pub fn start(study: &StudyDir, options: RunOptions) -> Result<RunHandle, RunnerError> {
    start_with(study, options, LocalExecutor)
}

/// Starts a run on a custom executor backend.
pub fn start_with<E>(
    study: &StudyDir,
    options: RunOptions,
    executor: E,
) -> Result<RunHandle, RunnerError>
where
    E: Executor + Send + 'static,
    E::Job: Send,
{
    if options.max_parallel == 0 {
        return Err(RunnerError::InvalidParallelism);
    }
    let lock = StudyLock::acquire(study)?;
    let config = study.config()?;
    let cases = study.cases()?;

    let mut commands = Vec::with_capacity(cases.len());
    for case in &cases {
        let cmd = template::render(&config.command, &case.params).map_err(|placeholder| {
            RunnerError::UnresolvedPlaceholder {
                case: case.id.clone(),
                placeholder,
                file: "command".to_string(),
            }
        })?;
        commands.push(cmd);
    }

    let mut snapshot = match store::read_status(study) {
        Ok(s)
            if s.cases.len() == cases.len()
                && s.cases.iter().zip(&cases).all(|(a, b)| a.id == b.id) =>
        {
            s
        }
        Ok(_) | Err(StudyError::Io { .. }) => StatusSnapshot::fresh(&config.name, &cases),
        Err(e) => return Err(e.into()),
    };
    for state in &mut snapshot.cases {
        // A Running status without a lock holder is left over from a crash.
        if options.reset || state.status == CaseStatus::Running {
            *state = CaseState::pending(state.id.clone());
        }
    }
    let events = EventLog::open(study)?;
    snapshot.max_parallel = Some(options.max_parallel);
    snapshot.started_at = Some(Utc::now());
    snapshot.finished_at = None;
    snapshot.active = true;
    snapshot.recount();

    let shared = Arc::new(Mutex::new(snapshot.clone()));
    let (tx, rx) = mpsc::channel();
    let coordinator = Coordinator {
        study: study.clone(),
        config,
        cases,
        commands,
        options,
        executor,
        snapshot,
        shared: Arc::clone(&shared),
        log: events,
        emitted: Vec::new(),
        queue: Default::default(),
        running: Vec::new(),
        shutting_down: false,
    };
    let thread = thread::Builder::new()
        .name(format!("labrun-{}", study.name()))
        .spawn(move || {
            let _lock = lock;
            coordinator.drive(rx)
        })
        .expect("spawn coordinator thread");
    Ok(RunHandle {
        control: tx,
        snapshot: shared,
        thread,
    })
}

struct Active<J> {
    index: usize,
    job: J,
    kill_at: Option<Instant>,
    killed: bool,
}

struct Coordinator<E: Executor> {
    study: StudyDir,
    config: StudyConfig,
    cases: Vec<CaseRecord>,
    commands: Vec<String>,
    options: RunOptions,
    executor: E,
    snapshot: StatusSnapshot,
    shared: Arc<Mutex<StatusSnapshot>>,
    log: EventLog,
    emitted: Vec<EventRecord>,
    queue: std::collections::VecDeque<usize>,
    running: Vec<Active<E::Job>>,
    shutting_down: bool,
}

impl<E: Executor> Coordinator<E> {
    fn drive(mut self, control: Receiver<Control>) -> Result<StudyRun, RunnerError> {
        let started_at = self.snapshot.started_at.unwrap_or_else(Utc::now);
        self.queue = (0..self.cases.len())
            .filter(|&i| self.snapshot.cases[i].status == CaseStatus::Pending)
            .collect();
        let detail = format!(
            "{} pending of {} cases, max_parallel={}",
            self.queue.len(),
            self.cases.len(),
            self.options.max_parallel
        );
        self.emit(EventKind::StudyStarted, "", detail)?;
        self.persist()?;

        loop {
            self.handle_file_requests()?;
            self.start_jobs()?;
            self.poll_jobs()?;
            if self.queue.is_empty() && self.running.is_empty() {
                break;
            }
            match control.recv_timeout(self.options.poll_interval) {
                Ok(msg) => self.handle(msg)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => thread::sleep(self.options.poll_interval),
            }
            while let Ok(msg) = control.try_recv() {
                self.handle(msg)?;
            }
        }

        // Requests that arrived after the last case finished are moot.
        let _ = store::take_cancel_requests(&self.study);
        let finished_at = Utc::now();
        let counts = self.snapshot.counts;
        self.emit(
            EventKind::StudyFinished,
            "",
            format!(
                "succeeded={} failed={} cancelled={}",
                counts.succeeded, counts.failed, counts.cancelled
            ),
        )?;
        self.snapshot.finished_at = Some(finished_at);
        self.snapshot.active = false;
        self.persist()?;

        let mut cases = self.cases;
        for (case, state) in cases.iter_mut().zip(&self.snapshot.cases) {
            case.status = state.status;
        }
        Ok(StudyRun {
            study: self.config,
            cases,
            started_at,
            finished_at: Some(finished_at),
            max_parallel: self.options.max_parallel,
            events: self.emitted,
        })
    }

    fn handle(&mut self, msg: Control) -> Result<(), RunnerError> {
        match msg {
            Control::Cancel { case_id, reply } => {
                let result = self.cancel(&case_id);
                let _ = reply.send(result);
            }
            Control::Shutdown => {
                self.shutting_down = true;
                for index in std::mem::take(&mut self.queue) {
                    if self.snapshot.cases[index].status == CaseStatus::Pending {
                        self.finish_cancelled(index, "run shut down before start")?;
                    }
                }
                let ids: Vec<usize> = self.running.iter().map(|a| a.index).collect();
                for index in ids {
                    self.terminate(index);
                }
                self.persist()?;
            }
        }
        Ok(())
    }

    fn handle_file_requests(&mut self) -> Result<(), RunnerError> {
        for id in store::take_cancel_requests(&self.study) {
            match self.cancel(&id) {
                Ok(_) | Err(RunnerError::AlreadyFinished { .. }) => {}
                Err(RunnerError::UnknownCase { case, .. }) => {
                    log::warn!("ignoring cancel request for unknown case {case}")
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn cancel(&mut self, case_id: &str) -> Result<CancelAck, RunnerError> {
        let index = self
            .cases
            .iter()
            .position(|c| c.id.as_str() == case_id)
            .ok_or_else(|| RunnerError::UnknownCase {
                study: self.study.name().to_string(),
                case: case_id.to_string(),
            })?;
        let id = self.cases[index].id.clone();
        let ack = |outcome| CancelAck {
            case_id: id.clone(),
            outcome,
        };
        match self.snapshot.cases[index].status {
            status @ (CaseStatus::Succeeded | CaseStatus::Failed) => {
                Err(RunnerError::AlreadyFinished { case: id, status })
            }
            CaseStatus::Cancelled => Ok(ack(CancelOutcome::Cancelled)),
            CaseStatus::Pending => {
                self.queue.retain(|&i| i != index);
                self.finish_cancelled(index, "cancelled before start")?;
                self.persist()?;
                Ok(ack(CancelOutcome::Cancelled))
            }
            CaseStatus::Running => {
                self.terminate(index);
                Ok(ack(CancelOutcome::Cancelling))
            }
        }
    }

    fn terminate(&mut self, index: usize) {
        let grace = self.options.grace;
        if let Some(active) = self.running.iter_mut().find(|a| a.index == index) {
            if active.kill_at.is_none() {
                if let Err(e) = self.executor.terminate(&mut active.job) {
                    log::warn!("terminate case {}: {e}", self.cases[index].id);
                }
                active.kill_at = Some(Instant::now() + grace);
            }
        }
    }

    fn start_jobs(&mut self) -> Result<(), RunnerError> {
        while !self.shutting_down && self.running.len() < self.options.max_parallel {
            let Some(index) = self.queue.pop_front() else {
                break;
            };
            if self.snapshot.cases[index].status != CaseStatus::Pending {
                continue;
            }
            let case = &self.cases[index];
            let spec = JobSpec {
                case_id: case.id.to_string(),
                command: self.commands[index].clone(),
                workdir: case.dir.clone(),
                stdout: case.dir.join("stdout.log"),
                stderr: case.dir.join("stderr.log"),
            };
            let id = case.id.to_string();
            {
                let state = &mut self.snapshot.cases[index];
                state.status = CaseStatus::Running;
                state.started_at = Some(Utc::now());
                state.finished_at = None;
                state.exit_code = None;
                state.detail.clear();
            }
            self.emit(EventKind::CaseStarted, &id, spec.command.clone())?;
            match self.executor.submit(&spec) {
                Ok(job) => {
                    self.running.push(Active {
                        index,
                        job,
                        kill_at: None,
                        killed: false,
                    });
                    self.persist()?;
                }
                Err(e) => {
                    let detail = format!("failed to start: {e}");
                    let state = &mut self.snapshot.cases[index];
                    state.status = CaseStatus::Failed;
                    state.finished_at = Some(Utc::now());
                    state.detail = detail.clone();
                    self.emit(EventKind::CaseFinished, &id, detail)?;
                    self.persist()?;
                }
            }
        }
        Ok(())
    }

    fn poll_jobs(&mut self) -> Result<(), RunnerError> {
        let now = Instant::now();
        let mut i = 0;
        while i < self.running.len() {
            let active = &mut self.running[i];
            let exit = match self.executor.poll(&mut active.job) {
                Ok(exit) => exit,
                Err(e) => {
                    log::warn!("poll case {}: {e}", self.cases[active.index].id);
                    None
                }
            };
            match exit {
                Some(exit) => {
                    let active = self.running.swap_remove(i);
                    let cancelled = active.kill_at.is_some();
                    drop(active.job);
                    self.finish(active.index, exit, cancelled)?;
                }
                None => {
                    if let Some(deadline) = active.kill_at {
                        if !active.killed && now >= deadline {
                            if let Err(e) = self.executor.kill(&mut active.job) {
                                log::warn!("kill case {}: {e}", self.cases[active.index].id);
                            }
                            active.killed = true;
                        }
                    }
                    i += 1;
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, index: usize, exit: JobExit, cancelled: bool) -> Result<(), RunnerError> {
        let id = self.cases[index].id.to_string();
        if cancelled {
            let state = &mut self.snapshot.cases[index];
            if let JobExit::Code(c) = exit {
                state.exit_code = Some(c);
            }
            return self
                .finish_cancelled(index, format!("terminated ({})", exit.describe()))
                .and_then(|_| self.persist());
        }
        let state = &mut self.snapshot.cases[index];
        state.status = if exit.success() {
            CaseStatus::Succeeded
        } else {
            CaseStatus::Failed
        };
        state.exit_code = match exit {
            JobExit::Code(c) => Some(c),
            JobExit::Signal(_) => None,
        };
        state.detail = exit.describe();
        state.finished_at = Some(Utc::now());
        self.emit(EventKind::CaseFinished, &id, exit.describe())?;
        self.persist()
    }

    fn finish_cancelled(
        &mut self,
        index: usize,
        detail: impl Into<String>,
    ) -> Result<(), RunnerError> {
        let detail = detail.into();
        let id = self.cases[index].id.to_string();
        let state = &mut self.snapshot.cases[index];
        state.status = CaseStatus::Cancelled;
        state.finished_at = Some(Utc::now());
        state.detail = detail.clone();
        self.emit(EventKind::CaseCancelled, &id, detail)?;
        Ok(())
    }

    fn emit(
        &mut self,
        kind: EventKind,
        case_id: &str,
        detail: impl Into<String>,
    ) -> Result<(), RunnerError> {
        let record = self.log.append(kind, case_id, detail)?;
        self.snapshot.latest_seq = record.seq;
        self.emitted.push(record);
        Ok(())
    }

    fn persist(&mut self) -> Result<(), RunnerError> {
        self.snapshot.recount();
        store::write_status(&self.study, &self.snapshot)?;
        *self.shared.lock().unwrap() = self.snapshot.clone();
        Ok(())
    }
}
