//! Resource-quota task scheduler.
//!
//! A single logical state machine over a device inventory and per-account
//! caps. Admission is fail-fast for requests that can never fit and strict
//! FIFO otherwise: a queued task blocks everything behind it, with no
//! backfill. Time is supplied by the caller, so the event trace is a pure
//! function of the call sequence.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceRequest {
    #[serde(default)]
    pub cpu_cores: u32,
    #[serde(default)]
    pub gpus: u32,
    #[serde(default)]
    pub mem_mb: u64,
}

impl ResourceRequest {
    pub const ZERO: ResourceRequest = ResourceRequest {
        cpu_cores: 0,
        gpus: 0,
        mem_mb: 0,
    };

    pub fn new(cpu_cores: u32, gpus: u32, mem_mb: u64) -> Self {
        ResourceRequest {
            cpu_cores,
            gpus,
            mem_mb,
        }
    }

    /// Componentwise `self <= other`.
    pub fn fits_within(&self, other: &ResourceRequest) -> bool {
        self.cpu_cores <= other.cpu_cores && self.gpus <= other.gpus && self.mem_mb <= other.mem_mb
    }

    pub fn plus(&self, other: &ResourceRequest) -> ResourceRequest {
        ResourceRequest {
            cpu_cores: self.cpu_cores + other.cpu_cores,
            gpus: self.gpus + other.gpus,
            mem_mb: self.mem_mb + other.mem_mb,
        }
    }

    /// Componentwise subtraction; panics on underflow, which would mean the
    /// books are corrupt.
    pub fn minus(&self, other: &ResourceRequest) -> ResourceRequest {
        ResourceRequest {
            cpu_cores: self.cpu_cores.checked_sub(other.cpu_cores).expect("cpu underflow"),
            gpus: self.gpus.checked_sub(other.gpus).expect("gpu underflow"),
            mem_mb: self.mem_mb.checked_sub(other.mem_mb).expect("mem underflow"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub total: ResourceRequest,
    pub gpu_ids: Vec<String>,
}

impl Inventory {
    /// Inventory whose GPUs are named `"0"`, `"1"`, ...
    pub fn with_indexed_gpus(cpu_cores: u32, gpus: u32, mem_mb: u64) -> Inventory {
        Inventory {
            total: ResourceRequest::new(cpu_cores, gpus, mem_mb),
            gpu_ids: (0..gpus).map(|i| alloc::format!("{i}")).collect(),
        }
    }

    pub fn check(&self) -> Result<(), SchedulerError> {
        let distinct: BTreeSet<&String> = self.gpu_ids.iter().collect();
        if self.gpu_ids.len() != self.total.gpus as usize || distinct.len() != self.gpu_ids.len() {
            return Err(SchedulerError::InvalidInventory);
        }
        Ok(())
    }
}

pub type TaskId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub request: ResourceRequest,
    pub gpu_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    Unsatisfiable,
    Interrupted,
    Execution(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail")]
pub enum TaskState {
    Pending,
    Queued,
    Running(Allocation),
    Succeeded,
    Failed(FailureReason),
    Killed,
}

impl TaskState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Succeeded | TaskState::Failed(_) | TaskState::Killed)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskState::Pending => "Pending",
            TaskState::Queued => "Queued",
            TaskState::Running(_) => "Running",
            TaskState::Succeeded => "Succeeded",
            TaskState::Failed(_) => "Failed",
            TaskState::Killed => "Killed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub account: String,
    pub pipeline_hash: String,
    pub request: ResourceRequest,
    pub state: TaskState,
    pub submitted_at: u64,
    #[serde(default)]
    pub started_at: Option<u64>,
    #[serde(default)]
    pub ended_at: Option<u64>,
}

/// How a running task ended on its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    Succeeded,
    Failed(FailureReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Submitted,
    Started,
    Completed,
    Failed,
    Killed,
    Queued,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerEvent {
    pub ts: u64,
    pub event: EventKind,
    pub task_id: TaskId,
    pub account: String,
    pub request: ResourceRequest,
    pub free_after: ResourceRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {0} is already terminal")]
    AlreadyTerminal(TaskId),
    #[error("task {0} is not running")]
    NotRunning(TaskId),
    #[error("inventory gpu_ids must be distinct and match total.gpus")]
    InvalidInventory,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    inventory: Inventory,
    quotas: BTreeMap<String, ResourceRequest>,
    tasks: BTreeMap<TaskId, Task>,
    queue: VecDeque<TaskId>,
    free: ResourceRequest,
    free_gpus: BTreeSet<usize>,
    usage: BTreeMap<String, ResourceRequest>,
    events: Vec<SchedulerEvent>,
    next_id: TaskId,
}

impl Scheduler {
    pub fn new(
        inventory: Inventory,
        quotas: BTreeMap<String, ResourceRequest>,
    ) -> Result<Scheduler, SchedulerError> {
        inventory.check()?;
        Ok(Scheduler {
            free: inventory.total,
            free_gpus: (0..inventory.gpu_ids.len()).collect(),
            inventory,
            quotas,
            tasks: BTreeMap::new(),
            queue: VecDeque::new(),
            usage: BTreeMap::new(),
            events: Vec::new(),
            next_id: 1,
        })
    }

    /// Rebuilds a scheduler from persisted tasks. Tasks that were running
    /// when the previous process died become `Failed(Interrupted)`, then the
    /// queue is rescanned so their successors can start.
    pub fn restore(
        inventory: Inventory,
        quotas: BTreeMap<String, ResourceRequest>,
        tasks: Vec<Task>,
        ts: u64,
    ) -> Result<(Scheduler, Vec<TaskId>, Vec<TaskId>), SchedulerError> {
        let mut s = Scheduler::new(inventory, quotas)?;
        let mut interrupted = Vec::new();
        let mut waiting = Vec::new();
        for mut task in tasks {
            s.next_id = s.next_id.max(task.task_id + 1);
            match task.state {
                TaskState::Running(_) => {
                    task.state = TaskState::Failed(FailureReason::Interrupted);
                    task.ended_at = Some(ts);
                    interrupted.push(task.task_id);
                }
                TaskState::Pending | TaskState::Queued => {
                    task.state = TaskState::Queued;
                    waiting.push((task.submitted_at, task.task_id));
                }
                _ => {}
            }
            s.tasks.insert(task.task_id, task);
        }
        for &id in &interrupted {
            s.emit(ts, EventKind::Failed, id);
        }
        waiting.sort();
        s.queue = waiting.into_iter().map(|(_, id)| id).collect();
        let started = s.drain_queue(ts);
        Ok((s, interrupted, started))
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn quotas(&self) -> &BTreeMap<String, ResourceRequest> {
        &self.quotas
    }

    pub fn free(&self) -> ResourceRequest {
        self.free
    }

    pub fn free_gpu_ids(&self) -> Vec<&str> {
        self.free_gpus
            .iter()
            .map(|&i| self.inventory.gpu_ids[i].as_str())
            .collect()
    }

    pub fn usage(&self, account: &str) -> ResourceRequest {
        self.usage.get(account).copied().unwrap_or_default()
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn queue(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.queue.iter().copied()
    }

    pub fn events(&self) -> &[SchedulerEvent] {
        &self.events
    }

    /// Removes and returns events recorded since the last drain.
    pub fn drain_events(&mut self) -> Vec<SchedulerEvent> {
        core::mem::take(&mut self.events)
    }

    pub fn submit(
        &mut self,
        account: &str,
        pipeline_hash: &str,
        request: ResourceRequest,
        ts: u64,
    ) -> Result<TaskId, SchedulerError> {
        let cap = *self
            .quotas
            .get(account)
            .ok_or_else(|| SchedulerError::UnknownAccount(account.into()))?;
        let id = self.next_id;
        self.next_id += 1;
        self.tasks.insert(
            id,
            Task {
                task_id: id,
                account: account.into(),
                pipeline_hash: pipeline_hash.into(),
                request,
                state: TaskState::Pending,
                submitted_at: ts,
                started_at: None,
                ended_at: None,
            },
        );
        self.emit(ts, EventKind::Submitted, id);
        if !request.fits_within(&self.inventory.total) || !request.fits_within(&cap) {
            self.finish(id, TaskState::Failed(FailureReason::Unsatisfiable), ts);
            self.emit(ts, EventKind::Failed, id);
        } else if self.queue.is_empty() && self.can_start(id) {
            self.start(id, ts);
        } else {
            self.tasks.get_mut(&id).expect("just inserted").state = TaskState::Queued;
            self.queue.push_back(id);
            self.emit(ts, EventKind::Queued, id);
        }
        Ok(id)
    }

    /// Frees the task's allocation and starts queued tasks head-first until
    /// the first one that does not fit. Returns the newly started ids.
    pub fn on_completion(
        &mut self,
        id: TaskId,
        outcome: Completion,
        ts: u64,
    ) -> Result<Vec<TaskId>, SchedulerError> {
        let task = self.tasks.get(&id).ok_or(SchedulerError::UnknownTask(id))?;
        if !matches!(task.state, TaskState::Running(_)) {
            return Err(SchedulerError::NotRunning(id));
        }
        self.release(id);
        let (state, kind) = match outcome {
            Completion::Succeeded => (TaskState::Succeeded, EventKind::Completed),
            Completion::Failed(reason) => (TaskState::Failed(reason), EventKind::Failed),
        };
        self.finish(id, state, ts);
        self.emit(ts, kind, id);
        Ok(self.drain_queue(ts))
    }

    /// Kills a queued or running task. Returns tasks started by the
    /// rescan that follows.
    pub fn kill(&mut self, id: TaskId, ts: u64) -> Result<Vec<TaskId>, SchedulerError> {
        let task = self.tasks.get(&id).ok_or(SchedulerError::UnknownTask(id))?;
        match task.state {
            ref s if s.is_terminal() => return Err(SchedulerError::AlreadyTerminal(id)),
            TaskState::Running(_) => self.release(id),
            _ => self.queue.retain(|&q| q != id),
        }
        self.finish(id, TaskState::Killed, ts);
        self.emit(ts, EventKind::Killed, id);
        Ok(self.drain_queue(ts))
    }

    /// Cross-checks the books against the task table. Intended for tests
    /// and diagnostics.
    pub fn audit(&self) -> Result<(), &'static str> {
        let mut used = ResourceRequest::ZERO;
        let mut per_account: BTreeMap<&str, ResourceRequest> = BTreeMap::new();
        let mut gpus = BTreeSet::new();
        for t in self.tasks.values() {
            if let TaskState::Running(a) = &t.state {
                used = used.plus(&a.request);
                let acc = per_account.entry(t.account.as_str()).or_default();
                *acc = acc.plus(&a.request);
                for g in &a.gpu_ids {
                    if !gpus.insert(g.as_str()) {
                        return Err("gpu allocated twice");
                    }
                }
            }
        }
        if !used.fits_within(&self.inventory.total) {
            return Err("inventory oversubscribed");
        }
        if used.plus(&self.free) != self.inventory.total {
            return Err("free resources inconsistent");
        }
        for (acc, u) in per_account {
            if !u.fits_within(&self.quotas[acc]) {
                return Err("quota exceeded");
            }
        }
        Ok(())
    }

    fn can_start(&self, id: TaskId) -> bool {
        let t = &self.tasks[&id];
        let headroom = self.quotas[&t.account].minus(&self.usage(&t.account));
        t.request.fits_within(&self.free) && t.request.fits_within(&headroom)
    }

    fn start(&mut self, id: TaskId, ts: u64) {
        let request = self.tasks[&id].request;
        let picked: Vec<usize> = self.free_gpus.iter().take(request.gpus as usize).copied().collect();
        for i in &picked {
            self.free_gpus.remove(i);
        }
        self.free = self.free.minus(&request);
        let task = self.tasks.get_mut(&id).expect("task exists");
        let acc = self.usage.entry(task.account.clone()).or_default();
        *acc = acc.plus(&request);
        task.state = TaskState::Running(Allocation {
            request,
            gpu_ids: picked.iter().map(|&i| self.inventory.gpu_ids[i].clone()).collect(),
        });
        task.started_at = Some(ts);
        self.emit(ts, EventKind::Started, id);
    }

    fn release(&mut self, id: TaskId) {
        let task = &self.tasks[&id];
        let TaskState::Running(alloc) = &task.state else { return };
        for g in &alloc.gpu_ids {
            let idx = self
                .inventory
                .gpu_ids
                .iter()
                .position(|x| x == g)
                .expect("allocated gpu is in inventory");
            self.free_gpus.insert(idx);
        }
        self.free = self.free.plus(&alloc.request);
        let acc = self.usage.get_mut(&task.account).expect("running account has usage");
        *acc = acc.minus(&alloc.request);
    }

    fn finish(&mut self, id: TaskId, state: TaskState, ts: u64) {
        let task = self.tasks.get_mut(&id).expect("task exists");
        task.state = state;
        task.ended_at = Some(ts);
    }

    fn drain_queue(&mut self, ts: u64) -> Vec<TaskId> {
        let mut started = Vec::new();
        while let Some(&head) = self.queue.front() {
            if !self.can_start(head) {
                break;
            }
            self.queue.pop_front();
            self.start(head, ts);
            started.push(head);
        }
        started
    }

    fn emit(&mut self, ts: u64, event: EventKind, id: TaskId) {
        let t = &self.tasks[&id];
        self.events.push(SchedulerEvent {
            ts,
            event,
            task_id: id,
            account: t.account.clone(),
            request: t.request,
            free_after: self.free,
        });
    }
}
