//! Client agent: device inventory, passphrase gate, prioritized job queue,
//! acquisition jobs and the progress event stream.

pub mod inventory;

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use raft_core::digest::{digest_bytes, DigestValue, HashAlgorithm};
use serde::Serialize;

pub use inventory::{enumerate_devices, DeviceInventory, InventoryEntry, InventoryError, SelectionState};
pub use raft_core::bios::{lookup_bios_backdoor, BiosLookup};

use crate::client::{acquire_device, AbortFlag, AcquireError, AcquireOptions};
use crate::config::AgentConfig;
use crate::events::{EventBus, EventKind};
use crate::transport::{stream_connect, wrap_with_faults, Connection, TransportError};

/// Consecutive wrong passphrases before the agent locks.
pub const MAX_UNLOCK_FAILURES: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error("bad passphrase ({remaining} attempts left)")]
    BadPassphrase { remaining: u32 },
    #[error("agent locked after {MAX_UNLOCK_FAILURES} failed unlock attempts; restart required")]
    Locked,
    #[error("no passphrase digest is provisioned in the client config")]
    NotProvisioned,
    #[error("agent is not unlocked")]
    NotUnlocked,
    #[error("no devices to acquire")]
    NoDevices,
    #[error("job {0} is still running")]
    JobRunning(u64),
    #[error("unknown job {0}")]
    UnknownJob(u64),
    #[error("job {0} has already finished")]
    JobFinished(u64),
}

/// Opens the `attempt`-th connection (0-based) for `device_id`.
pub type Connector = Arc<dyn Fn(&str, usize) -> Result<Connection, TransportError> + Send + Sync>;

/// Connector over the stream transport to the configured server. A
/// configured fault plan wraps every connection; its drop rule applies to
/// the first connection of each device only.
pub fn tcp_connector(config: &AgentConfig) -> Connector {
    let host = config.server_host.clone();
    let port = config.server_port;
    let fault = config.fault.clone();
    Arc::new(move |device, attempt| {
        let conn = stream_connect(&host, port)?;
        Ok(match &fault {
            Some(plan) => {
                let mut plan = plan.clone();
                if attempt > 0 {
                    plan.drop_connection_after_bytes = None;
                }
                log::info!("fault plan active for {device} connection {attempt}: {plan:?}");
                wrap_with_faults(conn, plan).0
            }
            None => conn,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquireMode {
    All,
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceStatus {
    Pending,
    Active,
    Verified,
    Failed,
    Skipped,
}

/// Failure class of a device result, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Auth,
    Protocol,
    Transport,
    /// The channel lacked the required security properties.
    InsecureChannel,
    Source,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceResult {
    pub device_id: String,
    pub status: DeviceStatus,
    pub session_id: Option<String>,
    pub whole_image_digest: Option<String>,
    pub chunks: u64,
    pub transmissions: u64,
    pub naks: u64,
    pub error: Option<String>,
    pub failure: Option<FailureKind>,
}

impl DeviceResult {
    fn pending(device_id: &str) -> Self {
        DeviceResult {
            device_id: device_id.into(),
            status: DeviceStatus::Pending,
            session_id: None,
            whole_image_digest: None,
            chunks: 0,
            transmissions: 0,
            naks: 0,
            error: None,
            failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub mode: AcquireMode,
    pub state: JobState,
    pub devices: Vec<DeviceResult>,
}

impl JobStatus {
    pub fn all_verified(&self) -> bool {
        self.devices.iter().all(|d| d.status == DeviceStatus::Verified)
    }
}

#[derive(Debug, Default)]
struct Gate {
    failures: u32,
    locked: bool,
    tokens: HashSet<String>,
    passphrase: Option<Vec<u8>>,
}

struct JobEntry {
    status: JobStatus,
    abort: AbortFlag,
}

#[derive(Default)]
struct Jobs {
    next_id: u64,
    entries: BTreeMap<u64, JobEntry>,
}

pub struct Agent {
    config: AgentConfig,
    inventory: Mutex<DeviceInventory>,
    bus: EventBus,
    gate: Mutex<Gate>,
    jobs: Mutex<Jobs>,
    jobs_changed: Condvar,
    /// Serializes mutating control calls.
    control: Mutex<()>,
    connector: Connector,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn classify(e: &AcquireError) -> FailureKind {
    match e {
        AcquireError::AuthRefused => FailureKind::Auth,
        AcquireError::Aborted(_) => FailureKind::Aborted,
        AcquireError::Imaging(_) | AcquireError::Model(_) => FailureKind::Source,
        AcquireError::Transport(TransportError::InsecureChannel) => FailureKind::InsecureChannel,
        AcquireError::Transport(_) | AcquireError::ConnectionLost { .. } | AcquireError::Timeout => FailureKind::Transport,
        AcquireError::RetryLimitExceeded { .. }
        | AcquireError::ServerAborted(_)
        | AcquireError::FinalVerificationFailed { .. }
        | AcquireError::Protocol(_) => FailureKind::Protocol,
    }
}

impl Agent {
    /// Builds an agent and enumerates its devices.
    pub fn new(config: AgentConfig, connector: Connector) -> Result<Arc<Agent>, AgentError> {
        let inventory = enumerate_devices(config.scan_root.as_deref(), &config.devices)?;
        let bus = EventBus::new();
        for e in &inventory.entries {
            bus.publish(
                None,
                Some(&e.device_id),
                EventKind::DeviceListed { device_id: e.device_id.clone(), label: e.label.clone(), total_bytes: e.total_bytes },
            );
        }
        Ok(Arc::new(Agent {
            config,
            inventory: Mutex::new(inventory),
            bus,
            gate: Mutex::default(),
            jobs: Mutex::default(),
            jobs_changed: Condvar::new(),
            control: Mutex::new(()),
            connector,
        }))
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn events(&self) -> &EventBus {
        &self.bus
    }

    pub fn inventory(&self) -> DeviceInventory {
        lock(&self.inventory).clone()
    }

    /// Checks `passphrase` against the provisioned SHA-512 digest and issues a
    /// session token. The comparison is constant time.
    pub fn unlock(&self, passphrase: &[u8]) -> Result<String, AgentError> {
        let mut gate = lock(&self.gate);
        if gate.locked {
            return Err(AgentError::Locked);
        }
        let provisioned = self
            .config
            .passphrase_digest
            .as_deref()
            .and_then(|hex| DigestValue::from_hex(HashAlgorithm::Sha512, hex).ok())
            .ok_or(AgentError::NotProvisioned)?;
        if !digest_bytes(HashAlgorithm::Sha512, passphrase).ct_eq(&provisioned) {
            gate.failures += 1;
            if gate.failures >= MAX_UNLOCK_FAILURES {
                gate.locked = true;
                log::warn!("unlock failed {} times; agent locked", gate.failures);
                return Err(AgentError::Locked);
            }
            return Err(AgentError::BadPassphrase { remaining: MAX_UNLOCK_FAILURES - gate.failures });
        }
        gate.failures = 0;
        gate.passphrase = Some(passphrase.to_vec());
        let token = format!("{:032x}", rand::random::<u128>());
        gate.tokens.insert(token.clone());
        Ok(token)
    }

    pub fn is_unlocked(&self) -> bool {
        lock(&self.gate).passphrase.is_some()
    }

    pub fn is_locked(&self) -> bool {
        lock(&self.gate).locked
    }

    pub fn check_token(&self, token: &str) -> bool {
        let gate = lock(&self.gate);
        gate.tokens.iter().fold(false, |hit, t| hit | raft_core::digest::ct_eq(t.as_bytes(), token.as_bytes()))
    }

    pub fn set_priorities(&self, priorities: &BTreeMap<String, u32>) -> Result<Vec<String>, AgentError> {
        let _serial = lock(&self.control);
        let mut inv = lock(&self.inventory);
        inv.set_priorities(priorities)?;
        Ok(inv.queue_order())
    }

    pub fn queue_order(&self) -> Vec<String> {
        lock(&self.inventory).queue_order()
    }

    /// Starts acquiring every device (`All`) or the queued devices
    /// (`Selected`) in ascending priority on a background thread.
    pub fn start_job(self: &Arc<Self>, mode: AcquireMode) -> Result<u64, AgentError> {
        let _serial = lock(&self.control);
        let passphrase = lock(&self.gate).passphrase.clone().ok_or(AgentError::NotUnlocked)?;
        let mut jobs = lock(&self.jobs);
        if let Some((id, _)) = jobs.entries.iter().find(|(_, j)| j.status.state == JobState::Running) {
            return Err(AgentError::JobRunning(*id));
        }
        let order = {
            let mut inv = lock(&self.inventory);
            if mode == AcquireMode::All {
                if inv.is_empty() {
                    return Err(AgentError::NoDevices);
                }
                inv.queue_all()?;
            }
            inv.queue_order()
        };
        if order.is_empty() {
            return Err(AgentError::NoDevices);
        }
        jobs.next_id += 1;
        let job_id = jobs.next_id;
        let abort = AbortFlag::default();
        jobs.entries.insert(
            job_id,
            JobEntry {
                status: JobStatus {
                    job_id,
                    mode,
                    state: JobState::Running,
                    devices: order.iter().map(|d| DeviceResult::pending(d)).collect(),
                },
                abort: abort.clone(),
            },
        );
        drop(jobs);
        let me = self.clone();
        thread::Builder::new()
            .name(format!("job {job_id}"))
            .spawn(move || me.run_job(job_id, order, passphrase, abort))
            .expect("spawning job thread");
        Ok(job_id)
    }

    pub fn job(&self, job_id: u64) -> Option<JobStatus> {
        lock(&self.jobs).entries.get(&job_id).map(|j| j.status.clone())
    }

    pub fn jobs(&self) -> Vec<JobStatus> {
        lock(&self.jobs).entries.values().map(|j| j.status.clone()).collect()
    }

    /// Waits until `job_id` leaves the running state.
    pub fn wait_job(&self, job_id: u64, timeout: Duration) -> Result<JobStatus, AgentError> {
        let jobs = lock(&self.jobs);
        let (jobs, _) = self
            .jobs_changed
            .wait_timeout_while(jobs, timeout, |j| j.entries.get(&job_id).is_some_and(|e| e.status.state == JobState::Running))
            .unwrap_or_else(|p| p.into_inner());
        jobs.entries.get(&job_id).map(|j| j.status.clone()).ok_or(AgentError::UnknownJob(job_id))
    }

    pub fn abort(&self, job_id: u64) -> Result<(), AgentError> {
        let _serial = lock(&self.control);
        let jobs = lock(&self.jobs);
        let job = jobs.entries.get(&job_id).ok_or(AgentError::UnknownJob(job_id))?;
        if job.status.state != JobState::Running {
            return Err(AgentError::JobFinished(job_id));
        }
        job.abort.abort();
        Ok(())
    }

    /// Unlocks, acquires every device and waits for the result.
    pub fn run_headless(self: &Arc<Self>, passphrase: &[u8], mode: AcquireMode) -> Result<JobStatus, AgentError> {
        self.unlock(passphrase)?;
        let id = self.start_job(mode)?;
        loop {
            let status = self.wait_job(id, Duration::from_secs(3600))?;
            if status.state != JobState::Running {
                return Ok(status);
            }
        }
    }

    fn update_device(&self, job_id: u64, device_id: &str, f: impl FnOnce(&mut DeviceResult)) {
        let mut jobs = lock(&self.jobs);
        if let Some(d) = jobs
            .entries
            .get_mut(&job_id)
            .and_then(|j| j.status.devices.iter_mut().find(|d| d.device_id == device_id))
        {
            f(d);
        }
        drop(jobs);
        self.jobs_changed.notify_all();
    }

    fn options(&self, passphrase: Vec<u8>) -> AcquireOptions {
        let c = &self.config;
        let mut o = AcquireOptions::new(c.case_id.clone(), passphrase);
        o.chunk_size = c.chunk_size;
        o.chunk_digest_algorithm = c.chunk_digest_algorithm;
        o.whole_image_algorithm = c.whole_image_algorithm;
        o.retry_limit = c.retry_limit;
        o.max_reconnects = c.max_reconnects;
        o.reply_timeout = c.reply_timeout;
        o.insecure_ok = c.insecure_transport_ok;
        o
    }

    fn run_job(self: Arc<Self>, job_id: u64, order: Vec<String>, passphrase: Vec<u8>, abort: AbortFlag) {
        let options = self.options(passphrase);
        if self.config.parallel_acquisition {
            thread::scope(|s| {
                for device in &order {
                    let (me, options, abort) = (&self, &options, &abort);
                    s.spawn(move || me.acquire_one(job_id, device, options, abort));
                }
            });
        } else {
            for device in &order {
                self.acquire_one(job_id, device, &options, &abort);
            }
        }
        let mut jobs = lock(&self.jobs);
        if let Some(j) = jobs.entries.get_mut(&job_id) {
            j.status.state = if abort.is_aborted() { JobState::Aborted } else { JobState::Completed };
        }
        drop(jobs);
        self.jobs_changed.notify_all();
    }

    fn acquire_one(&self, job_id: u64, device_id: &str, options: &AcquireOptions, abort: &AbortFlag) {
        let entry = {
            let mut inv = lock(&self.inventory);
            let Some(entry) = inv.get(device_id).cloned() else { return };
            if abort.is_aborted() {
                inv.set_state(device_id, SelectionState::Unselected);
                drop(inv);
                self.update_device(job_id, device_id, |d| {
                    d.status = DeviceStatus::Skipped;
                    d.failure = Some(FailureKind::Aborted);
                    d.error = Some("job aborted".into());
                });
                return;
            }
            inv.set_state(device_id, SelectionState::Active);
            entry
        };
        self.update_device(job_id, device_id, |d| d.status = DeviceStatus::Active);

        let descriptor = entry.descriptor();
        let mut attempt = 0usize;
        let mut connect = || {
            let c = (self.connector)(device_id, attempt);
            attempt += 1;
            c
        };
        let bus = &self.bus;
        let mut progress = |kind: EventKind| {
            bus.publish(Some(job_id), Some(device_id), kind);
        };
        let result = acquire_device(&descriptor, &entry.path, options, &mut connect, abort, &mut progress);

        let state = match &result {
            Ok(_) => SelectionState::Done,
            Err(e) => SelectionState::Failed { detail: e.to_string() },
        };
        lock(&self.inventory).set_state(device_id, state);
        self.update_device(job_id, device_id, |d| match result {
            Ok(report) => {
                d.status = DeviceStatus::Verified;
                d.session_id = Some(report.session_id);
                d.whole_image_digest = Some(report.whole_image_digest.to_hex());
                d.chunks = report.chunk_count;
                d.transmissions = report.transmissions.len() as u64;
                d.naks = report.naks;
            }
            Err(e) => {
                log::error!("acquisition of {device_id} failed: {e}");
                d.status = DeviceStatus::Failed;
                d.failure = Some(classify(&e));
                d.error = Some(e.to_string());
            }
        });
    }
}
