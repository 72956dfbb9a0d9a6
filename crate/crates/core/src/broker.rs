//! Skill registry and job router for external assistance workers.
//!
//! Workers connect inbound, register with the installation token and the
//! skills they serve, and heartbeat every [`HEARTBEAT_INTERVAL_MS`]. A job
//! goes to the healthy node advertising its skill with the fewest jobs in
//! flight, ties going to the node dispatched to least recently. Every
//! accepted job ends in exactly one terminal state, reported once as a
//! [`BrokerEvent::Finished`].

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::Timestamp;
use crate::secret::constant_time_eq;

pub const HEARTBEAT_INTERVAL_MS: u64 = 5_000;
pub const HEARTBEAT_MISS_BUDGET: u64 = 2;
pub const SWEEP_INTERVAL_MS: u64 = 10_000;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
const TERMINAL_HISTORY: usize = 4096;

/// Worker connection handle assigned by the transport.
pub type ConnId = u64;
pub type JobId = u64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Machine-readable description of an assistance capability. Schemas map
/// field names to semantic type names such as `"text"` or `"label_id"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skill {
    pub skill_id: String,
    pub input_schema: BTreeMap<String, String>,
    pub output_schema: BTreeMap<String, String>,
    #[serde(default)]
    pub config: Map<String, Value>,
}

/// What a worker advertises at registration: a full definition, or just the
/// id of a skill the registry already knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SkillAd {
    Id(String),
    Full(Skill),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerNode {
    pub node_id: NodeId,
    pub skills: Vec<String>,
    pub conn: ConnId,
    pub registered_at: Timestamp,
    pub inflight: u32,
    pub healthy: bool,
    pub last_heartbeat: Timestamp,
    /// Broker-wide dispatch counter at the last dispatch to this node.
    pub last_dispatch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Dispatched,
    Done,
    Failed,
    TimedOut,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::TimedOut)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssistJob {
    pub job_id: JobId,
    pub skill_id: String,
    pub payload: Map<String, Value>,
    /// Opaque owner tag, the engine stores the client session here.
    pub origin: u64,
    pub submitted_at: Timestamp,
    pub state: JobState,
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Output(Map<String, Value>),
    WorkerError(String),
    TimedOut,
    /// No healthy node left for the skill.
    NoSuchSkill,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BrokerEvent {
    Dispatch { conn: ConnId, message: WorkerMessage },
    Finished { job: AssistJob, outcome: JobOutcome },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterError {
    BadToken,
    AlreadyRegistered,
    DuplicateNode(NodeId),
    NoSkills,
    EmptySchema(String),
    UnknownSkill(String),
    SkillConflict(String),
}

impl RegisterError {
    pub fn reason(&self) -> String {
        match self {
            RegisterError::BadToken => "bad-token".into(),
            RegisterError::AlreadyRegistered => "already-registered".into(),
            RegisterError::DuplicateNode(id) => format!("duplicate-node: {id}"),
            RegisterError::NoSkills => "no-skills".into(),
            RegisterError::EmptySchema(s) => format!("empty-schema: {s}"),
            RegisterError::UnknownSkill(s) => format!("unknown-skill: {s}"),
            RegisterError::SkillConflict(s) => format!("skill-conflict: {s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoSuchSkill(pub String);

/// Frames exchanged with workers on the broker socket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerMessage {
    Register {
        token: String,
        #[serde(default)]
        node_id: Option<String>,
        skills: Vec<SkillAd>,
    },
    Registered {
        node_id: NodeId,
        heartbeat_interval_ms: u64,
    },
    Rejected {
        reason: String,
    },
    Heartbeat {},
    Job {
        job_id: JobId,
        skill_id: String,
        payload: Map<String, Value>,
    },
    Result {
        job_id: JobId,
        #[serde(default)]
        output: Option<Map<String, Value>>,
        #[serde(default)]
        error: Option<String>,
    },
    Error {
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct Broker {
    token: String,
    timeout_ms: u64,
    skills: BTreeMap<String, Skill>,
    nodes: BTreeMap<NodeId, WorkerNode>,
    by_conn: BTreeMap<ConnId, NodeId>,
    jobs: BTreeMap<JobId, AssistJob>,
    terminal: BTreeMap<JobId, JobState>,
    terminal_order: VecDeque<JobId>,
    dispatches: u64,
    next_job: JobId,
    next_node: u64,
    last_sweep: Timestamp,
}

impl Broker {
    pub fn new(token: impl Into<String>, timeout_ms: u64) -> Self {
        Self {
            token: token.into(),
            timeout_ms,
            skills: BTreeMap::new(),
            nodes: BTreeMap::new(),
            by_conn: BTreeMap::new(),
            jobs: BTreeMap::new(),
            terminal: BTreeMap::new(),
            terminal_order: VecDeque::new(),
            dispatches: 0,
            next_job: 1,
            next_node: 1,
            last_sweep: Timestamp(0),
        }
    }

    pub fn register_node(
        &mut self,
        token: &str,
        requested_id: Option<String>,
        ads: Vec<SkillAd>,
        conn: ConnId,
        now: Timestamp,
    ) -> Result<NodeId, RegisterError> {
        if !constant_time_eq(token.as_bytes(), self.token.as_bytes()) {
            return Err(RegisterError::BadToken);
        }
        if self.by_conn.contains_key(&conn) {
            return Err(RegisterError::AlreadyRegistered);
        }
        if ads.is_empty() {
            return Err(RegisterError::NoSkills);
        }
        let mut new_defs = Vec::new();
        let mut skill_ids = Vec::new();
        for ad in ads {
            match ad {
                SkillAd::Id(id) => {
                    if !self.skills.contains_key(&id) {
                        return Err(RegisterError::UnknownSkill(id));
                    }
                    skill_ids.push(id);
                }
                SkillAd::Full(skill) => {
                    if skill.input_schema.is_empty() || skill.output_schema.is_empty() {
                        return Err(RegisterError::EmptySchema(skill.skill_id));
                    }
                    match self.skills.get(&skill.skill_id) {
                        Some(known) if known != &skill => return Err(RegisterError::SkillConflict(skill.skill_id)),
                        _ => {}
                    }
                    skill_ids.push(skill.skill_id.clone());
                    new_defs.push(skill);
                }
            }
        }
        skill_ids.sort();
        skill_ids.dedup();
        let node_id = match requested_id {
            Some(id) => {
                let id = NodeId(id);
                if self.nodes.contains_key(&id) {
                    return Err(RegisterError::DuplicateNode(id));
                }
                id
            }
            None => loop {
                let id = NodeId(format!("node-{}", self.next_node));
                self.next_node += 1;
                if !self.nodes.contains_key(&id) {
                    break id;
                }
            },
        };
        for skill in new_defs {
            self.skills.entry(skill.skill_id.clone()).or_insert(skill);
        }
        self.by_conn.insert(conn, node_id.clone());
        self.nodes.insert(
            node_id.clone(),
            WorkerNode {
                node_id: node_id.clone(),
                skills: skill_ids,
                conn,
                registered_at: now,
                inflight: 0,
                healthy: true,
                last_heartbeat: now,
                last_dispatch: None,
            },
        );
        Ok(node_id)
    }

    pub fn heartbeat(&mut self, conn: ConnId, now: Timestamp) -> bool {
        let Some(node) = self.by_conn.get(&conn).and_then(|id| self.nodes.get_mut(id)) else {
            return false;
        };
        node.last_heartbeat = now;
        node.healthy = true;
        true
    }

    pub fn node(&self, id: &NodeId) -> Option<&WorkerNode> {
        self.nodes.get(id)
    }

    pub fn node_by_conn(&self, conn: ConnId) -> Option<&WorkerNode> {
        self.by_conn.get(&conn).and_then(|id| self.nodes.get(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &WorkerNode> {
        self.nodes.values()
    }

    pub fn skill(&self, id: &str) -> Option<&Skill> {
        self.skills.get(id)
    }

    pub fn job(&self, id: JobId) -> Option<&AssistJob> {
        self.jobs.get(&id)
    }

    /// Final state of a recently finished job.
    pub fn terminal_state(&self, id: JobId) -> Option<JobState> {
        self.terminal.get(&id).copied()
    }

    pub fn active_jobs(&self) -> usize {
        self.jobs.len()
    }

    /// A skill is routable while a healthy node serves it.
    pub fn is_routable(&self, skill: &str) -> bool {
        self.nodes.values().any(|n| n.healthy && n.skills.iter().any(|s| s == skill))
    }

    /// Least in-flight, then least recently dispatched (never dispatched
    /// first), then node id.
    fn pick_node(&self, skill: &str, exclude: Option<&NodeId>) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.healthy && Some(&n.node_id) != exclude && n.skills.iter().any(|s| s == skill))
            .min_by(|a, b| {
                a.inflight
                    .cmp(&b.inflight)
                    .then_with(|| a.last_dispatch.cmp(&b.last_dispatch))
                    .then_with(|| a.node_id.cmp(&b.node_id))
            })
            .map(|n| n.node_id.clone())
    }

    /// Accepts a job and dispatches it, or fails fast when nothing serves
    /// the skill.
    pub fn submit(
        &mut self,
        skill_id: &str,
        payload: Map<String, Value>,
        origin: u64,
        now: Timestamp,
    ) -> Result<(JobId, BrokerEvent), NoSuchSkill> {
        if !self.is_routable(skill_id) {
            return Err(NoSuchSkill(skill_id.into()));
        }
        let job_id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(
            job_id,
            AssistJob {
                job_id,
                skill_id: skill_id.into(),
                payload,
                origin,
                submitted_at: now,
                state: JobState::Queued,
                node: None,
            },
        );
        match self.route(job_id, None) {
            Some(ev) => Ok((job_id, ev)),
            None => {
                self.jobs.remove(&job_id);
                Err(NoSuchSkill(skill_id.into()))
            }
        }
    }

    /// Dispatches a queued job. `None` if no node qualifies; the job stays
    /// queued for the caller to fail.
    fn route(&mut self, job_id: JobId, exclude: Option<&NodeId>) -> Option<BrokerEvent> {
        let skill = self.jobs.get(&job_id)?.skill_id.clone();
        let node_id = self.pick_node(&skill, exclude)?;
        self.dispatches += 1;
        let node = self.nodes.get_mut(&node_id)?;
        node.inflight += 1;
        node.last_dispatch = Some(self.dispatches);
        let conn = node.conn;
        let job = self.jobs.get_mut(&job_id)?;
        job.state = JobState::Dispatched;
        job.node = Some(node_id);
        Some(BrokerEvent::Dispatch {
            conn,
            message: WorkerMessage::Job { job_id, skill_id: job.skill_id.clone(), payload: job.payload.clone() },
        })
    }

    fn release(&mut self, job: &AssistJob) {
        if let Some(node) = job.node.as_ref().and_then(|id| self.nodes.get_mut(id)) {
            node.inflight = node.inflight.saturating_sub(1);
        }
    }

    fn finish(&mut self, job_id: JobId, state: JobState, outcome: JobOutcome) -> Option<BrokerEvent> {
        let mut job = self.jobs.remove(&job_id)?;
        if job.state == JobState::Dispatched {
            self.release(&job);
        }
        job.state = state;
        self.terminal.insert(job_id, state);
        self.terminal_order.push_back(job_id);
        while self.terminal_order.len() > TERMINAL_HISTORY {
            if let Some(old) = self.terminal_order.pop_front() {
                self.terminal.remove(&old);
            }
        }
        Some(BrokerEvent::Finished { job, outcome })
    }

    /// A worker's result. Dropped (`None`) when the job is unknown, already
    /// terminal, or currently assigned to another node.
    pub fn complete(&mut self, conn: ConnId, job_id: JobId, result: Result<Map<String, Value>, String>) -> Option<BrokerEvent> {
        let node_id = self.by_conn.get(&conn)?;
        let job = self.jobs.get(&job_id)?;
        if job.state != JobState::Dispatched || job.node.as_ref() != Some(node_id) {
            return None;
        }
        match result {
            Ok(output) => self.finish(job_id, JobState::Done, JobOutcome::Output(output)),
            Err(e) => self.finish(job_id, JobState::Failed, JobOutcome::WorkerError(e)),
        }
    }

    /// Moves the node's in-flight jobs elsewhere, failing those with no
    /// alternative.
    fn evacuate(&mut self, node_id: &NodeId, events: &mut Vec<BrokerEvent>) {
        let stranded: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Dispatched && j.node.as_ref() == Some(node_id))
            .map(|j| j.job_id)
            .collect();
        for job_id in stranded {
            if let Some(job) = self.jobs.get(&job_id).cloned() {
                self.release(&job);
            }
            if let Some(job) = self.jobs.get_mut(&job_id) {
                job.state = JobState::Queued;
                job.node = None;
            }
            match self.route(job_id, Some(node_id)) {
                Some(ev) => events.push(ev),
                None => events.extend(self.finish(job_id, JobState::Failed, JobOutcome::NoSuchSkill)),
            }
        }
    }

    /// The worker connection closed.
    pub fn node_lost(&mut self, conn: ConnId) -> Vec<BrokerEvent> {
        let mut events = Vec::new();
        let Some(node_id) = self.by_conn.remove(&conn) else { return events };
        if let Some(node) = self.nodes.get_mut(&node_id) {
            node.healthy = false;
        }
        self.evacuate(&node_id, &mut events);
        self.nodes.remove(&node_id);
        events
    }

    /// Times out overdue jobs and, every [`SWEEP_INTERVAL_MS`], marks nodes
    /// that missed [`HEARTBEAT_MISS_BUDGET`] heartbeats as unhealthy.
    pub fn tick(&mut self, now: Timestamp) -> Vec<BrokerEvent> {
        let mut events = Vec::new();
        let overdue: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| now.0.saturating_sub(j.submitted_at.0) >= self.timeout_ms)
            .map(|j| j.job_id)
            .collect();
        for job_id in overdue {
            events.extend(self.finish(job_id, JobState::TimedOut, JobOutcome::TimedOut));
        }
        if now.0.saturating_sub(self.last_sweep.0) >= SWEEP_INTERVAL_MS {
            events.extend(self.health_sweep(now));
        }
        events
    }

    pub fn health_sweep(&mut self, now: Timestamp) -> Vec<BrokerEvent> {
        self.last_sweep = now;
        let mut events = Vec::new();
        let limit = HEARTBEAT_INTERVAL_MS * HEARTBEAT_MISS_BUDGET;
        let stale: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.healthy && now.0.saturating_sub(n.last_heartbeat.0) > limit)
            .map(|n| n.node_id.clone())
            .collect();
        for id in stale {
            if let Some(n) = self.nodes.get_mut(&id) {
                n.healthy = false;
            }
            self.evacuate(&id, &mut events);
        }
        events
    }
}
