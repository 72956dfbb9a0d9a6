//! Sans-IO server: sessions, document channels, commentary operations,
//! behavioral ingestion and assistance forwarding.
//!
//! The engine is the single logical writer. The transport feeds it frames
//! and connection events one at a time together with the current time, and
//! delivers the returned [`Outbound`] messages in order. Because every input
//! is processed atomically, per-document sequence numbers define one total
//! order that every subscriber observes, and a subscription snapshot plus
//! the broadcasts after it never overlap or leave a gap.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{Map, Value};

use crate::analytics::{BehaviorEvent, EventError};
use crate::broker::{Broker, BrokerEvent, ConnId, JobId, JobOutcome, WorkerMessage, HEARTBEAT_INTERVAL_MS};
use crate::model::{CommentaryId, Document, DocumentId, InlineCommentary, LabelSet, Origin, Study, Timestamp, User, UserId};
use crate::protocol::{
    AssistRequest, AssistResponse, AuthOk, BehaviorEventIn, CommAck, CommBroadcast, CommCreate, CommDelete, CommOp,
    CommUpdate, Credentials, DocumentRef, ErrorCode, ErrorPayload, Hello, HelloAck, MsgType, ProtocolMessage,
    RawMessage, Snapshot, PROTOCOL_VERSION,
};
use crate::secret::{verify_password, PasswordHash};
use crate::state::{CommitError, Journal, Record, State, StateError};

pub type SessionId = u64;

/// The string actually hashed for `password` under a server pepper.
pub fn peppered(pepper: &str, password: &str) -> String {
    if pepper.is_empty() {
        return password.into();
    }
    let mut s = String::with_capacity(pepper.len() + password.len() + 1);
    s.push_str(pepper);
    s.push('\u{0}');
    s.push_str(password);
    s
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub broker_token: String,
    pub assist_timeout_ms: u64,
    /// Server-wide secret mixed into every password before hashing.
    pub password_pepper: String,
}

impl EngineConfig {
    pub fn new(broker_token: impl Into<String>) -> Self {
        Self { broker_token: broker_token.into(), assist_timeout_ms: crate::broker::DEFAULT_TIMEOUT_MS, password_pepper: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    ToClient { session: SessionId, message: ProtocolMessage },
    ToWorker { conn: ConnId, message: WorkerMessage },
    /// Close the worker connection after delivering earlier messages.
    CloseWorker { conn: ConnId },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: SessionId,
    pub user_id: Option<UserId>,
    pub greeted: bool,
    pub subscriptions: BTreeSet<DocumentId>,
    pub opened_at: Timestamp,
}

impl Session {
    pub fn authenticated(&self) -> bool {
        self.user_id.is_some()
    }
}

#[derive(Debug, Clone)]
struct PendingAssist {
    session: SessionId,
    request_id: Option<String>,
    skill: String,
    commentary: Option<CommentaryId>,
    user: UserId,
}

/// Error reply for one client frame.
struct Reject {
    code: ErrorCode,
    message: String,
    violations: Vec<String>,
}

impl Reject {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), violations: Vec::new() }
    }
}

impl<E: core::fmt::Display> From<CommitError<E>> for Reject {
    fn from(e: CommitError<E>) -> Self {
        match e {
            CommitError::Journal(j) => Reject::new(ErrorCode::StorageFailure, j.to_string()),
            CommitError::Rejected(StateError::Invalid(id, v)) => Reject {
                code: ErrorCode::ValidationFailed,
                message: StateError::Invalid(id, v.clone()).to_string(),
                violations: v.iter().map(|x| x.code().to_string()).collect(),
            },
            CommitError::Rejected(e @ (StateError::UnknownParent(_) | StateError::ParentNotRoot(_))) => {
                Reject::new(ErrorCode::UnknownParent, e.to_string())
            }
            CommitError::Rejected(e @ StateError::UnknownDocument(_)) => Reject::new(ErrorCode::UnknownDocument, e.to_string()),
            CommitError::Rejected(e @ StateError::PageOutOfRange { .. }) => Reject::new(ErrorCode::MalformedEvent, e.to_string()),
            CommitError::Rejected(e) => Reject::new(ErrorCode::ValidationFailed, e.to_string()),
        }
    }
}

type Handled = Result<Vec<Outbound>, Reject>;

pub struct Engine<J: Journal> {
    state: State,
    journal: J,
    broker: Broker,
    sessions: BTreeMap<SessionId, Session>,
    channels: BTreeMap<DocumentId, BTreeSet<SessionId>>,
    pending: BTreeMap<JobId, PendingAssist>,
    worker_conns: BTreeSet<ConnId>,
    next_session: SessionId,
    next_conn: ConnId,
    pepper: String,
}

impl<J: Journal> Engine<J> {
    pub fn new(config: EngineConfig, state: State, journal: J) -> Self {
        Self {
            state,
            journal,
            broker: Broker::new(config.broker_token, config.assist_timeout_ms),
            sessions: BTreeMap::new(),
            channels: BTreeMap::new(),
            pending: BTreeMap::new(),
            worker_conns: BTreeSet::new(),
            next_session: 1,
            next_conn: 1,
            pepper: config.password_pepper,
        }
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn journal(&self) -> &J {
        &self.journal
    }

    pub fn journal_mut(&mut self) -> &mut J {
        &mut self.journal
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id)
    }

    /// Direct write path for administrative operations.
    pub fn commit(&mut self, record: Record) -> Result<(), CommitError<J::Error>> {
        self.state.commit(&mut self.journal, record)
    }

    // ---- admin helpers -------------------------------------------------

    pub fn register_user(
        &mut self,
        username: &str,
        email: &str,
        role: crate::model::Role,
        behavior_optin: bool,
        credential: PasswordHash,
        now: Timestamp,
    ) -> Result<UserId, CommitError<J::Error>> {
        let user = User {
            user_id: self.state.next_user_id(),
            username: username.into(),
            email: email.into(),
            role,
            consent_given: true,
            behavior_optin,
            registered_at: now,
            consent_accepted_at: Some(now),
        };
        let id = user.user_id.clone();
        self.commit(Record::UserRegistered { user, credential: Some(credential) })?;
        Ok(id)
    }

    pub fn import_document(&mut self, doc: Document) -> Result<DocumentId, CommitError<J::Error>> {
        let id = doc.document_id.clone();
        if self.state.document(&id).is_some() {
            return Ok(id);
        }
        self.commit(Record::DocumentImported(doc))?;
        Ok(id)
    }

    pub fn define_labelset(&mut self, ls: LabelSet) -> Result<(), CommitError<J::Error>> {
        if self.state.labelset(&ls.labelset_id) == Some(&ls) {
            return Ok(());
        }
        self.commit(Record::LabelSetDefined(ls))
    }

    pub fn create_study(&mut self, study: Study) -> Result<(), CommitError<J::Error>> {
        self.commit(Record::StudyCreated(study))
    }

    // ---- client side ---------------------------------------------------

    pub fn connect_client(&mut self, now: Timestamp) -> SessionId {
        let id = self.next_session;
        self.next_session += 1;
        self.sessions.insert(
            id,
            Session { session_id: id, user_id: None, greeted: false, subscriptions: BTreeSet::new(), opened_at: now },
        );
        id
    }

    pub fn disconnect_client(&mut self, session: SessionId) {
        if let Some(s) = self.sessions.remove(&session) {
            for doc in s.subscriptions {
                if let Some(subs) = self.channels.get_mut(&doc) {
                    subs.remove(&session);
                }
            }
        }
        self.pending.retain(|_, p| p.session != session);
    }

    pub fn client_frame(&mut self, session: SessionId, frame: &str, now: Timestamp) -> Vec<Outbound> {
        if !self.sessions.contains_key(&session) {
            return Vec::new();
        }
        let raw: RawMessage = match serde_json::from_str(frame) {
            Ok(r) => r,
            Err(e) => {
                return vec![to_client(session, ProtocolMessage::error(ErrorCode::Malformed, e.to_string(), None))];
            }
        };
        let rid = raw.request_id.clone();
        match self.dispatch_client(session, raw, now) {
            Ok(out) => out,
            Err(r) => {
                let mut msg = ProtocolMessage::new(
                    MsgType::Error,
                    ErrorPayload { code: r.code, message: r.message, violations: r.violations },
                )
                .with_request_id(rid);
                msg.server_ts = Some(now);
                vec![to_client(session, msg)]
            }
        }
    }

    fn dispatch_client(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let Some(msg_type) = MsgType::parse(&raw.msg_type) else {
            return Err(Reject::new(ErrorCode::UnknownMessageType, raw.msg_type));
        };
        let session = &self.sessions[&sid];
        match msg_type {
            MsgType::Hello => return self.on_hello(sid, raw, now),
            _ if !session.greeted => return Err(Reject::new(ErrorCode::HelloRequired, "send hello first")),
            MsgType::Auth => return self.on_auth(sid, raw, now),
            _ if !session.authenticated() => {
                return Err(Reject::new(ErrorCode::Unauthenticated, "authenticate first"));
            }
            _ => {}
        }
        match msg_type {
            MsgType::Subscribe => self.on_subscribe(sid, raw, now),
            MsgType::Unsubscribe => self.on_unsubscribe(sid, raw, now),
            MsgType::CommCreate => self.on_create(sid, raw, now),
            MsgType::CommUpdate => self.on_update(sid, raw, now),
            MsgType::CommDelete => self.on_delete(sid, raw, now),
            MsgType::AssistRequest => self.on_assist(sid, raw, now),
            MsgType::BehaviorEvent => self.on_behavior(sid, raw, now),
            other => Err(Reject::new(ErrorCode::UnknownMessageType, alloc::format!("{} is server-to-client", other.as_str()))),
        }
    }

    fn payload<T: serde::de::DeserializeOwned>(raw: &RawMessage) -> Result<T, Reject> {
        serde_json::from_value(raw.payload.clone()).map_err(|e| Reject::new(ErrorCode::Malformed, e.to_string()))
    }

    fn reply(&self, sid: SessionId, msg_type: MsgType, payload: impl serde::Serialize, rid: Option<String>, now: Timestamp) -> Outbound {
        let mut msg = ProtocolMessage::new(msg_type, payload).with_request_id(rid);
        msg.server_ts = Some(now);
        msg.user_id = self.sessions.get(&sid).and_then(|s| s.user_id.clone());
        to_client(sid, msg)
    }

    fn user_of(&self, sid: SessionId) -> UserId {
        self.sessions[&sid].user_id.clone().expect("checked authenticated")
    }

    fn on_hello(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let hello: Hello = Self::payload(&raw)?;
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(Reject::new(
                ErrorCode::UnsupportedProtocolVersion,
                alloc::format!("server speaks protocol_version {PROTOCOL_VERSION}"),
            ));
        }
        self.sessions.get_mut(&sid).expect("live session").greeted = true;
        let ack = HelloAck { session_id: sid, protocol_version: PROTOCOL_VERSION };
        Ok(vec![self.reply(sid, MsgType::Ack, ack, raw.request_id, now)])
    }

    fn on_auth(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        if self.sessions[&sid].authenticated() {
            return Err(Reject::new(ErrorCode::AlreadyAuthenticated, "session already authenticated"));
        }
        let creds: Credentials = Self::payload(&raw)?;
        let user = self
            .state
            .user_by_name(&creds.username)
            .filter(|u| self.state.credential(&u.user_id).is_some_and(|h| verify_password(h, &peppered(&self.pepper, &creds.password))))
            .cloned()
            .ok_or_else(|| Reject::new(ErrorCode::BadCredentials, "unknown user or wrong password"))?;
        self.sessions.get_mut(&sid).expect("live session").user_id = Some(user.user_id.clone());
        let ok = AuthOk {
            user_id: user.user_id,
            username: user.username,
            role: user.role,
            consent_given: user.consent_given,
            behavior_optin: user.behavior_optin,
        };
        Ok(vec![self.reply(sid, MsgType::AuthOk, ok, raw.request_id, now)])
    }

    fn authorize_document(&self, sid: SessionId, doc: &DocumentId) -> Result<(), Reject> {
        if self.state.document(doc).is_none() {
            return Err(Reject::new(ErrorCode::UnknownDocument, doc.to_string()));
        }
        if !self.state.can_access(&self.user_of(sid), doc) {
            return Err(Reject::new(ErrorCode::Unauthorized, doc.to_string()));
        }
        Ok(())
    }

    fn require_subscribed(&self, sid: SessionId, doc: &DocumentId) -> Result<(), Reject> {
        if self.sessions[&sid].subscriptions.contains(doc) {
            Ok(())
        } else {
            Err(Reject::new(ErrorCode::NotSubscribed, doc.to_string()))
        }
    }

    fn on_subscribe(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let DocumentRef { document_id } = Self::payload(&raw)?;
        self.authorize_document(sid, &document_id)?;
        let snapshot = self.snapshot(&document_id);
        self.sessions.get_mut(&sid).expect("live session").subscriptions.insert(document_id.clone());
        self.channels.entry(document_id).or_default().insert(sid);
        Ok(vec![self.reply(sid, MsgType::Ack, snapshot, raw.request_id, now)])
    }

    /// Live commentaries of the document in `(created_at, id)` order.
    pub fn snapshot(&self, doc: &DocumentId) -> Snapshot {
        let mut annotations: Vec<InlineCommentary> =
            self.state.commentaries_of(doc).filter(|c| !c.deleted).cloned().collect();
        annotations.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.commentary_id.cmp(&b.commentary_id)));
        Snapshot { document_id: doc.clone(), seq: self.state.seq(doc), annotations }
    }

    fn on_unsubscribe(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let DocumentRef { document_id } = Self::payload(&raw)?;
        self.sessions.get_mut(&sid).expect("live session").subscriptions.remove(&document_id);
        if let Some(subs) = self.channels.get_mut(&document_id) {
            subs.remove(&sid);
        }
        Ok(vec![self.reply(sid, MsgType::Ack, Value::Object(Map::new()), raw.request_id, now)])
    }

    /// Commits a commentary write and fans it out to the channel.
    fn put_commentary(&mut self, c: InlineCommentary, op: CommOp, actor: &UserId, now: Timestamp) -> Result<Vec<Outbound>, Reject> {
        let doc = c.document_id.clone();
        self.commit(Record::CommentaryPut(c.clone()))?;
        let seq = self.state.seq(&doc);
        let subscribers: Vec<SessionId> = self.channels.get(&doc).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let body = CommBroadcast { op, annotation: c };
        Ok(subscribers
            .into_iter()
            .map(|sid| {
                let mut msg = ProtocolMessage::new(MsgType::CommBroadcast, &body);
                msg.seq = Some(seq);
                msg.user_id = Some(actor.clone());
                msg.server_ts = Some(now);
                to_client(sid, msg)
            })
            .collect())
    }

    fn on_create(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let req: CommCreate = Self::payload(&raw)?;
        self.authorize_document(sid, &req.document_id)?;
        self.require_subscribed(sid, &req.document_id)?;
        let user = self.user_of(sid);
        let c = InlineCommentary {
            commentary_id: self.state.next_commentary_id(),
            document_id: req.document_id,
            author: user.clone(),
            anchor: req.selectors,
            note_text: req.text,
            label_id: req.label,
            tags: req.tags,
            created_at: now,
            updated_at: now,
            parent_id: req.parent_id,
            deleted: false,
            origin: Origin::Human,
        };
        let id = c.commentary_id.clone();
        let broadcasts = self.put_commentary(c, CommOp::Create, &user, now)?;
        let mut out = vec![self.reply(sid, MsgType::Ack, CommAck { id }, raw.request_id, now)];
        out.extend(broadcasts);
        Ok(out)
    }

    fn editable(&self, sid: SessionId, id: &CommentaryId) -> Result<InlineCommentary, Reject> {
        let c = self
            .state
            .commentary(id)
            .filter(|c| !c.deleted)
            .ok_or_else(|| Reject::new(ErrorCode::UnknownCommentary, id.to_string()))?;
        self.require_subscribed(sid, &c.document_id)?;
        let user = self.user_of(sid);
        let admin = self.state.user(&user).is_some_and(User::is_admin);
        if c.author != user && !admin {
            return Err(Reject::new(ErrorCode::Forbidden, "only the author or an admin may change a commentary"));
        }
        Ok(c.clone())
    }

    fn on_update(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let req: CommUpdate = Self::payload(&raw)?;
        let mut c = self.editable(sid, &req.id)?;
        if let Some(text) = req.text {
            c.note_text = text;
        }
        if let Some(label) = req.label {
            c.label_id = label;
        }
        if let Some(tags) = req.tags {
            c.tags = tags;
        }
        c.updated_at = now.max(c.created_at);
        let user = self.user_of(sid);
        let broadcasts = self.put_commentary(c, CommOp::Update, &user, now)?;
        let mut out = vec![self.reply(sid, MsgType::Ack, CommAck { id: req.id }, raw.request_id, now)];
        out.extend(broadcasts);
        Ok(out)
    }

    fn on_delete(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let req: CommDelete = Self::payload(&raw)?;
        let mut c = self.editable(sid, &req.id)?;
        c.deleted = true;
        c.updated_at = now.max(c.created_at);
        let user = self.user_of(sid);
        let broadcasts = self.put_commentary(c, CommOp::Delete, &user, now)?;
        let mut out = vec![self.reply(sid, MsgType::Ack, CommAck { id: req.id }, raw.request_id, now)];
        out.extend(broadcasts);
        Ok(out)
    }

    fn on_behavior(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let req: BehaviorEventIn = Self::payload(&raw)?;
        let user = self.user_of(sid);
        let event = BehaviorEvent::new(&req.event_type, req.payload, now, req.client_ts, user.clone(), req.document_id)
            .map_err(|e| match e {
                EventError::UnknownType(t) => Reject::new(ErrorCode::UnknownEventType, t),
                e @ EventError::MissingField { .. } => Reject::new(ErrorCode::MalformedEvent, e.to_string()),
            })?;
        let optin = self.state.user(&user).is_some_and(|u| u.behavior_optin);
        if optin {
            self.commit(Record::BehaviorStored(event))?;
        }
        Ok(vec![self.reply(sid, MsgType::Ack, Value::Object(Map::new()), raw.request_id, now)])
    }

    fn on_assist(&mut self, sid: SessionId, raw: RawMessage, now: Timestamp) -> Handled {
        let req: AssistRequest = Self::payload(&raw)?;
        let mut payload = req.input;
        if let Some(cid) = &req.commentary_id {
            let c = self
                .state
                .commentary(cid)
                .filter(|c| !c.deleted)
                .ok_or_else(|| Reject::new(ErrorCode::UnknownCommentary, cid.to_string()))?
                .clone();
            self.authorize_document(sid, &c.document_id)?;
            for (k, v) in assist_context(&self.state, &c) {
                payload.entry(k).or_insert(v);
            }
        }
        let (job_id, dispatch) = self
            .broker
            .submit(&req.skill, payload, sid, now)
            .map_err(|e| Reject::new(ErrorCode::NoSuchSkill, e.0))?;
        self.pending.insert(
            job_id,
            PendingAssist {
                session: sid,
                request_id: raw.request_id,
                skill: req.skill,
                commentary: req.commentary_id,
                user: self.user_of(sid),
            },
        );
        Ok(self.broker_events(vec![dispatch], now))
    }

    // ---- worker side ---------------------------------------------------

    pub fn connect_worker(&mut self) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.worker_conns.insert(id);
        id
    }

    pub fn disconnect_worker(&mut self, conn: ConnId, now: Timestamp) -> Vec<Outbound> {
        self.worker_conns.remove(&conn);
        let events = self.broker.node_lost(conn);
        self.broker_events(events, now)
    }

    pub fn worker_frame(&mut self, conn: ConnId, frame: &str, now: Timestamp) -> Vec<Outbound> {
        if !self.worker_conns.contains(&conn) {
            return Vec::new();
        }
        let msg: WorkerMessage = match serde_json::from_str(frame) {
            Ok(m) => m,
            Err(e) => return vec![Outbound::ToWorker { conn, message: WorkerMessage::Error { reason: e.to_string() } }],
        };
        let registered = self.broker.node_by_conn(conn).is_some();
        match msg {
            WorkerMessage::Register { token, node_id, skills } => {
                match self.broker.register_node(&token, node_id, skills, conn, now) {
                    Ok(node_id) => vec![Outbound::ToWorker {
                        conn,
                        message: WorkerMessage::Registered { node_id, heartbeat_interval_ms: HEARTBEAT_INTERVAL_MS },
                    }],
                    Err(e) => {
                        let mut out = vec![Outbound::ToWorker { conn, message: WorkerMessage::Rejected { reason: e.reason() } }];
                        if !registered {
                            self.worker_conns.remove(&conn);
                            out.push(Outbound::CloseWorker { conn });
                        }
                        out
                    }
                }
            }
            _ if !registered => {
                vec![Outbound::ToWorker { conn, message: WorkerMessage::Error { reason: "register first".into() } }]
            }
            WorkerMessage::Heartbeat {} => {
                self.broker.heartbeat(conn, now);
                Vec::new()
            }
            WorkerMessage::Result { job_id, output, error } => {
                let result = match (output, error) {
                    (_, Some(e)) => Err(e),
                    (Some(o), None) => Ok(o),
                    (None, None) => Err("worker returned neither output nor error".into()),
                };
                let events = self.broker.complete(conn, job_id, result).into_iter().collect();
                self.broker_events(events, now)
            }
            _ => vec![Outbound::ToWorker { conn, message: WorkerMessage::Error { reason: "unexpected message".into() } }],
        }
    }

    /// Advances timers: assistance timeouts and worker health.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Outbound> {
        let events = self.broker.tick(now);
        self.broker_events(events, now)
    }

    fn broker_events(&mut self, events: Vec<BrokerEvent>, now: Timestamp) -> Vec<Outbound> {
        let mut out = Vec::new();
        for ev in events {
            match ev {
                BrokerEvent::Dispatch { conn, message } => out.push(Outbound::ToWorker { conn, message }),
                BrokerEvent::Finished { job, outcome } => {
                    if let Some(p) = self.pending.remove(&job.job_id) {
                        out.extend(self.deliver_assist(p, outcome, now));
                    }
                }
            }
        }
        out
    }

    fn deliver_assist(&mut self, p: PendingAssist, outcome: JobOutcome, now: Timestamp) -> Vec<Outbound> {
        if !self.sessions.contains_key(&p.session) {
            return Vec::new();
        }
        let fail = |code, message: String| {
            let mut m = ProtocolMessage::error(code, message, p.request_id.clone());
            m.server_ts = Some(now);
            vec![to_client(p.session, m)]
        };
        let output = match outcome {
            JobOutcome::Output(o) => o,
            JobOutcome::WorkerError(e) => return fail(ErrorCode::AssistFailed, e),
            JobOutcome::TimedOut => return fail(ErrorCode::AssistTimeout, "assistance timed out".into()),
            JobOutcome::NoSuchSkill => return fail(ErrorCode::NoSuchSkill, p.skill.clone()),
        };
        let mut out = Vec::new();
        let mut reply = None;
        if let (Some(text), Some(cid)) = (output.get("reply_text").and_then(Value::as_str), &p.commentary) {
            if let Some(target) = self.state.commentary(cid).filter(|c| !c.deleted).cloned() {
                let root = target.parent_id.clone().unwrap_or(target.commentary_id.clone());
                let c = InlineCommentary {
                    commentary_id: self.state.next_commentary_id(),
                    document_id: target.document_id,
                    author: p.user.clone(),
                    anchor: None,
                    note_text: Some(text.to_string()),
                    label_id: None,
                    tags: Vec::new(),
                    created_at: now,
                    updated_at: now,
                    parent_id: Some(root),
                    deleted: false,
                    origin: Origin::Assistant,
                };
                match self.put_commentary(c.clone(), CommOp::Create, &p.user, now) {
                    Ok(b) => {
                        reply = Some(c);
                        out.extend(b);
                    }
                    Err(r) => return fail(r.code, r.message),
                }
            }
        }
        let resp = AssistResponse { skill: p.skill.clone(), output, reply };
        out.insert(0, self.reply(p.session, MsgType::AssistResponse, resp, p.request_id, now));
        out
    }
}

fn to_client(session: SessionId, message: ProtocolMessage) -> Outbound {
    Outbound::ToClient { session, message }
}

/// Fields a worker sees about a commentary: note, highlighted span, label,
/// tags and metadata.
fn assist_context(state: &State, c: &InlineCommentary) -> Map<String, Value> {
    let root_anchor = c
        .anchor
        .clone()
        .or_else(|| c.parent_id.as_ref().and_then(|p| state.commentary(p)).and_then(|p| p.anchor.clone()));
    let mut m = Map::new();
    m.insert("text".into(), c.note_text.clone().map_or(Value::Null, Value::String));
    m.insert("span".into(), root_anchor.map_or(Value::Null, |a| Value::String(a.quote.exact)));
    m.insert("label".into(), c.label_id.clone().map_or(Value::Null, |l| Value::String(l.0)));
    m.insert("tags".into(), Value::Array(c.tags.iter().cloned().map(Value::String).collect()));
    let mut meta = Map::new();
    meta.insert("commentaryId".into(), Value::String(c.commentary_id.0.clone()));
    meta.insert("documentId".into(), Value::String(c.document_id.0.clone()));
    meta.insert("userId".into(), Value::String(c.author.0.clone()));
    meta.insert("createdAt".into(), Value::from(c.created_at.0));
    if let Some(doc) = state.document(&c.document_id) {
        meta.insert("documentTitle".into(), Value::String(doc.title.clone()));
    }
    m.insert("metadata".into(), Value::Object(meta));
    m
}
