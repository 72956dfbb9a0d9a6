//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use care_core::broker::{ConnId, Skill, SkillAd, WorkerMessage};
use care_core::engine::SessionId;
use care_core::model::{Document, DocumentId, Label, LabelId, LabelSet, LabelSetId, Role, Timestamp, User, UserId};
use care_core::protocol::{MsgType, ProtocolMessage};
use care_core::anchoring::fuzzy_budget;
use care_core::{hash_password, Engine, EngineConfig, MemoryJournal, Outbound, Record, State};
use rand::Rng;
use serde_json::{json, Map, Value};

pub const TOKEN: &str = "broker-secret";

// ---- oracles ---------------------------------------------------------------

/// Textbook Levenshtein distance.
pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Every window `hay[s..s+l]` with `l` within the budget slack, scored by
/// plain Levenshtein, ordered by `(distance, |s - hint|, s, |l - n|, l)`.
/// Returns `(start, len, distance)` of the minimum within budget.
pub fn brute_force_window(hay: &[char], quote: &[char], hint: usize) -> Option<(usize, usize, usize)> {
    let n = quote.len();
    let budget = fuzzy_budget(n);
    type Key = (usize, usize, usize, usize, usize);
    let mut best: Option<(Key, (usize, usize, usize))> = None;
    for s in 0..hay.len() {
        let lo = n.saturating_sub(budget).max(1);
        let hi = (n + budget).min(hay.len() - s);
        for l in lo..=hi {
            let d = levenshtein(quote, &hay[s..s + l]);
            if d > budget {
                continue;
            }
            let key = (d, s.abs_diff(hint), s, l.abs_diff(n), l);
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                best = Some((key, (s, l, d)));
            }
        }
    }
    best.map(|(_, w)| w)
}

/// Random text over a small alphabet with spaces and a few non-ASCII
/// scalars, so char and byte offsets differ.
pub fn random_text(rng: &mut impl Rng, len: usize) -> String {
    const ALPHA: &[char] = &[
        'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'k', 'l', 'm', 'n', 'o', 'p', 'r', 's', 't', 'u', 'w', ' ', ' ',
        ' ', 'é', 'ß', '→', '字',
    ];
    (0..len).map(|_| ALPHA[rng.gen_range(0..ALPHA.len())]).collect()
}

/// Applies `k` random edits inside `text[start..end]`; returns the new text
/// and the new extent of the edited region.
pub fn mutate(rng: &mut impl Rng, text: &[char], start: usize, end: usize, k: usize) -> (Vec<char>, usize, usize) {
    let mut region: Vec<char> = text[start..end].to_vec();
    for _ in 0..k {
        let pos = rng.gen_range(0..region.len());
        match rng.gen_range(0..3) {
            0 => {
                let c = region[pos];
                region[pos] = if c == 'x' { 'y' } else { 'x' };
            }
            1 if region.len() > 1 => {
                region.remove(pos);
            }
            _ => region.insert(pos, 'q'),
        }
    }
    let mut out = text[..start].to_vec();
    out.extend(&region);
    let new_end = out.len();
    out.extend(&text[end..]);
    (out, start, new_end)
}

// ---- engine harness --------------------------------------------------------

pub fn password(username: &str) -> String {
    format!("pw-{username}")
}

pub fn labelset() -> LabelSet {
    let label = |id: &str, name: &str| Label { label_id: LabelId::new(id), display_name: name.into(), color: "#888".into() };
    LabelSet {
        labelset_id: LabelSetId::new("review"),
        name: "Review".into(),
        labels: vec![label("strength", "Strength"), label("weakness", "Weakness"), label("question", "Question")],
    }
}

pub const DOC_PAGES: [&str; 3] = [
    "Collaborative reading is a social activity. Readers highlight passages and leave notes for each other.",
    "Peer review benefits from inline commentary anchored to the exact text under discussion.",
    "Behavioral logs reveal how long readers stay on each page before they start annotating.",
];

pub fn document(uploader: &UserId) -> Document {
    let pages: Vec<String> = DOC_PAGES.iter().map(|s| s.to_string()).collect();
    Document {
        document_id: DocumentId::new("doc-1"),
        title: "Fixture paper".into(),
        page_count: pages.len(),
        text_layer: pages,
        uploaded_by: uploader.clone(),
        uploaded_at: Timestamp(0),
    }
}

pub struct Harness {
    pub engine: Engine<MemoryJournal>,
    pub inbox: BTreeMap<SessionId, Vec<ProtocolMessage>>,
    pub worker_inbox: BTreeMap<ConnId, Vec<WorkerMessage>>,
    pub closed_workers: BTreeSet<ConnId>,
    pub now: u64,
    pub doc: DocumentId,
    pub users: BTreeMap<String, UserId>,
    next_rid: u64,
}

impl Harness {
    /// Admin `admin`, users `alice` (opted in), `bob`, `carol`, `dave`,
    /// `erin`; one three-page document and the `review` label set.
    pub fn new() -> Self {
        Self::with_users(&["alice", "bob", "carol", "dave", "erin"])
    }

    pub fn with_users(names: &[&str]) -> Self {
        let mut state = State::new();
        let mut journal = MemoryJournal::default();
        let mut users = BTreeMap::new();
        let mut all = vec![("admin", Role::Admin)];
        all.extend(names.iter().map(|n| (*n, Role::User)));
        for (i, (name, role)) in all.into_iter().enumerate() {
            let user = User {
                user_id: UserId::new(format!("u{:010}", i + 1)),
                username: name.into(),
                email: format!("{name}@example.org"),
                role,
                consent_given: true,
                behavior_optin: name == "alice",
                registered_at: Timestamp(0),
                consent_accepted_at: Some(Timestamp(0)),
            };
            users.insert(name.to_string(), user.user_id.clone());
            let credential = hash_password(&format!("salt-{name}"), &password(name));
            state.commit(&mut journal, Record::UserRegistered { user, credential: Some(credential) }).unwrap();
        }
        state.commit(&mut journal, Record::LabelSetDefined(labelset())).unwrap();
        let doc = document(&users["admin"]);
        let doc_id = doc.document_id.clone();
        state.commit(&mut journal, Record::DocumentImported(doc)).unwrap();
        let engine = Engine::new(EngineConfig::new(TOKEN), state, journal);
        Self {
            engine,
            inbox: BTreeMap::new(),
            worker_inbox: BTreeMap::new(),
            closed_workers: BTreeSet::new(),
            now: 1_000,
            doc: doc_id,
            users,
            next_rid: 1,
        }
    }

    pub fn ts(&self) -> Timestamp {
        Timestamp(self.now)
    }

    pub fn advance(&mut self, ms: u64) {
        self.now += ms;
    }

    pub fn deliver(&mut self, out: Vec<Outbound>) {
        for o in out {
            match o {
                Outbound::ToClient { session, message } => self.inbox.entry(session).or_default().push(message),
                Outbound::ToWorker { conn, message } => self.worker_inbox.entry(conn).or_default().push(message),
                Outbound::CloseWorker { conn } => {
                    self.closed_workers.insert(conn);
                }
            }
        }
    }

    pub fn connect(&mut self) -> SessionId {
        let now = self.ts();
        self.engine.connect_client(now)
    }

    /// Sends one frame and returns what this session received because of it.
    pub fn send_raw(&mut self, sid: SessionId, frame: &str) -> Vec<ProtocolMessage> {
        let before = self.inbox.get(&sid).map_or(0, Vec::len);
        let now = self.ts();
        let out = self.engine.client_frame(sid, frame, now);
        self.deliver(out);
        self.inbox.get(&sid).map_or_else(Vec::new, |v| v[before..].to_vec())
    }

    pub fn send(&mut self, sid: SessionId, msg_type: &str, payload: Value) -> Vec<ProtocolMessage> {
        let rid = format!("r{}", self.next_rid);
        self.next_rid += 1;
        let frame = json!({ "msg_type": msg_type, "request_id": rid, "payload": payload });
        self.send_raw(sid, &frame.to_string())
    }

    /// The reply addressed to the request just sent (ack, auth_ok, error...).
    pub fn request(&mut self, sid: SessionId, msg_type: &str, payload: Value) -> ProtocolMessage {
        let rid = format!("r{}", self.next_rid);
        let got = self.send(sid, msg_type, payload);
        got.into_iter().find(|m| m.request_id.as_deref() == Some(rid.as_str())).expect("a reply to the request")
    }

    pub fn login(&mut self, username: &str) -> SessionId {
        let sid = self.connect();
        let ack = self.request(sid, "hello", json!({ "protocol_version": 1 }));
        assert_eq!(ack.msg_type, MsgType::Ack);
        let ok = self.request(sid, "auth", json!({ "username": username, "password": password(username) }));
        assert_eq!(ok.msg_type, MsgType::AuthOk, "{ok:?}");
        sid
    }

    pub fn subscribe(&mut self, sid: SessionId) -> ProtocolMessage {
        let doc = self.doc.clone();
        self.request(sid, "subscribe", json!({ "documentId": doc }))
    }

    pub fn take(&mut self, sid: SessionId) -> Vec<ProtocolMessage> {
        self.inbox.remove(&sid).unwrap_or_default()
    }

    pub fn take_worker(&mut self, conn: ConnId) -> Vec<WorkerMessage> {
        self.worker_inbox.remove(&conn).unwrap_or_default()
    }

    pub fn worker(&mut self, node_id: &str, skill: &str) -> ConnId {
        let conn = self.engine.connect_worker();
        let reg = WorkerMessage::Register { token: TOKEN.into(), node_id: Some(node_id.into()), skills: vec![skill_ad(skill)] };
        self.worker_send(conn, &reg);
        let got = self.take_worker(conn);
        assert!(matches!(got.as_slice(), [WorkerMessage::Registered { .. }]), "{got:?}");
        conn
    }

    pub fn worker_send(&mut self, conn: ConnId, msg: &WorkerMessage) {
        let now = self.ts();
        let out = self.engine.worker_frame(conn, &serde_json::to_string(msg).unwrap(), now);
        self.deliver(out);
    }

    pub fn tick(&mut self) {
        let now = self.ts();
        let out = self.engine.tick(now);
        self.deliver(out);
    }

    /// Selectors for the first occurrence of `quote` in the fixture text.
    pub fn selectors_for(&self, quote: &str) -> Value {
        let doc = self.engine.state().document(&self.doc).unwrap();
        let text = doc.text();
        let joined: String = text.chars().iter().collect();
        let byte = joined.find(quote).expect("quote in fixture");
        let start = joined[..byte].chars().count();
        let sel = care_core::describe(&text, start, start + quote.chars().count()).unwrap();
        serde_json::to_value(sel).unwrap()
    }
}

impl Default for Harness {
    fn default() -> Self {
        Self::new()
    }
}

pub fn skill_ad(id: &str) -> SkillAd {
    let field = |k: &str| BTreeMap::from([(k.to_string(), "text".to_string())]);
    SkillAd::Full(Skill { skill_id: id.into(), input_schema: field("text"), output_schema: field("label_id"), config: Map::new() })
}

pub fn payload_str<'a>(m: &'a ProtocolMessage, key: &str) -> Option<&'a str> {
    m.payload.get(key).and_then(Value::as_str)
}

pub fn error_code(m: &ProtocolMessage) -> Option<&str> {
    (m.msg_type == MsgType::Error).then(|| payload_str(m, "code")).flatten()
}

pub mod broker_sim;
pub mod logs;
pub mod sync_sim;
