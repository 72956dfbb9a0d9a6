//! Seeded scheduler for multi-client synchronization runs.
//!
//! Every client has an outgoing link to the server and an incoming link from
//! it; both are FIFO queues. At each step the scheduler picks, with a seeded
//! RNG, one of: a client issues an operation, one frame crosses an outgoing
//! link, or one message crosses an incoming link. Clients keep a replica
//! built only from their snapshot and the broadcasts that follow it.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, VecDeque};
use std::hash::{Hash, Hasher};

use care_core::anchoring::DocumentText;
use care_core::engine::SessionId;
use care_core::model::{CommentaryId, InlineCommentary, UserId};
use care_core::protocol::{CommBroadcast, CommOp, MsgType, ProtocolMessage, Snapshot};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::Harness;

pub struct SimClient {
    pub username: String,
    pub user_id: UserId,
    pub sid: SessionId,
    pub subscribed: bool,
    pub snapshot_seq: u64,
    next_seq: u64,
    pub replica: BTreeMap<CommentaryId, InlineCommentary>,
    /// `(seq, id, op)` of every broadcast applied, in arrival order.
    pub log: Vec<(u64, CommentaryId, CommOp)>,
    outgoing: VecDeque<String>,
    incoming: VecDeque<ProtocolMessage>,
    pub known: Vec<CommentaryId>,
    pub violations: Vec<String>,
    pub errors: usize,
}

pub struct SimReport {
    pub clients: Vec<SimClient>,
    pub server_live: BTreeMap<CommentaryId, InlineCommentary>,
    pub server_seq: u64,
    pub ops_sent: usize,
    pub ops_acked: usize,
    /// Hash of every message every client received, in order.
    pub transcript: u64,
}

impl SimReport {
    /// All replicas equal each other and the server's live set.
    pub fn converged(&self) -> bool {
        self.clients.iter().all(|c| c.replica == self.server_live)
    }

    /// Every client saw exactly the writes after its snapshot, as one
    /// contiguous run of sequence numbers, and all clients agree on which
    /// write carries each sequence number.
    pub fn order_consistent(&self) -> bool {
        let mut by_seq: BTreeMap<u64, (&CommentaryId, CommOp)> = BTreeMap::new();
        for c in &self.clients {
            let expected: Vec<u64> = (c.snapshot_seq + 1..=self.server_seq).collect();
            let got: Vec<u64> = c.log.iter().map(|e| e.0).collect();
            if got != expected {
                return false;
            }
            for (seq, id, op) in &c.log {
                if *by_seq.entry(*seq).or_insert((id, *op)) != (id, *op) {
                    return false;
                }
            }
        }
        true
    }

    pub fn violations(&self) -> Vec<String> {
        self.clients.iter().flat_map(|c| c.violations.iter().map(move |v| format!("{}: {v}", c.username))).collect()
    }
}

/// `late` lists `(client index, ops sent so far)` at which that client
/// subscribes; everyone else subscribes before the first op.
pub fn run(seed: u64, ops: usize, late: &[(usize, usize)]) -> SimReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Harness::new();
    let names = ["admin", "alice", "bob", "carol", "dave"];
    let mut clients: Vec<SimClient> = names
        .iter()
        .map(|n| SimClient {
            username: n.to_string(),
            user_id: h.users[*n].clone(),
            sid: h.login(n),
            subscribed: false,
            snapshot_seq: 0,
            next_seq: 0,
            replica: BTreeMap::new(),
            log: Vec::new(),
            outgoing: VecDeque::new(),
            incoming: VecDeque::new(),
            known: Vec::new(),
            violations: Vec::new(),
            errors: 0,
        })
        .collect();
    for c in &clients {
        h.inbox.remove(&c.sid);
    }
    let doc = h.doc.clone();
    let text: DocumentText = h.engine.state().document(&doc).unwrap().text();
    let subscribe = json!({ "msg_type": "subscribe", "payload": { "documentId": doc } }).to_string();
    let mut pending_late: Vec<(usize, usize)> = late.to_vec();
    for (i, c) in clients.iter_mut().enumerate() {
        if !late.iter().any(|(j, _)| *j == i) {
            c.outgoing.push_back(subscribe.clone());
        }
    }

    let mut ops_sent = 0;
    let mut ops_acked = 0;
    let mut hasher = DefaultHasher::new();
    let mut rid = 0u64;
    loop {
        pending_late.retain(|&(i, at)| {
            if ops_sent >= at {
                clients[i].outgoing.push_back(subscribe.clone());
                false
            } else {
                true
            }
        });
        let can_issue = ops_sent < ops;
        let busy_links = clients.iter().any(|c| !c.outgoing.is_empty() || !c.incoming.is_empty());
        if !can_issue && !busy_links && pending_late.is_empty() {
            break;
        }
        h.advance(rng.gen_range(1..20));
        let i = rng.gen_range(0..clients.len());
        match rng.gen_range(0..3) {
            0 if can_issue && clients[i].subscribed => {
                rid += 1;
                let frame = random_op(&mut rng, &clients[i], &text, &doc, rid);
                clients[i].outgoing.push_back(frame);
                ops_sent += 1;
            }
            1 => {
                if let Some(frame) = clients[i].outgoing.pop_front() {
                    let sid = clients[i].sid;
                    h.send_raw(sid, &frame);
                    // move everything the engine produced onto the links
                    for c in clients.iter_mut() {
                        if let Some(msgs) = h.inbox.remove(&c.sid) {
                            c.incoming.extend(msgs);
                        }
                    }
                }
            }
            _ => {
                if let Some(m) = clients[i].incoming.pop_front() {
                    m.to_json().hash(&mut hasher);
                    i.hash(&mut hasher);
                    if receive(&mut clients[i], m) {
                        ops_acked += 1;
                    }
                }
            }
        }
    }

    let snap = h.engine.snapshot(&doc);
    SimReport {
        server_live: snap.annotations.into_iter().map(|c| (c.commentary_id.clone(), c)).collect(),
        server_seq: snap.seq,
        clients,
        ops_sent,
        ops_acked,
        transcript: hasher.finish(),
    }
}

fn random_op(rng: &mut impl Rng, c: &SimClient, text: &DocumentText, doc: &care_core::model::DocumentId, rid: u64) -> String {
    // only the admin may touch other people's commentaries
    let targets: Vec<&CommentaryId> =
        c.replica.values().filter(|a| c.username == "admin" || a.author == c.user_id).map(|a| &a.commentary_id).collect();
    let kind = if targets.is_empty() { 0 } else { rng.gen_range(0..4) };
    let rid = format!("op{rid}");
    let (msg_type, payload) = match kind {
        0 | 1 => {
            let mut p = json!({ "documentId": doc, "text": format!("note {rid}") });
            if rng.gen_bool(0.6) {
                let start = rng.gen_range(0..text.len() - 10);
                let end = start + rng.gen_range(1..10);
                p["selectors"] = serde_json::to_value(care_core::describe(text, start, end).unwrap()).unwrap();
            }
            if rng.gen_bool(0.5) {
                p["label"] = json!(["strength", "weakness", "question"].choose(rng).unwrap());
            }
            ("comm_create", p)
        }
        2 => {
            let id = targets.choose(rng).unwrap();
            ("comm_update", json!({ "id": id, "text": format!("edit {rid}"), "tags": [format!("t{}", rng.gen_range(0..5))] }))
        }
        _ => ("comm_delete", json!({ "id": targets.choose(rng).unwrap() })),
    };
    json!({ "msg_type": msg_type, "request_id": rid, "payload": payload }).to_string()
}

/// Applies one message to the client. Returns true for an ack of a write.
fn receive(c: &mut SimClient, m: ProtocolMessage) -> bool {
    match m.msg_type {
        MsgType::Ack if m.payload.get("annotations").is_some() => {
            let snap: Snapshot = m.payload_as().expect("snapshot payload");
            if c.subscribed {
                c.violations.push("second snapshot".into());
            }
            c.subscribed = true;
            c.snapshot_seq = snap.seq;
            c.next_seq = snap.seq + 1;
            c.replica = snap.annotations.into_iter().map(|a| (a.commentary_id.clone(), a)).collect();
            false
        }
        MsgType::Ack => m.request_id.as_deref().is_some_and(|r| r.starts_with("op")),
        MsgType::CommBroadcast => {
            let seq = m.seq.unwrap_or(0);
            if !c.subscribed {
                c.violations.push(format!("broadcast {seq} before snapshot"));
            }
            if seq != c.next_seq {
                c.violations.push(format!("expected seq {}, got {seq}", c.next_seq));
            }
            c.next_seq = seq + 1;
            let b: CommBroadcast = m.payload_as().expect("broadcast payload");
            let id = b.annotation.commentary_id.clone();
            match b.op {
                CommOp::Create | CommOp::Update => {
                    c.replica.insert(id.clone(), b.annotation);
                }
                CommOp::Delete => {
                    c.replica.remove(&id);
                }
            }
            if !c.known.contains(&id) {
                c.known.push(id.clone());
            }
            c.log.push((seq, id, b.op));
            false
        }
        MsgType::Error => {
            c.errors += 1;
            if m.payload.get("code") != Some(&Value::from("unknown-commentary")) && m.payload.get("code") != Some(&Value::from("forbidden")) {
                c.violations.push(format!("unexpected error {}", m.payload));
            }
            false
        }
        _ => false,
    }
}
