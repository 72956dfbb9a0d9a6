//! Corpus builder and process helpers shared by the server tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use care_core::model::{
    CommentaryId, Document, DocumentId, InlineCommentary, Label, LabelId, LabelSet, LabelSetId, Origin, Role, Timestamp,
    User, UserId,
};
use care_core::analytics::BehaviorEvent;
use care_core::{describe, MemoryJournal, Record, State};
use care_server::pdf;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub fn labelset() -> LabelSet {
    let label = |id: &str| Label { label_id: LabelId::new(id), display_name: id.into(), color: "#777".into() };
    LabelSet {
        labelset_id: LabelSetId::new("review"),
        name: "Review".into(),
        labels: vec![label("strength"), label("weakness"), label("question")],
    }
}

/// A state holding only the label set, ready to receive an import.
pub fn empty_state() -> State {
    let mut s = State::new();
    s.commit(&mut MemoryJournal::default(), Record::LabelSetDefined(labelset())).unwrap();
    s
}

const WORDS: &[&str] = &[
    "reading", "peer", "review", "anchor", "note", "thread", "paper", "method", "result", "claim", "evidence", "figure",
    "table", "section", "argument", "sample", "bias", "data", "model", "study",
];

pub fn sentence(rng: &mut impl Rng, words: usize) -> String {
    (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub struct Corpus {
    pub state: State,
    pub pdfs: BTreeMap<DocumentId, Vec<u8>>,
    pub docs: Vec<DocumentId>,
    pub users: Vec<UserId>,
}

pub struct Shape {
    pub documents: usize,
    pub annotations: usize,
    pub tombstones: usize,
    /// Annotations carrying note text; the rest are bare highlights.
    pub with_text: usize,
    pub events: usize,
}

impl Shape {
    pub const STANDARD: Shape = Shape { documents: 3, annotations: 200, tombstones: 35, with_text: 151, events: 1000 };
}

/// An admin plus eight users, every other one opted in to behavior logging.
pub fn corpus(seed: u64, shape: &Shape) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = empty_state();
    let mut j = MemoryJournal::default();
    let mut users = Vec::new();
    for i in 0..9 {
        let user = User {
            user_id: UserId::new(format!("u{:010}", i + 1)),
            username: if i == 0 { "admin".into() } else { format!("reader{i}") },
            email: format!("r{i}@example.org"),
            role: if i == 0 { Role::Admin } else { Role::User },
            consent_given: true,
            behavior_optin: i % 2 == 1,
            registered_at: Timestamp(i as u64),
            consent_accepted_at: Some(Timestamp(i as u64)),
        };
        users.push(user.user_id.clone());
        state.commit(&mut j, Record::UserRegistered { user, credential: None }).unwrap();
    }

    let mut pdfs = BTreeMap::new();
    let mut docs = Vec::new();
    for d in 0..shape.documents {
        let pages: Vec<String> = (0..rng.gen_range(2..5)).map(|_| sentence(&mut rng, 12)).collect();
        let refs: Vec<&str> = pages.iter().map(String::as_str).collect();
        let bytes = pdf::build_text_pdf(&refs);
        let ex = pdf::extract(&bytes).unwrap();
        let doc = Document {
            document_id: DocumentId::new(ex.content_hash.clone()),
            title: format!("Paper {d}"),
            page_count: ex.pages.len(),
            text_layer: ex.pages,
            uploaded_by: users[0].clone(),
            uploaded_at: Timestamp(100 + d as u64),
        };
        docs.push(doc.document_id.clone());
        pdfs.insert(doc.document_id.clone(), bytes);
        state.commit(&mut j, Record::DocumentImported(doc)).unwrap();
    }

    let bare = shape.annotations - shape.with_text;
    let mut roots: BTreeMap<DocumentId, Vec<CommentaryId>> = BTreeMap::new();
    let mut ids = Vec::new();
    for i in 0..shape.annotations {
        let doc_id = docs[i % docs.len()].clone();
        let text = state.document(&doc_id).unwrap().text();
        let doc_roots = roots.entry(doc_id.clone()).or_default();
        let reply = i >= bare && !doc_roots.is_empty() && rng.gen_bool(0.25);
        let anchored = i < bare || (!reply && rng.gen_bool(0.8));
        let anchor = anchored.then(|| {
            let start = rng.gen_range(0..text.len() - 12);
            describe(&text, start, start + rng.gen_range(3..12)).unwrap()
        });
        let id = state.next_commentary_id();
        let c = InlineCommentary {
            commentary_id: id.clone(),
            document_id: doc_id,
            author: users[rng.gen_range(0..users.len())].clone(),
            anchor,
            note_text: (i >= bare).then(|| sentence(&mut rng, 6)),
            label_id: (!reply && rng.gen_bool(0.5)).then(|| LabelId::new(["strength", "weakness", "question"][rng.gen_range(0..3)])),
            tags: if rng.gen_bool(0.3) { vec![format!("t{}", rng.gen_range(0..4))] } else { vec![] },
            created_at: Timestamp(10_000 + 1_000 * i as u64),
            updated_at: Timestamp(10_000 + 1_000 * i as u64),
            parent_id: reply.then(|| doc_roots.choose(&mut rng).unwrap().clone()),
            deleted: false,
            origin: if reply && rng.gen_bool(0.2) { Origin::Assistant } else { Origin::Human },
        };
        if !reply {
            doc_roots.push(id.clone());
        }
        ids.push(id);
        state.commit(&mut j, Record::CommentaryPut(c)).unwrap();
    }
    let mut doomed = ids.clone();
    doomed.shuffle(&mut rng);
    for id in doomed.into_iter().take(shape.tombstones) {
        let mut c = state.commentary(&id).unwrap().clone();
        c.deleted = true;
        c.updated_at = Timestamp(c.created_at.0 + 500);
        state.commit(&mut j, Record::CommentaryPut(c)).unwrap();
    }

    // sessions of ten events per opted-in reader and document
    let optin: Vec<UserId> = users.iter().filter(|u| state.user(u).unwrap().behavior_optin).cloned().collect();
    let mut t = 1_000_000u64;
    let mut emitted = 0;
    while emitted < shape.events {
        let user = optin.choose(&mut rng).unwrap().clone();
        let doc = docs.choose(&mut rng).unwrap().clone();
        let pages = state.document(&doc).unwrap().page_count;
        let n = (shape.events - emitted).min(10);
        for k in 0..n {
            t += rng.gen_range(1..30_000);
            let (kind, payload) = match k {
                0 => ("doc_enter", json!({})),
                _ if k == n - 1 && n == 10 => ("doc_leave", json!({})),
                _ => match rng.gen_range(0..5) {
                    0 | 1 => ("page_view", json!({ "pageIndex": rng.gen_range(0..pages) })),
                    2 => ("comm_create", json!({ "commentaryId": format!("c{t}") })),
                    3 => ("comm_delete", json!({})),
                    _ => ("button_click", json!({ "buttonId": "sort" })),
                },
            };
            let payload: Map<String, Value> = payload.as_object().cloned().unwrap();
            let e = BehaviorEvent::new(kind, payload, Timestamp(t), Some(Timestamp(t - 3)), user.clone(), doc.clone()).unwrap();
            state.commit(&mut j, Record::BehaviorStored(e)).unwrap();
        }
        emitted += n;
    }
    Corpus { state, pdfs, docs, users }
}

/// Serialized bundle with `exported_at` blanked.
pub fn without_exported_at(json: &str) -> String {
    let mut v: Value = serde_json::from_str(json).unwrap();
    v.as_object_mut().unwrap().remove("exported_at");
    serde_json::to_string_pretty(&v).unwrap()
}

pub fn care(data_dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_care"));
    cmd.arg("--data-dir").arg(data_dir).env_remove("CARE_CONFIG").env_remove("CARE_BROKER_TOKEN");
    cmd
}

/// Runs a command to completion, panicking with its stderr on failure.
pub fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn care");
    assert!(out.status.success(), "{cmd:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

pub mod ws {
    //! Minimal WebSocket test client.

    use std::time::Duration;

    use futures_util::{SinkExt, StreamExt};
    use serde_json::Value;
    use tokio::net::TcpStream;
    use tokio_tungstenite::tungstenite::Message;
    use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

    pub struct Ws {
        inner: WebSocketStream<MaybeTlsStream<TcpStream>>,
        /// Frames received while waiting for something else.
        pub seen: Vec<Value>,
    }

    impl Ws {
        pub async fn connect(url: &str) -> Ws {
            let (inner, _) = connect_async(url).await.unwrap_or_else(|e| panic!("connect {url}: {e}"));
            Ws { inner, seen: Vec::new() }
        }

        pub async fn send(&mut self, v: &Value) {
            self.inner.send(Message::text(v.to_string())).await.unwrap();
        }

        /// Next text frame as JSON, `None` on close or after `wait`.
        pub async fn next(&mut self, wait: Duration) -> Option<Value> {
            loop {
                match tokio::time::timeout(wait, self.inner.next()).await {
                    Ok(Some(Ok(Message::Text(t)))) => return Some(serde_json::from_str(t.as_str()).unwrap()),
                    Ok(Some(Ok(Message::Close(_)))) | Ok(None) | Ok(Some(Err(_))) | Err(_) => return None,
                    Ok(Some(Ok(_))) => continue,
                }
            }
        }

        /// Reads frames until one matches, keeping the others in `seen`.
        pub async fn until(&mut self, what: &str, pred: impl Fn(&Value) -> bool) -> Value {
            loop {
                let v = self.next(Duration::from_secs(10)).await.unwrap_or_else(|| panic!("no {what} frame"));
                if pred(&v) {
                    return v;
                }
                self.seen.push(v);
            }
        }

        /// Sends a client request and waits for the reply carrying its id.
        pub async fn request(&mut self, msg_type: &str, rid: &str, payload: Value) -> Value {
            self.send(&serde_json::json!({ "msg_type": msg_type, "request_id": rid, "payload": payload })).await;
            self.until(rid, |v| v["request_id"] == rid).await
        }

        pub async fn login(url: &str, username: &str, password: &str) -> Ws {
            let mut ws = Ws::connect(url).await;
            let ack = ws.request("hello", "h", serde_json::json!({ "protocol_version": 1 })).await;
            assert_eq!(ack["msg_type"], "ack", "{ack}");
            let ok = ws.request("auth", "a", serde_json::json!({ "username": username, "password": password })).await;
            assert_eq!(ok["msg_type"], "auth_ok", "{ok}");
            ws
        }
    }
}
