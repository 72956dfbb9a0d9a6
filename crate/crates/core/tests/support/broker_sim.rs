//! Two stub workers serving one skill, driven against the engine.
//!
//! A client submits one assistance request every 10 ms. Each worker answers
//! its jobs in arrival order after a latency. An independent model of the
//! routing rule (least in flight, then least recently dispatched, then node
//! id) predicts where each fresh job should go.

use std::collections::{BTreeMap, VecDeque};

use care_core::broker::{ConnId, JobId, WorkerMessage, HEARTBEAT_INTERVAL_MS};
use care_core::protocol::MsgType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map};

use super::Harness;

pub const SKILL: &str = "label-suggest";

#[derive(Clone, Copy)]
pub enum Latency {
    Fixed(u64),
    Random(u64, u64),
}

pub struct BrokerRun {
    /// Fresh jobs dispatched to each worker, by worker index.
    pub dispatched: [usize; 2],
    /// Fresh jobs whose node differed from the model's prediction.
    pub mispredicted: usize,
    /// Jobs moved to the survivor after the kill.
    pub rerouted: usize,
    /// Terminal replies (response or error) per request.
    pub terminal: BTreeMap<String, usize>,
    pub responses: usize,
    pub errors: usize,
}

impl BrokerRun {
    pub fn lost(&self) -> usize {
        self.terminal.values().filter(|n| **n == 0).count()
    }

    pub fn duplicated(&self) -> usize {
        self.terminal.values().filter(|n| **n > 1).count()
    }
}

struct Stub {
    conn: ConnId,
    alive: bool,
    queue: VecDeque<(JobId, u64)>,
    // model state
    inflight: u32,
    last_dispatch: Option<u64>,
}

/// `kill_after`: worker 0 disconnects once that many jobs were submitted.
pub fn run(seed: u64, jobs: usize, latency: Latency, kill_after: Option<usize>) -> BrokerRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Harness::new();
    let client = h.login("alice");
    h.take(client);
    let mut stubs: Vec<Stub> = ["w1", "w2"]
        .iter()
        .map(|n| Stub { conn: h.worker(n, SKILL), alive: true, queue: VecDeque::new(), inflight: 0, last_dispatch: None })
        .collect();
    let mut run = BrokerRun { dispatched: [0; 2], mispredicted: 0, rerouted: 0, terminal: BTreeMap::new(), responses: 0, errors: 0 };
    let mut dispatch_count = 0u64;
    let mut submitted = 0;
    let mut last_heartbeat = h.now;

    while submitted < jobs || stubs.iter().any(|s| s.alive && !s.queue.is_empty()) {
        h.advance(10);
        let now = h.now;

        if h.now - last_heartbeat >= HEARTBEAT_INTERVAL_MS {
            last_heartbeat = h.now;
            for s in stubs.iter().filter(|s| s.alive) {
                let conn = s.conn;
                h.worker_send(conn, &WorkerMessage::Heartbeat {});
            }
        }

        // workers answer what is due
        for s in stubs.iter_mut() {
            while s.alive && s.queue.front().is_some_and(|(_, due)| *due <= now) {
                let (job_id, _) = s.queue.pop_front().unwrap();
                let mut output = Map::new();
                output.insert("label_id".into(), json!("question"));
                h.worker_send(s.conn, &WorkerMessage::Result { job_id, output: Some(output), error: None });
                s.inflight -= 1;
            }
        }

        if kill_after == Some(submitted) && stubs[0].alive {
            stubs[0].alive = false;
            stubs[0].queue.clear();
            stubs[0].inflight = 0;
            let conn = stubs[0].conn;
            let out = h.engine.disconnect_worker(conn, h.ts());
            h.deliver(out);
            let moved = collect_jobs(&mut h, &mut stubs, &mut rng, latency, now);
            run.rerouted += moved.len();
        }

        if submitted < jobs {
            // the model's pick among live workers
            let predicted = (0..stubs.len())
                .filter(|&i| stubs[i].alive)
                .min_by_key(|&i| (stubs[i].inflight, stubs[i].last_dispatch, i))
                .unwrap();
            let rid = format!("assist-{submitted}");
            run.terminal.insert(rid.clone(), 0);
            let frame = json!({ "msg_type": "assist_request", "request_id": rid, "payload": { "skill": SKILL, "input": { "text": rid } } });
            h.send_raw(client, &frame.to_string());
            submitted += 1;
            let fresh = collect_jobs(&mut h, &mut stubs, &mut rng, latency, now);
            assert_eq!(fresh.len(), 1, "one dispatch per request");
            let (_, worker) = fresh[0];
            dispatch_count += 1;
            stubs[worker].last_dispatch = Some(dispatch_count);
            run.dispatched[worker] += 1;
            if worker != predicted {
                run.mispredicted += 1;
            }
        }

        h.tick();
        for m in h.take(client) {
            let Some(rid) = m.request_id.clone() else { continue };
            match m.msg_type {
                MsgType::AssistResponse => run.responses += 1,
                MsgType::Error => run.errors += 1,
                _ => continue,
            }
            *run.terminal.entry(rid).or_default() += 1;
        }
    }
    // let any stray timer fire
    h.advance(60_000);
    h.tick();
    for m in h.take(client) {
        if let Some(rid) = m.request_id.clone() {
            *run.terminal.entry(rid).or_default() += 1;
        }
    }
    run
}

/// Drains job frames from the worker inboxes into the stub queues.
fn collect_jobs(h: &mut Harness, stubs: &mut [Stub], rng: &mut impl Rng, latency: Latency, now: u64) -> Vec<(JobId, usize)> {
    let mut got = Vec::new();
    for (i, s) in stubs.iter_mut().enumerate() {
        for m in h.take_worker(s.conn) {
            if let WorkerMessage::Job { job_id, .. } = m {
                let delay = match latency {
                    Latency::Fixed(ms) => ms,
                    Latency::Random(lo, hi) => rng.gen_range(lo..=hi),
                };
                s.queue.push_back((job_id, now + delay));
                s.inflight += 1;
                got.push((job_id, i));
            }
        }
    }
    got
}
