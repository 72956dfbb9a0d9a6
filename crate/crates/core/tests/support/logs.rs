//! Behavioral log generators and brute-force metric oracles.

use std::collections::BTreeMap;

use care_core::analytics::{BehaviorEvent, EventKind};
use care_core::model::{DocumentId, Timestamp, UserId};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

pub fn event(kind: &str, ts: u64, user: &str, doc: &str, payload: Value) -> BehaviorEvent {
    let payload: Map<String, Value> = payload.as_object().cloned().unwrap_or_default();
    BehaviorEvent::new(kind, payload, Timestamp(ts), None, UserId::new(user), DocumentId::new(doc)).unwrap()
}

/// A shuffled log over a few users and documents. Most pairs have proper
/// enter and leave events; some lack one of them, some share timestamps.
pub fn random_log(rng: &mut impl Rng, max_window_ms: u64) -> Vec<BehaviorEvent> {
    let mut out = Vec::new();
    let mut next_comm = 0;
    for u in 0..rng.gen_range(1..4) {
        for d in 0..rng.gen_range(1..3) {
            let (user, doc) = (format!("u{u}"), format!("d{d}"));
            let t_e = rng.gen_range(0..1_000_000u64);
            let len = rng.gen_range(1..max_window_ms);
            let has_enter = rng.gen_bool(0.95);
            let has_leave = rng.gen_bool(0.85);
            if has_enter {
                out.push(event("doc_enter", t_e, &user, &doc, json!({})));
            }
            for _ in 0..rng.gen_range(0..25) {
                // a few events before t_e or after t_l
                let ts = t_e + rng.gen_range(0..=len + len / 10) - rng.gen_range(0..=len / 20).min(t_e);
                let ev = match rng.gen_range(0..6) {
                    0..=2 => event("page_view", ts, &user, &doc, json!({ "pageIndex": rng.gen_range(0..9) })),
                    3 => {
                        next_comm += 1;
                        event("comm_create", ts, &user, &doc, json!({ "commentaryId": format!("c{next_comm}") }))
                    }
                    4 => event("comm_delete", ts, &user, &doc, json!({})),
                    _ => event("button_click", ts, &user, &doc, json!({ "buttonId": "sort" })),
                };
                out.push(ev);
                if rng.gen_bool(0.1) {
                    // same timestamp, different page
                    out.push(event("page_view", ts, &user, &doc, json!({ "pageIndex": rng.gen_range(0..9) })));
                }
            }
            if has_leave {
                out.push(event("doc_leave", t_e + len, &user, &doc, json!({})));
            }
        }
    }
    out.shuffle(rng);
    out
}

/// Window of a pair computed straight from the definition: earliest
/// `doc_enter`, latest `doc_leave` after it. `None` when either is missing.
pub fn oracle_window(events: &[BehaviorEvent], user: &UserId, doc: &DocumentId) -> Option<(u64, u64)> {
    let mine = || events.iter().filter(|e| &e.user_id == user && &e.document_id == doc);
    let t_e = mine().filter(|e| e.kind == EventKind::DocEnter).map(|e| e.ts.0).min()?;
    let t_l = mine().filter(|e| e.kind == EventKind::DocLeave && e.ts.0 > t_e).map(|e| e.ts.0).max()?;
    Some((t_e, t_l))
}

/// Per-page share of the window by walking every millisecond and
/// crediting the page of the latest view at or before it. Views with equal
/// timestamps resolve to the one logged last.
pub fn grid_page_oracle(events: &[BehaviorEvent], user: &UserId, doc: &DocumentId) -> Option<BTreeMap<usize, f64>> {
    let (t_e, t_l) = oracle_window(events, user, doc)?;
    let mut views: Vec<(u64, usize, usize)> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| &e.user_id == user && &e.document_id == doc && (t_e..=t_l).contains(&e.ts.0))
        .filter_map(|(i, e)| match e.kind {
            EventKind::PageView { page_index } => Some((e.ts.0, i, page_index)),
            _ => None,
        })
        .collect();
    views.sort();
    let mut ms: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cursor = 0;
    let mut current: Option<usize> = None;
    for t in t_e..t_l {
        while cursor < views.len() && views[cursor].0 <= t {
            current = Some(views[cursor].2);
            cursor += 1;
        }
        if let Some(p) = current {
            *ms.entry(p).or_default() += 1;
        }
    }
    // pages viewed only at an instant still appear, with zero time
    for v in &views {
        ms.entry(v.2).or_default();
    }
    let total = (t_l - t_e) as f64;
    Some(ms.into_iter().map(|(p, m)| (p, m as f64 / total)).collect())
}

/// Creation reltime histogram by an independent recount: for each
/// `comm_create`, find the bin `i` with `i/bins <= reltime < (i+1)/bins`
/// by exact rational comparison (reltime 1 goes to the last bin).
pub fn histogram_oracle(events: &[BehaviorEvent], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for e in events.iter().filter(|e| matches!(e.kind, EventKind::CommCreate { .. })) {
        let Some((t_e, t_l)) = oracle_window(events, &e.user_id, &e.document_id) else { continue };
        let t = e.ts.0;
        if t < t_e || t > t_l {
            continue;
        }
        let (num, den) = ((t - t_e) as u128, (t_l - t_e) as u128);
        let bin = (0..bins)
            .find(|&i| (i as u128) * den <= num * bins as u128 && num * (bins as u128) < (i as u128 + 1) * den)
            .unwrap_or(bins - 1);
        counts[bin] += 1;
    }
    counts
}

/// Cohort whose median completion time is 37.82 minutes and whose
/// deletion rate is 35 / 200.
pub fn cohort_fixture() -> Vec<BehaviorEvent> {
    let minutes = [31.5, 34.0, 36.25, 37.0, 37.82, 38.5, 40.0, 44.75, 52.0];
    let mut out = Vec::new();
    let mut created = 0;
    let mut deleted = 0;
    for (u, m) in minutes.iter().enumerate() {
        let user = format!("p{u}");
        let t_e = 1_000_000 * (u as u64 + 1);
        let dur = (m * 60_000.0f64).round() as u64;
        out.push(event("doc_enter", t_e, &user, "paper", json!({})));
        out.push(event("page_view", t_e, &user, "paper", json!({ "pageIndex": 0 })));
        // spread 200 creates and 35 deletes over the cohort
        let creates = if u < 2 { 23 } else { 22 };
        for k in 0..creates {
            created += 1;
            let ts = t_e + dur * (k + 1) / (creates + 1);
            out.push(event("comm_create", ts, &user, "paper", json!({ "commentaryId": format!("c{created}") })));
            if deleted < 35 && k % 5 == 4 {
                deleted += 1;
                out.push(event("comm_delete", ts + 1, &user, "paper", json!({ "commentaryId": format!("c{created}") })));
            }
        }
        out.push(event("doc_leave", t_e + dur, &user, "paper", json!({})));
    }
    assert_eq!((created, deleted), (200, 35));
    out
}
