//! Behavioral event taxonomy and the reading/commenting metrics computed
//! from event logs.
//!
//! All metrics use server timestamps. A user's session window on a document
//! runs from the first `doc_enter` to the last `doc_leave` after it; a pair
//! without a `doc_leave` gets a synthetic window closed by its last event,
//! which is flagged and excluded from the time-normalised metrics.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{CommentaryId, DocumentId, Timestamp, UserId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    DocEnter,
    DocLeave,
    PageView { page_index: usize },
    CommCreate { commentary_id: CommentaryId },
    CommEdit { commentary_id: Option<CommentaryId> },
    CommDelete { commentary_id: Option<CommentaryId> },
    QuickscrollToSidebar,
    QuickscrollToHighlight,
    ButtonClick { button_id: String },
    /// Client-reported text selection made to start a highlight.
    TextSelect,
}

pub const EVENT_TYPES: [&str; 10] = [
    "doc_enter",
    "doc_leave",
    "page_view",
    "comm_create",
    "comm_edit",
    "comm_delete",
    "quickscroll_to_sidebar",
    "quickscroll_to_highlight",
    "button_click",
    "text_select",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventError {
    UnknownType(String),
    MissingField { event_type: &'static str, field: &'static str },
}

impl fmt::Display for EventError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventError::UnknownType(t) => write!(f, "unknown event type {t:?}"),
            EventError::MissingField { event_type, field } => write!(f, "{event_type} requires payload field {field}"),
        }
    }
}

impl EventKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventKind::DocEnter => "doc_enter",
            EventKind::DocLeave => "doc_leave",
            EventKind::PageView { .. } => "page_view",
            EventKind::CommCreate { .. } => "comm_create",
            EventKind::CommEdit { .. } => "comm_edit",
            EventKind::CommDelete { .. } => "comm_delete",
            EventKind::QuickscrollToSidebar => "quickscroll_to_sidebar",
            EventKind::QuickscrollToHighlight => "quickscroll_to_highlight",
            EventKind::ButtonClick { .. } => "button_click",
            EventKind::TextSelect => "text_select",
        }
    }

    /// Reads the typed part of an event from its wire `type` and `payload`.
    pub fn parse(type_name: &str, payload: &Map<String, Value>) -> Result<Self, EventError> {
        let str_field = |k: &str| payload.get(k).and_then(Value::as_str).map(String::from);
        let commentary = |k: &str| str_field(k).map(CommentaryId);
        Ok(match type_name {
            "doc_enter" => EventKind::DocEnter,
            "doc_leave" => EventKind::DocLeave,
            "page_view" => EventKind::PageView {
                page_index: payload
                    .get("pageIndex")
                    .and_then(Value::as_u64)
                    .ok_or(EventError::MissingField { event_type: "page_view", field: "pageIndex" })?
                    as usize,
            },
            "comm_create" => EventKind::CommCreate {
                commentary_id: commentary("commentaryId")
                    .ok_or(EventError::MissingField { event_type: "comm_create", field: "commentaryId" })?,
            },
            "comm_edit" => EventKind::CommEdit { commentary_id: commentary("commentaryId") },
            "comm_delete" => EventKind::CommDelete { commentary_id: commentary("commentaryId") },
            "quickscroll_to_sidebar" => EventKind::QuickscrollToSidebar,
            "quickscroll_to_highlight" => EventKind::QuickscrollToHighlight,
            "button_click" => EventKind::ButtonClick {
                button_id: str_field("buttonId")
                    .ok_or(EventError::MissingField { event_type: "button_click", field: "buttonId" })?,
            },
            "text_select" => EventKind::TextSelect,
            other => return Err(EventError::UnknownType(other.to_string())),
        })
    }

    fn is_interaction(&self) -> bool {
        matches!(
            self,
            EventKind::CommCreate { .. }
                | EventKind::CommEdit { .. }
                | EventKind::CommDelete { .. }
                | EventKind::QuickscrollToSidebar
                | EventKind::QuickscrollToHighlight
                | EventKind::TextSelect
        )
    }
}

/// One logged interaction. Serialises as the export event object
/// `{type, ts, clientTs, userId, documentId, payload}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EventRecord", into = "EventRecord")]
pub struct BehaviorEvent {
    pub kind: EventKind,
    pub ts: Timestamp,
    pub client_ts: Option<Timestamp>,
    pub user_id: UserId,
    pub document_id: DocumentId,
    /// Type-specific data as sent by the client, kept verbatim.
    pub payload: Map<String, Value>,
}

impl BehaviorEvent {
    pub fn new(
        type_name: &str,
        payload: Map<String, Value>,
        ts: Timestamp,
        client_ts: Option<Timestamp>,
        user_id: UserId,
        document_id: DocumentId,
    ) -> Result<Self, EventError> {
        let kind = EventKind::parse(type_name, &payload)?;
        Ok(Self { kind, ts, client_ts, user_id, document_id, payload })
    }

    fn pair(&self) -> PairKey {
        PairKey { user_id: self.user_id.clone(), document_id: self.document_id.clone() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct EventRecord {
    #[serde(rename = "type")]
    event_type: String,
    ts: Timestamp,
    client_ts: Option<Timestamp>,
    user_id: UserId,
    document_id: DocumentId,
    payload: Map<String, Value>,
}

impl TryFrom<EventRecord> for BehaviorEvent {
    type Error = EventError;

    fn try_from(r: EventRecord) -> Result<Self, Self::Error> {
        BehaviorEvent::new(&r.event_type, r.payload, r.ts, r.client_ts, r.user_id, r.document_id)
    }
}

impl From<BehaviorEvent> for EventRecord {
    fn from(e: BehaviorEvent) -> Self {
        EventRecord {
            event_type: e.kind.type_name().to_string(),
            ts: e.ts,
            client_ts: e.client_ts,
            user_id: e.user_id,
            document_id: e.document_id,
            payload: e.payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PairKey {
    pub user_id: UserId,
    pub document_id: DocumentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionWindow {
    pub user_id: UserId,
    pub document_id: DocumentId,
    pub t_e: Timestamp,
    pub t_l: Timestamp,
    /// No `doc_leave` was logged; `t_l` is the pair's last event.
    pub synthetic: bool,
}

impl SessionWindow {
    pub fn duration_ms(&self) -> u64 {
        self.t_l.0 - self.t_e.0
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.t_e <= t && t <= self.t_l
    }

    fn key(&self) -> PairKey {
        PairKey { user_id: self.user_id.clone(), document_id: self.document_id.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmatchedReason {
    NoEnter,
    NoLeave,
    EmptyWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Unmatched {
    #[serde(flatten)]
    pub pair: PairKey,
    pub reason: UnmatchedReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutsideWindow;

impl fmt::Display for OutsideWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("event time lies outside the session window")
    }
}

/// `(t_c - t_e) / (t_l - t_e)`.
pub fn reltime(t_c: Timestamp, window: &SessionWindow) -> Result<f64, OutsideWindow> {
    if !window.contains(t_c) || window.t_l <= window.t_e {
        return Err(OutsideWindow);
    }
    Ok((t_c.0 - window.t_e.0) as f64 / window.duration_ms() as f64)
}

fn group_by_pair(events: &[BehaviorEvent]) -> BTreeMap<PairKey, Vec<&BehaviorEvent>> {
    let mut groups: BTreeMap<PairKey, Vec<&BehaviorEvent>> = BTreeMap::new();
    for e in events {
        groups.entry(e.pair()).or_default().push(e);
    }
    for evs in groups.values_mut() {
        // stable: equal timestamps keep log order
        evs.sort_by_key(|e| e.ts);
    }
    groups
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: BTreeMap<PairKey, SessionWindow>,
    pub unmatched: Vec<Unmatched>,
}

impl WindowSet {
    /// Windows with both boundary events logged.
    pub fn matched(&self) -> impl Iterator<Item = &SessionWindow> {
        self.windows.values().filter(|w| !w.synthetic)
    }
}

/// Resolves one window per user-document pair.
pub fn resolve_windows(events: &[BehaviorEvent]) -> WindowSet {
    let mut set = WindowSet::default();
    for (pair, evs) in group_by_pair(events) {
        let Some(enter) = evs.iter().find(|e| e.kind == EventKind::DocEnter) else {
            set.unmatched.push(Unmatched { pair, reason: UnmatchedReason::NoEnter });
            continue;
        };
        let t_e = enter.ts;
        let leave = evs.iter().rev().find(|e| e.kind == EventKind::DocLeave && e.ts > t_e);
        let (t_l, synthetic) = match leave {
            Some(l) => (l.ts, false),
            None => (evs.last().map_or(t_e, |e| e.ts), true),
        };
        if t_l <= t_e {
            set.unmatched.push(Unmatched { pair, reason: UnmatchedReason::EmptyWindow });
            continue;
        }
        if synthetic {
            set.unmatched.push(Unmatched { pair: pair.clone(), reason: UnmatchedReason::NoLeave });
        }
        set.windows.insert(
            pair.clone(),
            SessionWindow { user_id: pair.user_id, document_id: pair.document_id, t_e, t_l, synthetic },
        );
    }
    set
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<u64>,
    /// Pairs whose window could not be resolved from logged boundaries.
    pub unmatched: Vec<Unmatched>,
    /// `comm_create` events left out: unmatched pair or outside the window.
    pub excluded_events: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Bin of `t` in `bins` equal slices of the window, edges
/// `[i/bins, (i+1)/bins)`, with `reltime == 1` in the last bin. Integer
/// arithmetic keeps edges exact.
fn bin_of(t: Timestamp, w: &SessionWindow, bins: usize) -> usize {
    let num = (t.0 - w.t_e.0) as u128 * bins as u128;
    let idx = (num / w.duration_ms() as u128) as usize;
    idx.min(bins - 1)
}

/// Histogram of commentary creation reltimes pooled across users.
pub fn reltime_histogram(events: &[BehaviorEvent], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let windows = resolve_windows(events);
    let mut counts = vec![0u64; bins];
    let mut excluded = 0;
    for e in events.iter().filter(|e| matches!(e.kind, EventKind::CommCreate { .. })) {
        match windows.windows.get(&e.pair()) {
            Some(w) if !w.synthetic && w.contains(e.ts) => counts[bin_of(e.ts, w, bins)] += 1,
            _ => excluded += 1,
        }
    }
    Histogram { bins, counts, unmatched: windows.unmatched, excluded_events: excluded }
}

/// Share of the window spent on each page, from consecutive `page_view`
/// events of the window's pair. The last view is closed by `t_l`.
pub fn page_reading_times(events: &[BehaviorEvent], window: &SessionWindow) -> BTreeMap<usize, f64> {
    let key = window.key();
    let mut views: Vec<(Timestamp, usize)> = events
        .iter()
        .filter(|e| e.pair() == key && window.contains(e.ts))
        .filter_map(|e| match e.kind {
            EventKind::PageView { page_index } => Some((e.ts, page_index)),
            _ => None,
        })
        .collect();
    views.sort_by_key(|v| v.0);

    let mut credit: BTreeMap<usize, u64> = BTreeMap::new();
    for (i, &(ts, page)) in views.iter().enumerate() {
        let until = views.get(i + 1).map_or(window.t_l, |v| v.0);
        *credit.entry(page).or_default() += until.0 - ts.0;
    }
    let total = window.duration_ms() as f64;
    credit.into_iter().map(|(p, ms)| (p, ms as f64 / total)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskTiming {
    pub user_id: UserId,
    pub document_id: DocumentId,
    /// `t_l - t_e` in ms; `None` when no `doc_leave` was logged.
    pub time_to_completion_ms: Option<u64>,
    /// Time from `t_e` to the first interaction in ms; `None` when there was
    /// none.
    pub time_to_first_interaction_ms: Option<u64>,
    pub synthetic_leave: bool,
}

/// Completion and first-interaction time per user-document pair. A
/// `page_view` counts as interaction only once it shows a page other than
/// the first one rendered.
pub fn task_timings(events: &[BehaviorEvent]) -> Vec<TaskTiming> {
    let windows = resolve_windows(events);
    let groups = group_by_pair(events);
    windows
        .windows
        .values()
        .map(|w| {
            let evs = groups.get(&w.key()).map(Vec::as_slice).unwrap_or(&[]);
            let mut initial_page = None;
            let first = evs.iter().filter(|e| w.contains(e.ts)).find(|e| match e.kind {
                EventKind::PageView { page_index } => match initial_page {
                    None => {
                        initial_page = Some(page_index);
                        false
                    }
                    Some(p) => p != page_index,
                },
                ref k => k.is_interaction(),
            });
            TaskTiming {
                user_id: w.user_id.clone(),
                document_id: w.document_id.clone(),
                time_to_completion_ms: (!w.synthetic).then(|| w.duration_ms()),
                time_to_first_interaction_ms: first.map(|e| e.ts.0 - w.t_e.0),
                synthetic_leave: w.synthetic,
            }
        })
        .collect()
}

/// Median of a non-empty sample; mean of the two middle values for even
/// sizes.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub median_time_to_completion_min: Option<f64>,
    pub median_time_to_first_interaction_min: Option<f64>,
    pub undefined_completion: usize,
    pub undefined_first_interaction: usize,
}

pub fn summarize_timings(timings: &[TaskTiming]) -> TimingSummary {
    let minutes = |ms: u64| ms as f64 / 60_000.0;
    let mut completion: Vec<f64> = timings.iter().filter_map(|t| t.time_to_completion_ms).map(minutes).collect();
    let mut first: Vec<f64> = timings.iter().filter_map(|t| t.time_to_first_interaction_ms).map(minutes).collect();
    TimingSummary {
        undefined_completion: timings.len() - completion.len(),
        undefined_first_interaction: timings.len() - first.len(),
        median_time_to_completion_min: median(&mut completion),
        median_time_to_first_interaction_min: median(&mut first),
    }
}

/// `count(comm_delete) / count(comm_create)`, 0 without creates.
pub fn deletion_rate(events: &[BehaviorEvent]) -> f64 {
    let (mut creates, mut deletes) = (0u64, 0u64);
    for e in events {
        match e.kind {
            EventKind::CommCreate { .. } => creates += 1,
            EventKind::CommDelete { .. } => deletes += 1,
            _ => {}
        }
    }
    if creates == 0 {
        0.0
    } else {
        deletes as f64 / creates as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PageTimes {
    pub user_id: UserId,
    pub document_id: DocumentId,
    /// Page index (as a string key) to share of the window.
    pub pages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTimingReport {
    pub per_pair: Vec<TaskTiming>,
    pub summary: TimingSummary,
}

/// Everything the `analyze` command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub reltime_histogram: Histogram,
    pub page_reading_times: Vec<PageTimes>,
    pub task_timings: TaskTimingReport,
    pub deletion_rate: f64,
}

pub fn compute_metrics(events: &[BehaviorEvent], bins: usize) -> Metrics {
    let windows = resolve_windows(events);
    let page_reading_times = windows
        .matched()
        .map(|w| PageTimes {
            user_id: w.user_id.clone(),
            document_id: w.document_id.clone(),
            pages: page_reading_times(events, w).into_iter().map(|(p, v)| (p.to_string(), v)).collect(),
        })
        .collect();
    let per_pair = task_timings(events);
    let summary = summarize_timings(&per_pair);
    Metrics {
        reltime_histogram: reltime_histogram(events, bins),
        page_reading_times,
        task_timings: TaskTimingReport { per_pair, summary },
        deletion_rate: deletion_rate(events),
    }
}
