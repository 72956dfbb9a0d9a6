//! The `care-export/1` bundle: export from a [`State`] and import into one.

use std::collections::{BTreeMap, BTreeSet};

use base64::Engine as _;
use care_core::analytics::BehaviorEvent;
use care_core::model::{CommentaryId, Document, DocumentId, InlineCommentary, Role, Timestamp, User, UserId};
use care_core::state::{CommitError, Journal, MemoryJournal, Record, State, StateError};
use serde::{Deserialize, Serialize};

pub const EXPORT_VERSION: &str = "care-export/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportBundle {
    pub version: String,
    pub exported_at: Timestamp,
    pub documents: Vec<DocumentDescriptor>,
    pub annotations: Vec<InlineCommentary>,
    pub behavior_events: Vec<BehaviorEvent>,
    pub users: Vec<ExportUser>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DocumentDescriptor {
    pub id: DocumentId,
    pub title: String,
    pub page_count: usize,
    pub uploaded_by: UserId,
    pub uploaded_at: Timestamp,
    pub text_layer: Vec<String>,
    pub text_layer_empty: bool,
    /// Base64 PDF bytes, only with `include_pdf`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdf: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExportUser {
    pub id: UserId,
    /// A pseudonym unless the export was identified.
    pub username: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    pub role: Role,
    pub consent_given: bool,
    pub behavior_optin: bool,
    pub registered_at: Timestamp,
    pub consent_accepted_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    All,
    Document(DocumentId),
    User(UserId),
}

/// Who asks for an export. The command line acts as `Operator`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Requester {
    Operator,
    User(UserId),
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    pub include_pdf: bool,
    /// Keep real usernames and emails. Operator or admin only.
    pub identify: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExportError {
    #[error("requester may not export this scope")]
    Unauthorized,
    #[error("unknown document {0}")]
    UnknownDocument(DocumentId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("PDF for document {0} is missing from the blob store")]
    MissingPdf(DocumentId),
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::Unauthorized => "unauthorized",
            ExportError::UnknownDocument(_) => "unknown-document",
            ExportError::UnknownUser(_) => "unknown-user",
            ExportError::MissingPdf(_) => "missing-pdf",
        }
    }
}

fn is_privileged(state: &State, requester: &Requester) -> bool {
    match requester {
        Requester::Operator => true,
        Requester::User(u) => state.user(u).is_some_and(User::is_admin),
    }
}

pub fn pseudonym(index: usize) -> String {
    format!("participant-{:04}", index + 1)
}

/// Builds a bundle. `pdf_of` supplies stored PDF bytes when
/// `options.include_pdf` is set.
pub fn export(
    state: &State,
    scope: &Scope,
    requester: &Requester,
    options: &ExportOptions,
    pdf_of: impl Fn(&DocumentId) -> Option<Vec<u8>>,
    now: Timestamp,
) -> Result<ExportBundle, ExportError> {
    let privileged = is_privileged(state, requester);
    let allowed = match (scope, requester) {
        _ if privileged => true,
        (Scope::User(u), Requester::User(r)) => u == r,
        _ => false,
    };
    if !allowed || (options.identify && !privileged) {
        return Err(ExportError::Unauthorized);
    }

    let optin = |u: &UserId| state.user(u).is_some_and(|u| u.behavior_optin);
    let (annotations, events): (Vec<&InlineCommentary>, Vec<&BehaviorEvent>) = match scope {
        Scope::All => (state.commentaries().collect(), state.events().iter().collect()),
        Scope::Document(d) => {
            if state.document(d).is_none() {
                return Err(ExportError::UnknownDocument(d.clone()));
            }
            (state.commentaries_of(d).collect(), state.events().iter().filter(|e| &e.document_id == d).collect())
        }
        Scope::User(u) => {
            if state.user(u).is_none() {
                return Err(ExportError::UnknownUser(u.clone()));
            }
            let own: Vec<&InlineCommentary> = state.commentaries().filter(|c| &c.author == u).collect();
            // replies are meaningless without their thread root
            let roots: BTreeSet<&CommentaryId> = own.iter().filter_map(|c| c.parent_id.as_ref()).collect();
            let mut anns = own;
            anns.extend(roots.into_iter().filter_map(|id| state.commentary(id)).filter(|c| &c.author != u));
            (anns, state.events().iter().filter(|e| &e.user_id == u).collect())
        }
    };
    let events: Vec<BehaviorEvent> = events.into_iter().filter(|e| optin(&e.user_id)).cloned().collect();
    let mut annotations: Vec<InlineCommentary> = annotations.into_iter().cloned().collect();
    annotations.sort_by(|a, b| {
        (&a.document_id, a.created_at, &a.commentary_id).cmp(&(&b.document_id, b.created_at, &b.commentary_id))
    });

    let mut doc_ids: BTreeSet<DocumentId> = match scope {
        Scope::All => state.documents().map(|d| d.document_id.clone()).collect(),
        Scope::Document(d) => BTreeSet::from([d.clone()]),
        Scope::User(_) => BTreeSet::new(),
    };
    doc_ids.extend(annotations.iter().map(|c| c.document_id.clone()));
    doc_ids.extend(events.iter().map(|e| e.document_id.clone()));
    let mut documents = Vec::with_capacity(doc_ids.len());
    for id in &doc_ids {
        let d = state.document(id).ok_or_else(|| ExportError::UnknownDocument(id.clone()))?;
        let pdf = if options.include_pdf {
            let bytes = pdf_of(id).ok_or_else(|| ExportError::MissingPdf(id.clone()))?;
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        } else {
            None
        };
        documents.push(DocumentDescriptor {
            id: d.document_id.clone(),
            title: d.title.clone(),
            page_count: d.page_count,
            uploaded_by: d.uploaded_by.clone(),
            uploaded_at: d.uploaded_at,
            text_layer: d.text_layer.clone(),
            text_layer_empty: d.text_layer_empty(),
            pdf,
        });
    }

    let mut user_ids: BTreeSet<UserId> = match scope {
        Scope::All => state.users().map(|u| u.user_id.clone()).collect(),
        Scope::User(u) => BTreeSet::from([u.clone()]),
        Scope::Document(_) => BTreeSet::new(),
    };
    user_ids.extend(annotations.iter().map(|c| c.author.clone()));
    user_ids.extend(events.iter().map(|e| e.user_id.clone()));
    user_ids.extend(documents.iter().map(|d| d.uploaded_by.clone()));
    let mut users = Vec::with_capacity(user_ids.len());
    for (i, id) in user_ids.iter().enumerate() {
        let u = state.user(id).ok_or_else(|| ExportError::UnknownUser(id.clone()))?;
        users.push(ExportUser {
            id: u.user_id.clone(),
            username: if options.identify { u.username.clone() } else { pseudonym(i) },
            email: options.identify.then(|| u.email.clone()),
            role: u.role,
            consent_given: u.consent_given,
            behavior_optin: u.behavior_optin,
            registered_at: u.registered_at,
            consent_accepted_at: u.consent_accepted_at,
        });
    }

    Ok(ExportBundle {
        version: EXPORT_VERSION.into(),
        exported_at: now,
        documents,
        annotations,
        behavior_events: events,
        users,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    pub users: usize,
    pub documents: usize,
    /// Documents already present under the same content hash.
    pub documents_existing: usize,
    pub annotations: usize,
    pub behavior_events: usize,
    pub user_remaps: BTreeMap<UserId, UserId>,
    pub username_remaps: BTreeMap<String, String>,
    pub annotation_remaps: BTreeMap<CommentaryId, CommentaryId>,
}

#[derive(Debug, thiserror::Error)]
pub enum ImportError {
    #[error("unsupported bundle version {0:?}, expected {EXPORT_VERSION:?}")]
    Version(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("document {0} does not match its content hash or page count")]
    BadDocument(DocumentId),
    #[error("record rejected: {0}")]
    Rejected(StateError),
    #[error("journal write failed: {0}")]
    Storage(String),
}

impl ImportError {
    pub fn code(&self) -> &'static str {
        match self {
            ImportError::Version(_) => "unsupported-version",
            ImportError::DanglingReference(_) => "dangling-reference",
            ImportError::BadDocument(_) => "bad-document",
            ImportError::Rejected(_) => "rejected",
            ImportError::Storage(_) => "storage-failure",
        }
    }
}

fn check_references(bundle: &ExportBundle) -> Result<(), ImportError> {
    let users: BTreeSet<&UserId> = bundle.users.iter().map(|u| &u.id).collect();
    let docs: BTreeSet<&DocumentId> = bundle.documents.iter().map(|d| &d.id).collect();
    let anns: BTreeSet<&CommentaryId> = bundle.annotations.iter().map(|c| &c.commentary_id).collect();
    let dangling = |what: String| Err(ImportError::DanglingReference(what));
    for d in &bundle.documents {
        if !users.contains(&d.uploaded_by) {
            return dangling(format!("document {} uploaded by unknown user {}", d.id, d.uploaded_by));
        }
    }
    for c in &bundle.annotations {
        if !docs.contains(&c.document_id) {
            return dangling(format!("annotation {} on unknown document {}", c.commentary_id, c.document_id));
        }
        if !users.contains(&c.author) {
            return dangling(format!("annotation {} by unknown user {}", c.commentary_id, c.author));
        }
        if let Some(p) = &c.parent_id {
            if !anns.contains(p) {
                return dangling(format!("annotation {} replies to unknown annotation {p}", c.commentary_id));
            }
        }
    }
    for e in &bundle.behavior_events {
        if !docs.contains(&e.document_id) || !users.contains(&e.user_id) {
            return dangling(format!("behavior event at {} for {}/{}", e.ts.millis(), e.user_id, e.document_id));
        }
    }
    Ok(())
}

/// Records that bring `bundle` into `state`, remapping colliding ids, and
/// verified by applying them to a scratch copy of the state.
pub fn plan_import(state: &State, bundle: &ExportBundle) -> Result<(Vec<Record>, ImportReport), ImportError> {
    if bundle.version != EXPORT_VERSION {
        return Err(ImportError::Version(bundle.version.clone()));
    }
    check_references(bundle)?;
    let mut scratch = state.clone();
    let mut sink = MemoryJournal::default();
    let mut report = ImportReport::default();
    let mut put = |scratch: &mut State, record: Record| {
        scratch.commit(&mut sink, record).map_err(|e| match e {
            CommitError::Rejected(e) => ImportError::Rejected(e),
            CommitError::Journal(never) => match never {},
        })
    };

    let mut user_map: BTreeMap<UserId, UserId> = BTreeMap::new();
    for u in &bundle.users {
        let mut id = u.id.clone();
        if scratch.user(&id).is_some() {
            id = scratch.next_user_id();
            report.user_remaps.insert(u.id.clone(), id.clone());
        }
        let mut username = u.username.clone();
        let mut n = 2;
        while scratch.user_by_name(&username).is_some() {
            username = format!("{}-{n}", u.username);
            n += 1;
        }
        if username != u.username {
            report.username_remaps.insert(u.username.clone(), username.clone());
        }
        let user = User {
            user_id: id.clone(),
            username,
            email: u.email.clone().unwrap_or_default(),
            role: u.role,
            consent_given: u.consent_given,
            behavior_optin: u.behavior_optin,
            registered_at: u.registered_at,
            consent_accepted_at: u.consent_accepted_at,
        };
        put(&mut scratch, Record::UserRegistered { user, credential: None })?;
        user_map.insert(u.id.clone(), id);
        report.users += 1;
    }
    let user = |id: &UserId| user_map[id].clone();

    for d in &bundle.documents {
        if d.page_count != d.text_layer.len() {
            return Err(ImportError::BadDocument(d.id.clone()));
        }
        if let Some(pdf) = &d.pdf {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(pdf)
                .map_err(|_| ImportError::BadDocument(d.id.clone()))?;
            if crate::pdf::content_hash(&bytes) != d.id.as_str() {
                return Err(ImportError::BadDocument(d.id.clone()));
            }
        }
        if let Some(existing) = scratch.document(&d.id) {
            // same content hash: the text layer must agree too
            if existing.text_layer != d.text_layer {
                return Err(ImportError::BadDocument(d.id.clone()));
            }
            report.documents_existing += 1;
            continue;
        }
        let doc = Document {
            document_id: d.id.clone(),
            title: d.title.clone(),
            text_layer: d.text_layer.clone(),
            page_count: d.page_count,
            uploaded_by: user(&d.uploaded_by),
            uploaded_at: d.uploaded_at,
        };
        put(&mut scratch, Record::DocumentImported(doc))?;
        report.documents += 1;
    }

    let mut ann_map: BTreeMap<CommentaryId, CommentaryId> = BTreeMap::new();
    // roots before replies so that every parent exists when its reply lands
    let ordered = bundle.annotations.iter().filter(|c| c.parent_id.is_none()).chain(bundle.annotations.iter().filter(|c| c.parent_id.is_some()));
    for c in ordered {
        let mut id = c.commentary_id.clone();
        if scratch.commentary(&id).is_some() {
            id = scratch.next_commentary_id();
            report.annotation_remaps.insert(c.commentary_id.clone(), id.clone());
        }
        ann_map.insert(c.commentary_id.clone(), id.clone());
        let mut c = c.clone();
        c.commentary_id = id;
        c.author = user(&c.author);
        c.parent_id = c.parent_id.map(|p| ann_map[&p].clone());
        put(&mut scratch, Record::CommentaryPut(c))?;
        report.annotations += 1;
    }

    for e in &bundle.behavior_events {
        let mut e = e.clone();
        e.user_id = user(&e.user_id);
        put(&mut scratch, Record::BehaviorStored(e))?;
        report.behavior_events += 1;
    }
    Ok((sink.records, report))
}

/// Imports all of `bundle` or nothing: every record is validated against a
/// scratch copy before the first one reaches the journal.
pub fn import<J: Journal>(state: &mut State, journal: &mut J, bundle: &ExportBundle) -> Result<ImportReport, ImportError> {
    let (records, report) = plan_import(state, bundle)?;
    for r in records {
        state.commit(journal, r).map_err(|e| match e {
            CommitError::Rejected(e) => ImportError::Rejected(e),
            CommitError::Journal(e) => ImportError::Storage(e.to_string()),
        })?;
    }
    Ok(report)
}

/// Decoded PDF bytes carried by the bundle, keyed by document id.
pub fn bundled_pdfs(bundle: &ExportBundle) -> Vec<(DocumentId, Vec<u8>)> {
    bundle
        .documents
        .iter()
        .filter_map(|d| {
            let bytes = base64::engine::general_purpose::STANDARD.decode(d.pdf.as_ref()?).ok()?;
            Some((d.id.clone(), bytes))
        })
        .collect()
}

/// Canonical serialized form. Two exports of the same state differ only in
/// `exported_at`.
pub fn to_json(bundle: &ExportBundle) -> String {
    let mut s = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<ExportBundle, serde_json::Error> {
    serde_json::from_str(text)
}
