//! Platform state and the journal records that change it.
//!
//! Every mutation is a [`Record`]. [`State::commit`] checks the record,
//! hands it to the [`Journal`] and only then applies it, so a record is
//! applied in memory only once the journal has accepted it. Replaying a
//! journal through [`State::replay`] rebuilds the same state, including the
//! per-document sequence numbers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::analytics::{BehaviorEvent, EventKind};
use crate::model::{
    validate_commentary, CommentaryId, Document, DocumentId, InlineCommentary, LabelSet, LabelSetId, Study, StudyId,
    User, UserId, Violation,
};
use crate::secret::PasswordHash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", content = "data", rename_all = "snake_case")]
pub enum Record {
    UserRegistered { user: User, credential: Option<PasswordHash> },
    DocumentImported(Document),
    LabelSetDefined(LabelSet),
    StudyCreated(Study),
    /// Full commentary after create, update or soft delete.
    CommentaryPut(InlineCommentary),
    BehaviorStored(BehaviorEvent),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateError {
    DuplicateUser(UserId),
    DuplicateUsername(String),
    InconsistentConsent(UserId),
    UnknownUser(UserId),
    UnknownDocument(DocumentId),
    DuplicateDocument(DocumentId),
    BadPageCount(DocumentId),
    MalformedLabelSet(LabelSetId),
    UnknownLabelSet(LabelSetId),
    DuplicateStudy(StudyId),
    UnknownParent(CommentaryId),
    ParentNotRoot(CommentaryId),
    ImmutableField(CommentaryId, &'static str),
    Invalid(CommentaryId, Vec<Violation>),
    NotOptedIn(UserId),
    PageOutOfRange { document_id: DocumentId, page_index: usize },
}

impl fmt::Display for StateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateError::DuplicateUser(id) => write!(f, "user {id} already exists"),
            StateError::DuplicateUsername(n) => write!(f, "username {n:?} already taken"),
            StateError::InconsistentConsent(id) => write!(f, "user {id}: behavior opt-in requires consent"),
            StateError::UnknownUser(id) => write!(f, "unknown user {id}"),
            StateError::UnknownDocument(id) => write!(f, "unknown document {id}"),
            StateError::DuplicateDocument(id) => write!(f, "document {id} already imported"),
            StateError::BadPageCount(id) => write!(f, "document {id}: page_count does not match text layer"),
            StateError::MalformedLabelSet(id) => write!(f, "label set {id} has duplicate ids or empty names"),
            StateError::UnknownLabelSet(id) => write!(f, "unknown label set {id}"),
            StateError::DuplicateStudy(id) => write!(f, "study {id} already exists"),
            StateError::UnknownParent(id) => write!(f, "parent commentary {id} not found on this document"),
            StateError::ParentNotRoot(id) => write!(f, "commentary {id} is a reply and cannot have replies"),
            StateError::ImmutableField(id, field) => write!(f, "commentary {id}: {field} cannot change"),
            StateError::Invalid(id, v) => {
                write!(f, "commentary {id} invalid:")?;
                for x in v {
                    write!(f, " {x}")?;
                }
                Ok(())
            }
            StateError::NotOptedIn(id) => write!(f, "user {id} has not opted in to behavioral logging"),
            StateError::PageOutOfRange { document_id, page_index } => {
                write!(f, "page {page_index} out of range for document {document_id}")
            }
        }
    }
}

/// Durable sink for records. Implementations must not return `Ok` before the
/// record would survive a crash.
pub trait Journal {
    type Error: fmt::Display;

    fn append(&mut self, record: &Record) -> Result<(), Self::Error>;
}

/// In-memory journal for tests and tooling.
#[derive(Debug, Default, Clone)]
pub struct MemoryJournal {
    pub records: Vec<Record>,
}

impl Journal for MemoryJournal {
    type Error = core::convert::Infallible;

    fn append(&mut self, record: &Record) -> Result<(), Self::Error> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Debug)]
pub enum CommitError<E> {
    Rejected(StateError),
    Journal(E),
}

impl<E: fmt::Display> fmt::Display for CommitError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommitError::Rejected(e) => e.fmt(f),
            CommitError::Journal(e) => write!(f, "journal write failed: {e}"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct State {
    users: BTreeMap<UserId, User>,
    credentials: BTreeMap<UserId, PasswordHash>,
    usernames: BTreeMap<String, UserId>,
    documents: BTreeMap<DocumentId, Document>,
    labelsets: BTreeMap<LabelSetId, LabelSet>,
    default_labelset: Option<LabelSetId>,
    studies: BTreeMap<StudyId, Study>,
    commentaries: BTreeMap<CommentaryId, InlineCommentary>,
    doc_seq: BTreeMap<DocumentId, u64>,
    events: Vec<BehaviorEvent>,
    next_commentary: u64,
    next_user: u64,
    next_study: u64,
    applied: u64,
}

/// Counter behind ids of the form `<prefix><digits>`.
fn id_counter(id: &str, prefix: char) -> Option<u64> {
    id.strip_prefix(prefix).filter(|d| d.len() == 10).and_then(|d| d.parse().ok())
}

impl State {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds state from journal records. Fails on the first record that
    /// does not apply.
    pub fn replay<I: IntoIterator<Item = Record>>(records: I) -> Result<Self, (u64, StateError)> {
        let mut s = State::new();
        for r in records {
            s.check(&r).map_err(|e| (s.applied, e))?;
            s.apply(r);
        }
        Ok(s)
    }

    pub fn commit<J: Journal>(&mut self, journal: &mut J, record: Record) -> Result<(), CommitError<J::Error>> {
        self.check(&record).map_err(CommitError::Rejected)?;
        journal.append(&record).map_err(CommitError::Journal)?;
        self.apply(record);
        Ok(())
    }

    /// Number of records applied so far.
    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn check(&self, record: &Record) -> Result<(), StateError> {
        match record {
            Record::UserRegistered { user, .. } => {
                if self.users.contains_key(&user.user_id) {
                    return Err(StateError::DuplicateUser(user.user_id.clone()));
                }
                if self.usernames.contains_key(&user.username) {
                    return Err(StateError::DuplicateUsername(user.username.clone()));
                }
                if !user.is_consistent() {
                    return Err(StateError::InconsistentConsent(user.user_id.clone()));
                }
            }
            Record::DocumentImported(doc) => {
                if self.documents.contains_key(&doc.document_id) {
                    return Err(StateError::DuplicateDocument(doc.document_id.clone()));
                }
                if doc.page_count != doc.text_layer.len() || doc.page_count == 0 {
                    return Err(StateError::BadPageCount(doc.document_id.clone()));
                }
                self.require_user(&doc.uploaded_by)?;
            }
            Record::LabelSetDefined(ls) => {
                if !ls.is_well_formed() {
                    return Err(StateError::MalformedLabelSet(ls.labelset_id.clone()));
                }
            }
            Record::StudyCreated(study) => {
                if self.studies.contains_key(&study.study_id) {
                    return Err(StateError::DuplicateStudy(study.study_id.clone()));
                }
                self.require_user(&study.created_by)?;
                for d in &study.document_ids {
                    self.require_document(d)?;
                }
                for u in &study.participant_ids {
                    self.require_user(u)?;
                }
                if !self.labelsets.contains_key(&study.labelset_id) {
                    return Err(StateError::UnknownLabelSet(study.labelset_id.clone()));
                }
            }
            Record::CommentaryPut(c) => self.check_commentary(c)?,
            Record::BehaviorStored(e) => {
                let user = self.require_user(&e.user_id)?;
                if !user.behavior_optin {
                    return Err(StateError::NotOptedIn(e.user_id.clone()));
                }
                let doc = self.require_document(&e.document_id)?;
                if let EventKind::PageView { page_index } = e.kind {
                    if page_index >= doc.page_count {
                        return Err(StateError::PageOutOfRange { document_id: e.document_id.clone(), page_index });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_commentary(&self, c: &InlineCommentary) -> Result<(), StateError> {
        let doc = self.require_document(&c.document_id)?;
        self.require_user(&c.author)?;
        if let Some(prev) = self.commentaries.get(&c.commentary_id) {
            if prev.document_id != c.document_id {
                return Err(StateError::ImmutableField(c.commentary_id.clone(), "documentId"));
            }
            if prev.parent_id != c.parent_id {
                return Err(StateError::ImmutableField(c.commentary_id.clone(), "parentId"));
            }
            if prev.created_at != c.created_at {
                return Err(StateError::ImmutableField(c.commentary_id.clone(), "createdAt"));
            }
        }
        if let Some(pid) = &c.parent_id {
            match self.commentaries.get(pid) {
                Some(p) if p.document_id == c.document_id && pid != &c.commentary_id => {
                    if p.parent_id.is_some() {
                        return Err(StateError::ParentNotRoot(pid.clone()));
                    }
                }
                _ => return Err(StateError::UnknownParent(pid.clone())),
            }
        }
        let labels = self.labelset_for(&c.document_id);
        let result = validate_commentary(c, doc, &labels);
        if !result.is_ok() {
            return Err(StateError::Invalid(c.commentary_id.clone(), result.violations));
        }
        Ok(())
    }

    /// Applies a record that passed [`State::check`].
    pub fn apply(&mut self, record: Record) {
        self.applied += 1;
        match record {
            Record::UserRegistered { user, credential } => {
                if let Some(n) = id_counter(user.user_id.as_str(), 'u') {
                    self.next_user = self.next_user.max(n + 1);
                }
                self.usernames.insert(user.username.clone(), user.user_id.clone());
                if let Some(c) = credential {
                    self.credentials.insert(user.user_id.clone(), c);
                }
                self.users.insert(user.user_id.clone(), user);
            }
            Record::DocumentImported(doc) => {
                self.doc_seq.entry(doc.document_id.clone()).or_insert(0);
                self.documents.insert(doc.document_id.clone(), doc);
            }
            Record::LabelSetDefined(ls) => {
                if self.default_labelset.is_none() {
                    self.default_labelset = Some(ls.labelset_id.clone());
                }
                self.labelsets.insert(ls.labelset_id.clone(), ls);
            }
            Record::StudyCreated(study) => {
                if let Some(n) = id_counter(study.study_id.as_str(), 's') {
                    self.next_study = self.next_study.max(n + 1);
                }
                self.studies.insert(study.study_id.clone(), study);
            }
            Record::CommentaryPut(c) => {
                if let Some(n) = id_counter(c.commentary_id.as_str(), 'c') {
                    self.next_commentary = self.next_commentary.max(n + 1);
                }
                *self.doc_seq.entry(c.document_id.clone()).or_insert(0) += 1;
                self.commentaries.insert(c.commentary_id.clone(), c);
            }
            Record::BehaviorStored(e) => self.events.push(e),
        }
    }

    fn require_user(&self, id: &UserId) -> Result<&User, StateError> {
        self.users.get(id).ok_or_else(|| StateError::UnknownUser(id.clone()))
    }

    fn require_document(&self, id: &DocumentId) -> Result<&Document, StateError> {
        self.documents.get(id).ok_or_else(|| StateError::UnknownDocument(id.clone()))
    }

    fn fresh_id(prefix: char, n: u64) -> String {
        format!("{prefix}{n:010}")
    }

    pub fn next_commentary_id(&self) -> CommentaryId {
        let mut n = self.next_commentary.max(1);
        loop {
            let id = CommentaryId(Self::fresh_id('c', n));
            if !self.commentaries.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    pub fn next_user_id(&self) -> UserId {
        let mut n = self.next_user.max(1);
        loop {
            let id = UserId(Self::fresh_id('u', n));
            if !self.users.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    pub fn next_study_id(&self) -> StudyId {
        let mut n = self.next_study.max(1);
        loop {
            let id = StudyId(Self::fresh_id('s', n));
            if !self.studies.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    pub fn user(&self, id: &UserId) -> Option<&User> {
        self.users.get(id)
    }

    pub fn user_by_name(&self, username: &str) -> Option<&User> {
        self.usernames.get(username).and_then(|id| self.users.get(id))
    }

    pub fn credential(&self, id: &UserId) -> Option<&PasswordHash> {
        self.credentials.get(id)
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn document(&self, id: &DocumentId) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn labelset(&self, id: &LabelSetId) -> Option<&LabelSet> {
        self.labelsets.get(id)
    }

    pub fn labelsets(&self) -> impl Iterator<Item = &LabelSet> {
        self.labelsets.values()
    }

    pub fn studies(&self) -> impl Iterator<Item = &Study> {
        self.studies.values()
    }

    pub fn commentary(&self, id: &CommentaryId) -> Option<&InlineCommentary> {
        self.commentaries.get(id)
    }

    pub fn commentaries(&self) -> impl Iterator<Item = &InlineCommentary> {
        self.commentaries.values()
    }

    pub fn commentaries_of<'a>(&'a self, doc: &'a DocumentId) -> impl Iterator<Item = &'a InlineCommentary> + 'a {
        self.commentaries.values().filter(move |c| &c.document_id == doc)
    }

    pub fn events(&self) -> &[BehaviorEvent] {
        &self.events
    }

    /// Number of commentary writes applied to the document so far.
    pub fn seq(&self, doc: &DocumentId) -> u64 {
        self.doc_seq.get(doc).copied().unwrap_or(0)
    }

    /// The label set of the first study containing the document, else the
    /// first label set ever defined, else an empty set.
    pub fn labelset_for(&self, doc: &DocumentId) -> LabelSet {
        self.studies
            .values()
            .find(|s| s.document_ids.contains(doc))
            .map(|s| s.labelset_id.clone())
            .or_else(|| self.default_labelset.clone())
            .and_then(|id| self.labelsets.get(&id).cloned())
            .unwrap_or_else(LabelSet::empty)
    }

    /// Admins see everything; a document in a study is limited to that
    /// study's participants; other documents are open to all users.
    pub fn can_access(&self, user: &UserId, doc: &DocumentId) -> bool {
        let Some(u) = self.users.get(user) else { return false };
        if u.is_admin() {
            return true;
        }
        let mut in_study = false;
        for s in self.studies.values().filter(|s| s.document_ids.contains(doc)) {
            in_study = true;
            if s.participant_ids.contains(user) {
                return true;
            }
        }
        !in_study
    }
}
