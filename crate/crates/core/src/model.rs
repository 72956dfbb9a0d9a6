//! Shared vocabulary: users, documents, label sets, inline commentaries and
//! studies.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::anchoring::{self, DocumentText, SelectorSet};

/// Maximum number of free-form tags on one commentary.
pub const MAX_TAGS: usize = 32;
/// Maximum length of a single tag, in characters.
pub const MAX_TAG_CHARS: usize = 64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(UserId);
string_id!(
    /// Hex SHA-256 of the imported PDF bytes; identical uploads share an id.
    DocumentId
);
string_id!(CommentaryId);
string_id!(LabelId);
string_id!(LabelSetId);
string_id!(StudyId);

/// Server-assigned UTC time in milliseconds since the Unix epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn millis(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Admin,
    #[default]
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: UserId,
    pub username: String,
    pub email: String,
    pub role: Role,
    pub consent_given: bool,
    pub behavior_optin: bool,
    pub registered_at: Timestamp,
    /// When the consent and licensing text was accepted at registration.
    pub consent_accepted_at: Option<Timestamp>,
}

impl User {
    /// Opt-in to behavioral logging without consent is not a legal state.
    pub fn is_consistent(&self) -> bool {
        !self.behavior_optin || self.consent_given
    }

    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }
}

/// An imported document. The PDF bytes live in the blob store keyed by
/// `document_id`; the core only needs the text layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub document_id: DocumentId,
    pub title: String,
    pub text_layer: Vec<String>,
    pub page_count: usize,
    pub uploaded_by: UserId,
    pub uploaded_at: Timestamp,
}

impl Document {
    /// A document whose extractor produced no text at all. Anchoring is
    /// disabled for it.
    pub fn text_layer_empty(&self) -> bool {
        self.text_layer.iter().all(|p| p.trim().is_empty())
    }

    pub fn text(&self) -> DocumentText {
        DocumentText::from_pages(&self.text_layer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub label_id: LabelId,
    pub display_name: String,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labelset_id: LabelSetId,
    pub name: String,
    pub labels: Vec<Label>,
}

impl LabelSet {
    pub fn empty() -> Self {
        Self { labelset_id: LabelSetId::new(""), name: String::new(), labels: Vec::new() }
    }

    pub fn contains(&self, label: &LabelId) -> bool {
        self.labels.iter().any(|l| &l.label_id == label)
    }

    /// Label ids unique within the set; display names non-empty.
    pub fn is_well_formed(&self) -> bool {
        let mut ids: Vec<&LabelId> = self.labels.iter().map(|l| &l.label_id).collect();
        ids.sort();
        let unique = ids.windows(2).all(|w| w[0] != w[1]);
        unique && self.labels.iter().all(|l| !l.display_name.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Human,
    Assistant,
}

/// A highlight with optional note, label, tags and thread position. The
/// serialized form is the export/broadcast annotation object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InlineCommentary {
    #[serde(rename = "id")]
    pub commentary_id: CommentaryId,
    pub document_id: DocumentId,
    #[serde(rename = "userId")]
    pub author: UserId,
    #[serde(rename = "selectors")]
    pub anchor: Option<SelectorSet>,
    #[serde(rename = "text")]
    pub note_text: Option<String>,
    #[serde(rename = "label")]
    pub label_id: Option<LabelId>,
    pub tags: Vec<String>,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub parent_id: Option<CommentaryId>,
    pub deleted: bool,
    pub origin: Origin,
}

impl InlineCommentary {
    pub fn is_reply(&self) -> bool {
        self.parent_id.is_some()
    }

    pub fn is_document_level(&self) -> bool {
        self.anchor.is_none() && self.parent_id.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: StudyId,
    pub name: String,
    pub document_ids: Vec<DocumentId>,
    pub participant_ids: Vec<UserId>,
    pub labelset_id: LabelSetId,
    /// Milliseconds.
    pub time_limit: Option<u64>,
    pub created_by: UserId,
}

/// A single broken invariant reported by [`validate_commentary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Violation {
    ReplyWithAnchor,
    UnknownLabel,
    DocumentMismatch,
    TooManyTags,
    TagTooLong,
    EmptyTag,
    TimestampOrder,
    AnchoringDisabled,
    InvalidSelector,
    Unanchorable,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::ReplyWithAnchor => "reply-with-anchor",
            Violation::UnknownLabel => "unknown-label",
            Violation::DocumentMismatch => "document-mismatch",
            Violation::TooManyTags => "too-many-tags",
            Violation::TagTooLong => "tag-too-long",
            Violation::EmptyTag => "empty-tag",
            Violation::TimestampOrder => "timestamp-order",
            Violation::AnchoringDisabled => "anchoring-disabled",
            Violation::InvalidSelector => "invalid-selector",
            Violation::Unanchorable => "unanchorable",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks a commentary against its document and the label set in force.
/// Thread-level checks (parent existence) need the whole collection and are
/// done by the state.
pub fn validate_commentary(c: &InlineCommentary, doc: &Document, labels: &LabelSet) -> ValidationResult {
    let mut violations = Vec::new();
    if c.document_id != doc.document_id {
        violations.push(Violation::DocumentMismatch);
    }
    if c.parent_id.is_some() && c.anchor.is_some() {
        violations.push(Violation::ReplyWithAnchor);
    }
    if let Some(label) = &c.label_id {
        if !labels.contains(label) {
            violations.push(Violation::UnknownLabel);
        }
    }
    if c.tags.len() > MAX_TAGS {
        violations.push(Violation::TooManyTags);
    }
    if c.tags.iter().any(|t| t.chars().count() > MAX_TAG_CHARS) {
        violations.push(Violation::TagTooLong);
    }
    if c.tags.iter().any(|t| t.trim().is_empty()) {
        violations.push(Violation::EmptyTag);
    }
    if c.updated_at < c.created_at {
        violations.push(Violation::TimestampOrder);
    }
    if let Some(sel) = &c.anchor {
        if doc.text_layer_empty() {
            violations.push(Violation::AnchoringDisabled);
        } else {
            let text = doc.text();
            if sel.validate(&text, doc.page_count).is_err() {
                violations.push(Violation::InvalidSelector);
            } else if anchoring::anchor(&text, sel).is_err() {
                violations.push(Violation::Unanchorable);
            }
        }
    }
    ValidationResult { violations }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotAThreadRoot;

impl fmt::Display for NotAThreadRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("commentary is a reply, not a thread root")
    }
}

/// Root followed by its direct replies in `(created_at, commentary_id)`
/// order. Soft-deleted replies are kept; clients decide how to show them.
pub fn thread_of<'a, I>(root: &'a InlineCommentary, all: I) -> Result<Vec<&'a InlineCommentary>, NotAThreadRoot>
where
    I: IntoIterator<Item = &'a InlineCommentary>,
{
    if root.parent_id.is_some() {
        return Err(NotAThreadRoot);
    }
    let mut replies: Vec<&InlineCommentary> = all
        .into_iter()
        .filter(|c| c.parent_id.as_ref() == Some(&root.commentary_id) && c.commentary_id != root.commentary_id)
        .collect();
    replies.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.commentary_id.cmp(&b.commentary_id)));
    let mut out = Vec::with_capacity(replies.len() + 1);
    out.push(root);
    out.extend(replies);
    Ok(out)
}
