//! Client wire protocol.
//!
//! Every frame is one JSON object, the [`ProtocolMessage`] envelope. Envelope
//! keys are snake_case; payload bodies reuse the camelCase annotation objects
//! of the export format so clients parse one shape everywhere.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};

use crate::anchoring::SelectorSet;
use crate::model::{CommentaryId, DocumentId, InlineCommentary, LabelId, Role, Timestamp, UserId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Hello,
    Auth,
    AuthOk,
    Subscribe,
    Unsubscribe,
    CommCreate,
    CommUpdate,
    CommDelete,
    CommBroadcast,
    AssistRequest,
    AssistResponse,
    BehaviorEvent,
    Error,
    Ack,
}

impl MsgType {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::Hello => "hello",
            MsgType::Auth => "auth",
            MsgType::AuthOk => "auth_ok",
            MsgType::Subscribe => "subscribe",
            MsgType::Unsubscribe => "unsubscribe",
            MsgType::CommCreate => "comm_create",
            MsgType::CommUpdate => "comm_update",
            MsgType::CommDelete => "comm_delete",
            MsgType::CommBroadcast => "comm_broadcast",
            MsgType::AssistRequest => "assist_request",
            MsgType::AssistResponse => "assist_response",
            MsgType::BehaviorEvent => "behavior_event",
            MsgType::Error => "error",
            MsgType::Ack => "ack",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }
}

/// The envelope carried by every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub msg_type: MsgType,
    /// Per-document sequence number; broadcasts only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_ts: Option<Timestamp>,
}

impl ProtocolMessage {
    pub fn new(msg_type: MsgType, payload: impl Serialize) -> Self {
        Self {
            msg_type,
            seq: None,
            request_id: None,
            payload: serde_json::to_value(payload).unwrap_or(Value::Null),
            user_id: None,
            server_ts: None,
        }
    }

    pub fn with_request_id(mut self, id: Option<String>) -> Self {
        self.request_id = id;
        self
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_value(self.payload.clone())
    }

    pub fn error(code: ErrorCode, message: impl Into<String>, request_id: Option<String>) -> Self {
        Self::new(MsgType::Error, ErrorPayload { code, message: message.into(), violations: Vec::new() })
            .with_request_id(request_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Incoming frame before the type is known, so errors can still echo the
/// request id.
#[derive(Debug, Deserialize)]
pub(crate) struct RawMessage {
    pub msg_type: String,
    #[serde(default)]
    pub request_id: Option<String>,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    Malformed,
    UnknownMessageType,
    UnsupportedProtocolVersion,
    HelloRequired,
    Unauthenticated,
    BadCredentials,
    AlreadyAuthenticated,
    UnknownDocument,
    Unauthorized,
    NotSubscribed,
    ValidationFailed,
    Forbidden,
    UnknownCommentary,
    UnknownParent,
    UnknownEventType,
    MalformedEvent,
    NoSuchSkill,
    AssistTimeout,
    AssistFailed,
    StorageFailure,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::UnknownMessageType => "unknown-message-type",
            ErrorCode::UnsupportedProtocolVersion => "unsupported-protocol-version",
            ErrorCode::HelloRequired => "hello-required",
            ErrorCode::Unauthenticated => "unauthenticated",
            ErrorCode::BadCredentials => "bad-credentials",
            ErrorCode::AlreadyAuthenticated => "already-authenticated",
            ErrorCode::UnknownDocument => "unknown-document",
            ErrorCode::Unauthorized => "unauthorized",
            ErrorCode::NotSubscribed => "not-subscribed",
            ErrorCode::ValidationFailed => "validation-failed",
            ErrorCode::Forbidden => "forbidden",
            ErrorCode::UnknownCommentary => "unknown-commentary",
            ErrorCode::UnknownParent => "unknown-parent",
            ErrorCode::UnknownEventType => "unknown-event-type",
            ErrorCode::MalformedEvent => "malformed-event",
            ErrorCode::NoSuchSkill => "no-such-skill",
            ErrorCode::AssistTimeout => "assist-timeout",
            ErrorCode::AssistFailed => "assist-failed",
            ErrorCode::StorageFailure => "storage-failure",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    /// Violated commentary invariants for `validation-failed`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloAck {
    pub session_id: u64,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthOk {
    pub user_id: UserId,
    pub username: String,
    pub role: Role,
    pub consent_given: bool,
    pub behavior_optin: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DocumentRef {
    pub document_id: DocumentId,
}

/// Reply to `subscribe`: the live commentary set and the sequence number the
/// following broadcasts continue from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Snapshot {
    pub document_id: DocumentId,
    pub seq: u64,
    pub annotations: Vec<InlineCommentary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommCreate {
    pub document_id: DocumentId,
    #[serde(default)]
    pub selectors: Option<SelectorSet>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub label: Option<LabelId>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub parent_id: Option<CommentaryId>,
}

/// Field patch: absent keeps, `null` clears, a value replaces.
fn patch<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommUpdate {
    pub id: CommentaryId,
    #[serde(default, deserialize_with = "patch", skip_serializing_if = "Option::is_none")]
    pub text: Option<Option<String>>,
    #[serde(default, deserialize_with = "patch", skip_serializing_if = "Option::is_none")]
    pub label: Option<Option<LabelId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommDelete {
    pub id: CommentaryId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommOp {
    Create,
    Update,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommBroadcast {
    pub op: CommOp,
    pub annotation: InlineCommentary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommAck {
    pub id: CommentaryId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AssistRequest {
    pub skill: String,
    /// Commentary whose text, span, label, tags and metadata go to the
    /// worker; generated replies are threaded under it.
    #[serde(default)]
    pub commentary_id: Option<CommentaryId>,
    #[serde(default)]
    pub input: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistResponse {
    pub skill: String,
    pub output: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<InlineCommentary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BehaviorEventIn {
    #[serde(rename = "type")]
    pub event_type: String,
    pub document_id: DocumentId,
    #[serde(default)]
    pub client_ts: Option<Timestamp>,
    #[serde(default)]
    pub payload: Map<String, Value>,
}
