//! Line-delimited JSON tool gateway.
//!
//! Each request line is `{"id", "tool", "args"}`; each response line is
//! `{"id", "ok", "result"}` or `{"id", "ok": false, "error": {"code",
//! "message"}}`. Tools are thin adapters over the library calls, so a tool
//! result serializes to the same JSON as the direct call.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::harness::{score_outcome, Outcome, Session, SessionSpec, Verdict};
use crate::inference::{NoteClass, Ontology};
use crate::model::{AssetId, ChunkId, VectorStore};
use crate::retrieval::{
    feature_change_scan, retrieve, ChangeFeature, FilterTree, Mode, Provenance, Query,
    DEFAULT_CHANGE_TOP_N,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    ToolNotFound,
    InvalidArgs,
    ParseError,
    QueryError,
    ModeError,
    NotFound,
    SessionExpired,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ToolError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ToolError {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ToolError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Query(_) => ErrorCode::QueryError,
            Error::Mode(_) => ErrorCode::ModeError,
            Error::InvalidArgument(_) | Error::OutOfRange { .. } | Error::Json(_) => {
                ErrorCode::InvalidArgs
            }
            _ => ErrorCode::Internal,
        };
        ToolError::new(code, e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    #[serde(default)]
    pub id: Value,
    pub tool: String,
    #[serde(default)]
    pub args: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolResponse {
    pub id: Value,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolError>,
}

/// Time source for KB timestamps and session expiry.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Returns `start`, then advances one second per reading. Makes replayed
/// request logs reproduce their responses exactly.
pub struct LogicalClock {
    start: DateTime<Utc>,
    ticks: AtomicU64,
}

impl LogicalClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        LogicalClock {
            start,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let n = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.start + Duration::seconds(n as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    General,
    Asset(AssetId),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntry {
    pub timestamp: DateTime<Utc>,
    pub text: String,
}

/// Append-only text memory, one list per scope.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    entries: BTreeMap<Scope, Vec<KbEntry>>,
}

impl KnowledgeBase {
    /// Appends and returns the entry's index within its scope.
    pub fn append(&mut self, scope: Scope, entry: KbEntry) -> usize {
        let list = self.entries.entry(scope).or_default();
        list.push(entry);
        list.len() - 1
    }

    pub fn read(&self, scope: Scope) -> &[KbEntry] {
        self.entries.get(&scope).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<HierarchyNode>,
}

fn insert_path(nodes: &mut Vec<HierarchyNode>, segments: &[String]) {
    let Some((head, rest)) = segments.split_first() else {
        return;
    };
    let i = match nodes.iter().position(|n| &n.name == head) {
        Some(i) => i,
        None => {
            nodes.push(HierarchyNode {
                name: head.clone(),
                children: Vec::new(),
            });
            nodes.len() - 1
        }
    };
    insert_path(&mut nodes[i].children, rest);
}

fn sort_tree(nodes: &mut [HierarchyNode]) {
    nodes.sort_by(|a, b| a.name.cmp(&b.name));
    for n in nodes {
        sort_tree(&mut n.children);
    }
}

/// The asset hierarchy as a tree rooted at the plant, children by name.
pub fn hierarchy_tree(store: &VectorStore) -> Vec<HierarchyNode> {
    let mut roots = Vec::new();
    for a in store.assets() {
        insert_path(&mut roots, a.path.segments());
    }
    sort_tree(&mut roots);
    roots
}

/// True when the fragments, trimmed and compared case-insensitively, equal
/// an in-order subsequence of some asset path's segments.
pub fn hierarchy_contains<S: AsRef<str>>(store: &VectorStore, fragments: &[S]) -> bool {
    let wanted: Vec<String> = fragments
        .iter()
        .map(|f| f.as_ref().trim().to_lowercase())
        .collect();
    if wanted.is_empty() || wanted.iter().any(String::is_empty) {
        return false;
    }
    store.assets().iter().any(|a| {
        let mut it = wanted.iter().peekable();
        for seg in a.path.segments() {
            if it.peek().is_some_and(|w| seg.to_lowercase() == **w) {
                it.next();
            }
        }
        it.peek().is_none()
    })
}

/// Bundle returned by `get_context`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkContext {
    pub chunk_id: ChunkId,
    pub provenance: Provenance,
    pub asset_point_names: Vec<String>,
    pub trend_variance: f64,
    pub bias_variance: f64,
    /// Other chunks of the same document, in index order.
    pub sibling_chunks: Vec<ChunkId>,
}

pub fn chunk_context(store: &VectorStore, chunk_id: ChunkId) -> Option<ChunkContext> {
    let c = store.chunk(chunk_id)?;
    let doc = store.document_of(c);
    let rec = store.recording_of(c);
    let mut names: Vec<String> = store
        .points()
        .iter()
        .filter(|p| p.asset_id == doc.asset_id)
        .map(|p| p.name.clone())
        .collect();
    names.sort();
    Some(ChunkContext {
        chunk_id,
        provenance: Provenance::of(doc, Some((c, rec))),
        asset_point_names: names,
        trend_variance: rec.trend_variance,
        bias_variance: rec.bias_variance,
        sibling_chunks: store
            .chunks_of(doc)
            .iter()
            .map(|s| s.chunk_id)
            .filter(|&id| id != chunk_id)
            .collect(),
    })
}

pub const DEFAULT_SESSION_TTL_SECS: i64 = 3600;

pub const TOOLS: [(&str, &str); 12] = [
    (
        "list_tools",
        "Names and one-line descriptions of every tool.",
    ),
    (
        "check_hierarchy",
        "True if the path fragments name a hierarchy path, else the hierarchy tree.",
    ),
    ("query_documents", "Ranked document hits for a query."),
    ("query_chunks", "Ranked recording-chunk hits for a query."),
    ("get_context", "Provenance and neighbourhood of one chunk."),
    (
        "kb_read",
        "Entries of the general or an asset knowledge base.",
    ),
    ("kb_write", "Appends one entry to a knowledge base."),
    (
        "feature_changes",
        "Points ranked by change of a signal feature over a window.",
    ),
    (
        "start_session",
        "Opens a streaming session anchored on a note.",
    ),
    (
        "run_session_step",
        "Advances a session one step and returns its evidence.",
    ),
    (
        "submit_prediction",
        "Ends a session with a prediction and returns its evaluation record.",
    ),
    ("session_status", "Day cursor of an open session."),
];

/// Shared, connection-independent gateway state.
pub struct Gateway {
    store: Arc<VectorStore>,
    kb: RwLock<KnowledgeBase>,
    clock: Arc<dyn Clock>,
    ttl: Duration,
    ontology: Ontology,
}

impl Gateway {
    pub fn new(store: Arc<VectorStore>, clock: Arc<dyn Clock>) -> Self {
        Gateway {
            store,
            kb: RwLock::new(KnowledgeBase::default()),
            clock,
            ttl: Duration::seconds(DEFAULT_SESSION_TTL_SECS),
            ontology: Ontology::default(),
        }
    }

    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn knowledge_base(&self) -> KnowledgeBase {
        self.kb.read().expect("kb lock").clone()
    }

    pub fn connection(self: &Arc<Self>) -> Connection {
        Connection {
            gateway: Arc::clone(self),
            sessions: BTreeMap::new(),
            next_session: 1,
        }
    }

    /// Serves one stream until EOF. Requests are answered in order.
    pub fn serve<R: BufRead, W: Write>(
        self: &Arc<Self>,
        input: R,
        mut output: W,
    ) -> std::io::Result<()> {
        let mut conn = self.connection();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            output.write_all(conn.handle_line(&line).as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(())
    }

    /// Accepts TCP connections, one thread each, sharing the store and KB.
    pub fn serve_tcp(self: &Arc<Self>, addr: impl ToSocketAddrs) -> std::io::Result<()> {
        let listener = TcpListener::bind(addr)?;
        log::info!("gateway listening on {}", listener.local_addr()?);
        self.serve_listener(listener)
    }

    /// Like [`Gateway::serve_tcp`] on an already bound listener.
    pub fn serve_listener(self: &Arc<Self>, listener: TcpListener) -> std::io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            let gw = Arc::clone(self);
            std::thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                let reader = match stream.try_clone() {
                    Ok(s) => std::io::BufReader::new(s),
                    Err(e) => {
                        log::warn!("connection {peer:?}: {e}");
                        return;
                    }
                };
                if let Err(e) = gw.serve(reader, stream) {
                    log::warn!("connection {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }
}

struct OpenSession {
    session: Session,
    last_used: DateTime<Utc>,
}

/// Per-connection state: open sessions with their expiry clock.
pub struct Connection {
    gateway: Arc<Gateway>,
    sessions: BTreeMap<String, OpenSession>,
    next_session: u64,
}

fn args<T: DeserializeOwned>(value: &Value) -> std::result::Result<T, ToolError> {
    let value = if value.is_null() {
        json!({})
    } else {
        value.clone()
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ToolError::new(ErrorCode::InvalidArgs, format!("{path}: {}", e.inner()))
    })
}

fn to_value<T: Serialize>(v: &T) -> std::result::Result<Value, ToolError> {
    serde_json::to_value(v).map_err(|e| ToolError::new(ErrorCode::Internal, e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyArgs {
    path: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextArgs {
    chunk_id: ChunkId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KbReadArgs {
    scope: Scope,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct KbWriteArgs {
    scope: Scope,
    text: String,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureArgs {
    #[serde(default)]
    filter: FilterTree,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    feature: ChangeFeature,
    #[serde(default = "default_top_n")]
    top_n: usize,
}

fn default_top_n() -> usize {
    DEFAULT_CHANGE_TOP_N
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionArgs {
    session_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitArgs {
    session_id: String,
    /// A note class name, or null / "no_fault".
    #[serde(default)]
    prediction: Option<String>,
    #[serde(default)]
    external_verdict: Option<Verdict>,
}

impl Connection {
    /// Answers one request line with one response line.
    pub fn handle_line(&mut self, line: &str) -> String {
        let response = match serde_json::from_str::<Value>(line) {
            Err(e) => ToolResponse {
                id: Value::Null,
                ok: false,
                result: None,
                error: Some(ToolError::new(ErrorCode::ParseError, e.to_string())),
            },
            Ok(v) => {
                let id = v.get("id").cloned().unwrap_or(Value::Null);
                match serde_json::from_value::<ToolRequest>(v) {
                    Err(e) => ToolResponse {
                        id,
                        ok: false,
                        result: None,
                        error: Some(ToolError::new(ErrorCode::ParseError, e.to_string())),
                    },
                    Ok(req) => self.handle(&req),
                }
            }
        };
        serde_json::to_string(&response).expect("responses serialize")
    }

    pub fn handle(&mut self, req: &ToolRequest) -> ToolResponse {
        match self.dispatch(&req.tool, &req.args) {
            Ok(result) => ToolResponse {
                id: req.id.clone(),
                ok: true,
                result: Some(result),
                error: None,
            },
            Err(error) => ToolResponse {
                id: req.id.clone(),
                ok: false,
                result: None,
                error: Some(error),
            },
        }
    }

    fn dispatch(&mut self, tool: &str, raw: &Value) -> std::result::Result<Value, ToolError> {
        let gw = Arc::clone(&self.gateway);
        let store = gw.store();
        match tool {
            "list_tools" => {
                let list: Vec<Value> = TOOLS
                    .iter()
                    .map(|(n, d)| json!({"name": n, "description": d}))
                    .collect();
                Ok(Value::Array(list))
            }
            "check_hierarchy" => {
                let a: HierarchyArgs = args(raw)?;
                if hierarchy_contains(store, &a.path) {
                    Ok(Value::Bool(true))
                } else {
                    to_value(&hierarchy_tree(store))
                }
            }
            "query_documents" | "query_chunks" => {
                let mut q: Query = args(raw)?;
                q.mode = if tool == "query_chunks" {
                    Mode::Chunks
                } else {
                    Mode::Documents
                };
                to_value(&retrieve(store, &q)?)
            }
            "get_context" => {
                let a: ContextArgs = args(raw)?;
                let ctx = chunk_context(store, a.chunk_id).ok_or_else(|| {
                    ToolError::new(ErrorCode::NotFound, format!("unknown chunk {}", a.chunk_id))
                })?;
                to_value(&ctx)
            }
            "kb_read" => {
                let a: KbReadArgs = args(raw)?;
                self.check_scope(a.scope)?;
                let kb = gw.kb.read().expect("kb lock");
                to_value(&kb.read(a.scope))
            }
            "kb_write" => {
                let a: KbWriteArgs = args(raw)?;
                self.check_scope(a.scope)?;
                let timestamp = a.timestamp.unwrap_or_else(|| gw.clock.now());
                let index = gw.kb.write().expect("kb lock").append(
                    a.scope,
                    KbEntry {
                        timestamp,
                        text: a.text,
                    },
                );
                Ok(json!({"index": index, "timestamp": timestamp}))
            }
            "feature_changes" => {
                let a: FeatureArgs = args(raw)?;
                to_value(&feature_change_scan(
                    store, &a.filter, a.start, a.end, a.feature, a.top_n,
                )?)
            }
            "start_session" => {
                let spec: SessionSpec = args(raw)?;
                if store.annotation(spec.note_id).is_none() {
                    return Err(ToolError::new(
                        ErrorCode::NotFound,
                        format!("unknown note {}", spec.note_id),
                    ));
                }
                let session = Session::new(store, spec)?;
                let id = format!("s{}", self.next_session);
                self.next_session += 1;
                let result = json!({
                    "session_id": id,
                    "asset_id": session.asset_id(),
                    "spec": session.spec(),
                });
                self.sessions.insert(
                    id,
                    OpenSession {
                        session,
                        last_used: gw.clock.now(),
                    },
                );
                Ok(result)
            }
            "run_session_step" => {
                let a: SessionArgs = args(raw)?;
                let open = self.session(&a.session_id)?;
                match open.session.next_step(store)? {
                    Some(step) => Ok(json!({"status": "step", "step": to_value(&step)?})),
                    None => Ok(json!({"status": "exhausted"})),
                }
            }
            "session_status" => {
                let a: SessionArgs = args(raw)?;
                let open = self.session(&a.session_id)?;
                Ok(json!({
                    "last_day": open.session.last_day(),
                    "exhausted": open.session.is_exhausted(),
                }))
            }
            "submit_prediction" => {
                let a: SubmitArgs = args(raw)?;
                let prediction = match a.prediction.as_deref() {
                    None | Some("no_fault") => None,
                    Some(name) => Some(NoteClass::from_name(name).map_err(|e| {
                        ToolError::new(ErrorCode::InvalidArgs, format!("prediction: {e}"))
                    })?),
                };
                let open = self.session(&a.session_id)?;
                let day = open.session.last_day().ok_or_else(|| {
                    ToolError::new(ErrorCode::InvalidArgs, "session_id: no step has been run")
                })?;
                let outcome = match (prediction, open.session.is_exhausted()) {
                    (p, true) => Outcome::ForcedExit { day, prediction: p },
                    (Some(p), false) => Outcome::VoluntaryExit { day, prediction: p },
                    (None, false) => Outcome::NoFault { day },
                };
                let spec = open.session.spec().clone();
                let mut record = score_outcome(store, &spec, outcome, &gw.ontology)?;
                record.external_verdict = a.external_verdict;
                self.sessions.remove(&a.session_id);
                to_value(&record)
            }
            other => Err(ToolError::new(
                ErrorCode::ToolNotFound,
                format!("unknown tool {other:?}"),
            )),
        }
    }

    fn check_scope(&self, scope: Scope) -> std::result::Result<(), ToolError> {
        match scope {
            Scope::Asset(id) if self.gateway.store().asset(id).is_none() => Err(ToolError::new(
                ErrorCode::NotFound,
                format!("unknown asset {id}"),
            )),
            _ => Ok(()),
        }
    }

    fn session(&mut self, id: &str) -> std::result::Result<&mut OpenSession, ToolError> {
        let now = self.gateway.clock.now();
        let ttl = self.gateway.ttl;
        let expired = match self.sessions.get(id) {
            None => {
                return Err(ToolError::new(
                    ErrorCode::NotFound,
                    format!("unknown session {id:?}"),
                ))
            }
            Some(s) => now - s.last_used > ttl,
        };
        if expired {
            self.sessions.remove(id);
            return Err(ToolError::new(
                ErrorCode::SessionExpired,
                format!("session {id:?} expired"),
            ));
        }
        let open = self.sessions.get_mut(id).expect("checked above");
        open.last_used = now;
        Ok(open)
    }
}
