//! HTTP/JSON surface. Ids are qualified by their project: `p1` for a
//! project, `p1.c3` for a cluster, `p1.s2` for a grow session and `p1.n5`
//! for a tree node.

use std::future::Future;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use densesort_core::density::DEFAULT_SCHEDULE;
use densesort_core::hierarchy::{Hierarchy, NodeId};
use densesort_core::lifecycle::{
    dissimilar_display_prefix, Cluster, ClusterId, ClusterStatus, GrowSession, PageVerdict, Verdict,
};
use densesort_core::Error;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{ServiceError, ServiceResult};
use crate::project::{IterationOutcome, Project, ProjectConfig};
use crate::workspace::{ProjectHandle, Workspace};

pub struct AppState {
    pub workspace: Workspace,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub token: Option<String>,
    /// Actor recorded on events created through the API.
    pub actor: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ServiceError::Core(e) => match e {
                Error::NotFound { .. } => (StatusCode::NOT_FOUND, "not_found"),
                Error::State(_) | Error::Structure(_) | Error::Cancelled => (StatusCode::CONFLICT, "conflict"),
                Error::Io(_) | Error::Csv(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
                Error::Format(_)
                | Error::DuplicateId(_)
                | Error::Value(_)
                | Error::InsufficientPoints { .. }
                | Error::Protocol(_)
                | Error::Undefined(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            },
            ServiceError::Busy(_) => (StatusCode::CONFLICT, "busy"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
        };
        if status.is_server_error() {
            tracing::warn!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": kind, "message": self.to_string() }))).into_response()
    }
}

type ApiResult<T = Json<Value>> = Result<T, ServiceError>;
type Shared = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{p}", get(project_summary))
        .route("/projects/{p}/iterations", post(start_iteration))
        .route("/projects/{p}/iterations/current", delete(cancel_iteration))
        .route("/projects/{p}/clusters", get(list_clusters))
        .route("/projects/{p}/growth-queue", get(growth_queue))
        .route("/projects/{p}/tree", get(get_tree).post(build_tree))
        .route("/projects/{p}/labeling", get(labeling))
        .route("/projects/{p}/metrics", get(metrics))
        .route("/projects/{p}/events", get(events))
        .route("/clusters/{c}", get(cluster))
        .route("/clusters/{c}/members", get(members))
        .route("/clusters/{c}/approve", post(approve))
        .route("/clusters/{c}/approve-flag", post(approve_flag))
        .route("/clusters/{c}/reject", post(reject))
        .route("/clusters/{c}/grow-sessions", post(open_grow))
        .route("/grow-sessions/{s}", get(session_state))
        .route("/grow-sessions/{s}/next-probe", get(next_probe))
        .route("/grow-sessions/{s}/pages/{i}", get(page))
        .route("/grow-sessions/{s}/pages/{i}/verdict", post(page_verdict))
        .route("/grow-sessions/{s}/remove/{object}", post(remove_candidate))
        .route("/grow-sessions/{s}/accept/{object}", post(accept_candidate))
        .route("/grow-sessions/{s}/commit", post(commit))
        .route("/nodes/{n}/merge-into/{m}", post(merge_into))
        .route("/nodes/{n}/move/{parent}", post(move_node))
        .route("/nodes/{n}/name", post(name_node))
        .layer(middleware::from_fn_with_state(Arc::clone(&state), authorize))
        .with_state(state)
}

/// Serves the API until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

async fn authorize(State(state): Shared, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ServiceError::Unauthorized.into_response();
        }
    }
    next.run(request).await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ServiceResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON body: {e}")))
}

/// Splits `p1.c3` into the project id and the numeric part after `tag`.
fn split_id(id: &str, tag: char, kind: &'static str) -> ServiceResult<(String, u64)> {
    id.rsplit_once('.')
        .and_then(|(p, rest)| Some((p.to_string(), rest.strip_prefix(tag)?.parse().ok()?)))
        .ok_or_else(|| ServiceError::not_found(kind, id))
}

fn resolve(state: &AppState, id: &str, tag: char, kind: &'static str) -> ServiceResult<(Arc<ProjectHandle>, u64)> {
    let (p, n) = split_id(id, tag, kind)?;
    let handle = state.workspace.project(&p).map_err(|_| ServiceError::not_found(kind, id))?;
    Ok((handle, n))
}

fn parse_index(s: &str, what: &str) -> ServiceResult<usize> {
    s.parse().map_err(|_| ServiceError::BadRequest(format!("{what} must be a non-negative integer, got `{s}`")))
}

fn cluster_key(p: &str, c: ClusterId) -> String {
    format!("{p}.{c}")
}

fn node_key(p: &str, n: NodeId) -> String {
    format!("{p}.{n}")
}

fn session_key(p: &str, s: u64) -> String {
    format!("{p}.s{s}")
}

fn cluster_json(p: &str, project: &Project, c: &Cluster) -> Value {
    json!({
        "cluster_id": cluster_key(p, c.cluster_id),
        "status": c.status,
        "flagged": c.flagged,
        "seed_size": c.seed_members.len(),
        "grown_size": c.grown_members.len(),
        "size": c.size(),
        "created_iteration": c.created_iteration,
        "grow_session": project.open_session_of(c.cluster_id).map(|s| session_key(p, s)),
    })
}

fn session_json(p: &str, id: u64, s: &GrowSession) -> Value {
    json!({
        "session_id": session_key(p, id),
        "cluster_id": cluster_key(p, s.cluster_id),
        "mode": s.mode(),
        "page_count": s.page_count(),
        "candidate_count": s.candidate_order().len(),
        "page_verdicts": s.page_verdicts(),
        "current_page": s.current_page(),
        "next_probe": s.next_probe().ok(),
        "threshold": s.threshold(),
        "judged_pages": s.judged_pages(),
        "object_decisions": s.object_decisions(),
        "committable": s.is_committable(),
        "committed": s.is_committed(),
    })
}

/// Tree as served over HTTP, with prefixed node and cluster ids.
pub fn tree_json(p: &str, project: &Project, tree: &Hierarchy) -> ServiceResult<Value> {
    let mut nodes = Vec::new();
    for n in tree.nodes() {
        let mut objects = 0;
        for c in tree.subtree_clusters(n.node_id)? {
            objects += project.book().cluster(c)?.size();
        }
        nodes.push(json!({
            "node_id": node_key(p, n.node_id),
            "parent": n.parent.map(|x| node_key(p, x)),
            "children": n.children.iter().map(|&x| node_key(p, x)).collect::<Vec<_>>(),
            "clusters": n.clusters.iter().map(|&c| cluster_key(p, c)).collect::<Vec<_>>(),
            "name": n.name,
            "path": tree.path_of(n.node_id)?,
            "merge_height": n.merge_height,
            "object_count": objects,
        }));
    }
    Ok(json!({ "root": node_key(p, tree.root()), "stats": tree.stats(), "nodes": nodes }))
}

fn project_json(handle: &ProjectHandle) -> Value {
    let busy = handle.is_busy();
    handle.read(|project| {
        let mut by_status = std::collections::BTreeMap::new();
        for c in project.book().clusters() {
            *by_status.entry(c.status).or_insert(0usize) += 1;
        }
        json!({
            "project_id": handle.id(),
            "features": project.config().features,
            "labels": project.config().labels,
            "schedule": project.config().schedule,
            "k": project.config().k,
            "object_count": project.store().len(),
            "iteration": project.iteration(),
            "schedule_exhausted": project.schedule_exhausted(),
            "clusters_by_status": by_status,
            "unassigned_objects": project.book().unassigned().len(),
            "event_count": project.events().len(),
            "has_tree": project.tree().is_some(),
            "clustering": busy,
        })
    })
}

async fn list_projects(State(state): Shared) -> ApiResult {
    let mut out = Vec::new();
    for id in state.workspace.project_ids() {
        out.push(project_json(&*state.workspace.project(&id)?));
    }
    Ok(Json(Value::Array(out)))
}

#[derive(Deserialize)]
struct CreateProject {
    features: String,
    #[serde(default)]
    labels: Option<String>,
    #[serde(default)]
    schedule: Option<Vec<usize>>,
    #[serde(default)]
    k: Option<usize>,
}

async fn create_project(State(state): Shared, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateProject = parse_body(&body)?;
    let config = ProjectConfig {
        features: req.features,
        labels: req.labels,
        schedule: req.schedule.unwrap_or_else(|| DEFAULT_SCHEDULE.to_vec()),
        k: req.k.unwrap_or(1),
    };
    let state2 = Arc::clone(&state);
    let handle = tokio::task::spawn_blocking(move || state2.workspace.create_project(config, &state2.actor))
        .await
        .map_err(|e| ServiceError::BadRequest(format!("project creation failed: {e}")))??;
    tracing::info!(project = handle.id(), "project created");
    Ok((StatusCode::CREATED, Json(project_json(&handle))))
}

async fn project_summary(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    Ok(Json(project_json(&*state.workspace.project(&p)?)))
}

async fn start_iteration(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    let job = Arc::clone(&handle);
    let outcome = tokio::task::spawn_blocking(move || job.run_iteration())
        .await
        .map_err(|e| ServiceError::Core(Error::State(format!("clustering job failed: {e}"))))??;
    Ok(Json(match outcome {
        IterationOutcome::Done => json!({ "status": "done" }),
        IterationOutcome::Started { iteration, m, proposed } => {
            tracing::info!(project = %p, iteration, m, proposed = proposed.len(), "iteration started");
            json!({
                "status": "started",
                "iteration": iteration,
                "m": m,
                "proposed": proposed.iter().map(|&c| cluster_key(&p, c)).collect::<Vec<_>>(),
            })
        }
    }))
}

async fn cancel_iteration(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    Ok(Json(json!({ "cancelled": handle.cancel_iteration() })))
}

#[derive(Deserialize)]
struct ClusterFilter {
    status: Option<ClusterStatus>,
}

async fn list_clusters(State(state): Shared, Path(p): Path<String>, Query(filter): Query<ClusterFilter>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    Ok(Json(handle.read(|project| {
        Value::Array(
            project
                .book()
                .clusters()
                .filter(|c| filter.status.is_none_or(|s| s == c.status))
                .map(|c| cluster_json(&p, project, c))
                .collect(),
        )
    })))
}

async fn growth_queue(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    Ok(Json(handle.read(|project| {
        json!(project.growth_queue().into_iter().map(|c| cluster_key(&p, c)).collect::<Vec<_>>())
    })))
}

async fn cluster(State(state): Shared, Path(c): Path<String>) -> ApiResult {
    let (handle, n) = resolve(&state, &c, 'c', "cluster")?;
    let p = handle.id().to_string();
    handle.read(|project| Ok(Json(cluster_json(&p, project, project.book().cluster(ClusterId(n))?))))
}

#[derive(Deserialize)]
struct MemberQuery {
    order: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn members(State(state): Shared, Path(c): Path<String>, Query(q): Query<MemberQuery>) -> ApiResult {
    let (handle, n) = resolve(&state, &c, 'c', "cluster")?;
    let offset = q.offset.unwrap_or(0);
    handle.read(|project| {
        let cluster = project.book().cluster(ClusterId(n))?;
        let all: Vec<usize> = cluster.members().collect();
        let limit = q.limit.unwrap_or(all.len());
        let end = offset.saturating_add(limit).min(all.len());
        let ordered = match q.order.as_deref() {
            None | Some("id") => all.clone(),
            Some("dissimilar") => dissimilar_display_prefix(project.store(), &all, end)?,
            Some(other) => return Err(ServiceError::BadRequest(format!("unknown order `{other}`"))),
        };
        let store = project.store();
        let page: Vec<&str> = ordered.iter().skip(offset).take(limit).map(|&o| store.object_id(o)).collect();
        Ok(Json(json!({ "cluster_id": c, "total": all.len(), "offset": offset, "members": page })))
    })
}

fn validate(state: &AppState, c: &str, verdict: Verdict) -> ApiResult {
    let (handle, n) = resolve(state, c, 'c', "cluster")?;
    let p = handle.id().to_string();
    let mut guard = handle.lock();
    guard.mutate(|project| project.validate_cluster(ClusterId(n), verdict).map(|_| ()))?;
    let project = guard.project();
    Ok(Json(cluster_json(&p, project, project.book().cluster(ClusterId(n))?)))
}

async fn approve(State(state): Shared, Path(c): Path<String>) -> ApiResult {
    validate(&state, &c, Verdict::Approve)
}

async fn approve_flag(State(state): Shared, Path(c): Path<String>) -> ApiResult {
    validate(&state, &c, Verdict::ApproveFlag)
}

async fn reject(State(state): Shared, Path(c): Path<String>) -> ApiResult {
    validate(&state, &c, Verdict::Reject)
}

async fn open_grow(State(state): Shared, Path(c): Path<String>) -> ApiResult {
    let (handle, n) = resolve(&state, &c, 'c', "cluster")?;
    let p = handle.id().to_string();
    let mut guard = handle.lock();
    let s = guard.mutate(|project| project.open_grow(ClusterId(n)))?;
    Ok(Json(session_json(&p, s, guard.project().session(s)?)))
}

fn with_session<T>(
    state: &AppState,
    s: &str,
    f: impl FnOnce(&str, u64, &mut crate::persist::StoredProject) -> ServiceResult<T>,
) -> ServiceResult<T> {
    let (handle, n) = resolve(state, s, 's', "grow session")?;
    let p = handle.id().to_string();
    let mut guard = handle.lock();
    guard.project().session(n)?;
    f(&p, n, &mut guard)
}

async fn session_state(State(state): Shared, Path(s): Path<String>) -> ApiResult {
    with_session(&state, &s, |p, n, stored| Ok(Json(session_json(p, n, stored.project().session(n)?))))
}

async fn next_probe(State(state): Shared, Path(s): Path<String>) -> ApiResult {
    with_session(&state, &s, |_, n, stored| Ok(Json(json!(stored.project().session(n)?.next_probe()?))))
}

async fn page(State(state): Shared, Path((s, i)): Path<(String, String)>) -> ApiResult {
    let i = parse_index(&i, "page")?;
    with_session(&state, &s, |_, n, stored| {
        let project = stored.project();
        let session = project.session(n)?;
        let store = project.store();
        let objects = session.page(i)?;
        let decision = |o: &usize| {
            if session.turtle_removed().contains(o) {
                Some("removed")
            } else if session.turtle_accepted().contains(o) {
                Some("accepted")
            } else {
                None
            }
        };
        Ok(Json(json!({
            "session_id": s,
            "page": i,
            "status": session.page_verdicts()[i],
            "objects": objects.iter().map(|o| json!({ "object_id": store.object_id(*o), "decision": decision(o) })).collect::<Vec<_>>(),
        })))
    })
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: PageVerdict,
}

async fn page_verdict(State(state): Shared, Path((s, i)): Path<(String, String)>, body: Bytes) -> ApiResult {
    let i = parse_index(&i, "page")?;
    let VerdictBody { verdict } = parse_body(&body)?;
    with_session(&state, &s, |p, n, stored| {
        stored.mutate(|project| project.page_verdict(n, i, verdict))?;
        Ok(Json(session_json(p, n, stored.project().session(n)?)))
    })
}

async fn remove_candidate(State(state): Shared, Path((s, object)): Path<(String, String)>) -> ApiResult {
    with_session(&state, &s, |p, n, stored| {
        stored.mutate(|project| project.remove_candidate(n, &object))?;
        Ok(Json(session_json(p, n, stored.project().session(n)?)))
    })
}

async fn accept_candidate(State(state): Shared, Path((s, object)): Path<(String, String)>) -> ApiResult {
    with_session(&state, &s, |p, n, stored| {
        stored.mutate(|project| project.accept_candidate(n, &object))?;
        Ok(Json(session_json(p, n, stored.project().session(n)?)))
    })
}

async fn commit(State(state): Shared, Path(s): Path<String>) -> ApiResult {
    with_session(&state, &s, |p, n, stored| {
        let result = stored.mutate(|project| project.commit_grow(n))?;
        let project = stored.project();
        Ok(Json(json!({
            "session_id": session_key(p, n),
            "cluster_id": cluster_key(p, result.cluster),
            "added": result.added.len(),
            "cluster": cluster_json(p, project, project.book().cluster(result.cluster)?),
        })))
    })
}

async fn build_tree(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    let mut guard = handle.lock();
    guard.mutate(|project| project.build_tree().map(|_| ()))?;
    let project = guard.project();
    Ok(Json(tree_json(&p, project, project.tree().expect("just built"))?))
}

async fn get_tree(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    handle.read(|project| {
        let tree = project.tree().ok_or_else(|| ServiceError::not_found("tree", &p))?;
        Ok(Json(tree_json(&p, project, tree)?))
    })
}

/// Resolves two node ids that must belong to the same project.
fn node_pair(state: &AppState, a: &str, b: &str) -> ServiceResult<(Arc<ProjectHandle>, NodeId, NodeId)> {
    let (handle, x) = resolve(state, a, 'n', "node")?;
    let (other, y) = resolve(state, b, 'n', "node")?;
    if handle.id() != other.id() {
        return Err(ServiceError::BadRequest(format!("{a} and {b} belong to different projects")));
    }
    Ok((handle, NodeId(x), NodeId(y)))
}

fn edit_tree(handle: &ProjectHandle, f: impl FnOnce(&mut Project) -> densesort_core::Result<()>) -> ApiResult {
    let p = handle.id().to_string();
    let mut guard = handle.lock();
    guard.mutate(f)?;
    let project = guard.project();
    Ok(Json(tree_json(&p, project, project.tree().expect("edits need a tree"))?))
}

async fn merge_into(State(state): Shared, Path((n, m)): Path<(String, String)>) -> ApiResult {
    let (handle, from, into) = node_pair(&state, &n, &m)?;
    edit_tree(&handle, |project| project.merge_nodes(into, from))
}

async fn move_node(State(state): Shared, Path((n, parent)): Path<(String, String)>) -> ApiResult {
    let (handle, node, parent) = node_pair(&state, &n, &parent)?;
    edit_tree(&handle, |project| project.move_node(node, parent))
}

#[derive(Deserialize)]
struct NameBody {
    name: String,
}

async fn name_node(State(state): Shared, Path(n): Path<String>, body: Bytes) -> ApiResult {
    let NameBody { name } = parse_body(&body)?;
    let (handle, node) = resolve(&state, &n, 'n', "node")?;
    edit_tree(&handle, |project| project.name_node(NodeId(node), &name))
}

async fn labeling(State(state): Shared, Path(p): Path<String>) -> ApiResult<Response> {
    let handle = state.workspace.project(&p)?;
    let csv = handle.read(|project| project.labeling().map(|l| l.to_csv_string()))?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn metrics(State(state): Shared, Path(p): Path<String>) -> ApiResult {
    let handle = state.workspace.project(&p)?;
    let report = handle.read(|project| project.metrics(None))?;
    Ok(Json(serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))?))
}

async fn events(State(state): Shared, Path(p): Path<String>) -> ApiResult<Response> {
    let handle = state.workspace.project(&p)?;
    let mut buf = Vec::new();
    handle.read(|project| densesort_core::events::write_jsonl(&mut buf, project.events()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(buf)).into_response())
}
