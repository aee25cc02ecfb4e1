//! Service state and operations, independent of HTTP.
//!
//! Every mutation persists first and touches memory only once the store
//! succeeded, so a failed request leaves both unchanged.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use skillflow_core::engine::{
    Engine, EngineError, EngineEvent, EngineObserver, EngineOptions, InProcessConnector, InstanceStatus,
    InstanceView, NotificationRecord, NotificationSink, SkillConnector, StartRecord, Stimulus,
};
use skillflow_core::model::{parse_process, validate_process, Diagnostic, ModelError, ProcessDefinition};
use skillflow_core::registry::{Capability, MachineDescriptor, MachineDocument, RegistryDocument, RegistryError};
use skillflow_core::resolution::{
    decide, resolve, validate_plan, BindingPlan, Resolution, ResolutionError, SelectionPolicy,
};
use skillflow_core::{Registry, Variables};

use crate::config::Config;
use crate::connector::{HttpConnector, RoutingConnector};
use crate::storage::{
    CandidateInfo, DeploymentRecord, InstanceRecord, ResolutionSession, Store, StoreError,
};

/// Failure of a service operation, already classified for HTTP.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    /// Extra fields merged into the JSON body.
    pub details: Map<String, Json>,
}

impl ApiError {
    pub fn new(status: u16, code: impl Into<String>, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> ApiError {
        self.details
            .insert(key.to_owned(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn not_found(what: &str, id: &str) -> ApiError {
        ApiError::new(404, "NotFound", format!("unknown {what} {id}"))
    }

    pub fn bad_request(message: impl Into<String>) -> ApiError {
        ApiError::new(400, "BadRequest", message)
    }

    pub fn body(&self) -> Json {
        let mut body = self.details.clone();
        body.insert("error".to_owned(), Json::String(self.code.clone()));
        body.insert("message".to_owned(), Json::String(self.message.clone()));
        Json::Object(body)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", self.status, self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::new(500, "StorageFailed", e.to_string())
    }
}

fn model_error(e: ModelError) -> ApiError {
    let code = match e {
        ModelError::Xml(_) => "XmlError",
        ModelError::UnsupportedElement(_) => "UnsupportedElement",
        ModelError::Structure(_) => "StructureError",
        ModelError::UnknownTask(_) => "UnknownTask",
        ModelError::InvalidBinding(_) => "InvalidBinding",
    };
    ApiError::new(400, code, e.to_string())
}

fn validation_failed(diagnostics: Vec<Diagnostic>) -> ApiError {
    let message = diagnostics.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
    ApiError::new(400, "ValidationFailed", message).with("diagnostics", diagnostics)
}

fn registry_error(e: RegistryError) -> ApiError {
    match e {
        RegistryError::DuplicateIri(ref iri) => ApiError::new(409, "DuplicateIri", e.to_string()).with("iri", iri),
        RegistryError::UnknownIri(ref iri) => ApiError::new(404, "UnknownIri", e.to_string()).with("iri", iri),
        RegistryError::Parse(_) => ApiError::new(400, "ParseError", e.to_string()),
        RegistryError::Validation { ref iri, .. } => {
            ApiError::new(400, "ValidationError", e.to_string()).with("iri", iri)
        }
        RegistryError::DatatypeMismatch { .. } => ApiError::new(400, "DatatypeMismatch", e.to_string()),
    }
}

fn resolution_error(e: ResolutionError) -> ApiError {
    let message = e.to_string();
    match e {
        ResolutionError::Invalid(diags) => validation_failed(diags),
        ResolutionError::NoSkillAvailable { task_id, capability_iri } => {
            ApiError::new(409, "NoSkillAvailable", message)
                .with("taskId", task_id)
                .with("capabilityIri", capability_iri)
        }
        ResolutionError::AmbiguousCapability { task_id, candidates } => {
            ApiError::new(409, "AmbiguousCapability", message)
                .with("taskId", task_id)
                .with("candidates", candidates)
        }
        ResolutionError::UnlinkedProperty { .. } => ApiError::new(409, "UnlinkedProperty", message),
        ResolutionError::CapabilityMismatch { .. } => ApiError::new(409, "CapabilityMismatch", message),
        ResolutionError::UnknownPendingTask(task) => {
            ApiError::new(409, "UnknownPendingTask", message).with("taskId", task)
        }
        ResolutionError::NotACandidate { .. } => ApiError::new(409, "NotACandidate", message),
    }
}

fn engine_error(e: EngineError) -> ApiError {
    let message = e.to_string();
    match e {
        EngineError::UnknownInstance(id) => ApiError::not_found("instance", &id),
        EngineError::AlreadyEnded(_) => ApiError::new(409, "AlreadyEnded", message),
        EngineError::NoOpenWorkItem(_) => ApiError::new(409, "NoOpenWorkItem", message),
        EngineError::DuplicateInstance(_) => ApiError::new(409, "DuplicateInstance", message),
        EngineError::MissingField(_) => ApiError::new(400, "MissingField", message),
        EngineError::UnknownField(_) => ApiError::new(400, "UnknownField", message),
        EngineError::DatatypeMismatch { .. } => ApiError::new(400, "DatatypeMismatch", message),
        EngineError::PlanMismatch(_) => ApiError::new(400, "PlanMismatch", message),
        EngineError::ValidationFailed(diags) => validation_failed(diags),
        EngineError::Persistence(_) => ApiError::new(500, "StorageFailed", message),
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

struct Deployment {
    record: DeploymentRecord,
    def: Arc<ProcessDefinition>,
    xml: Arc<Vec<u8>>,
}

/// A resolution session as clients see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionView {
    pub session_id: String,
    pub definition_id: String,
    pub policy: SelectionPolicy,
    /// `complete` or `pending`.
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<BindingPlan>,
    #[serde(default)]
    pub pending_decisions: Vec<PendingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingView {
    pub task_id: String,
    pub capability_iri: String,
    pub candidates: Vec<CandidateInfo>,
}

impl SessionView {
    fn of(s: &ResolutionSession) -> SessionView {
        let info: BTreeMap<&str, &CandidateInfo> = s.candidates.iter().map(|c| (c.skill.as_str(), c)).collect();
        let (state, plan, pending) = match &s.resolution {
            Resolution::Complete { plan } => ("complete", Some(plan.clone()), Vec::new()),
            Resolution::Pending { decisions } => (
                "pending",
                None,
                decisions
                    .pending
                    .iter()
                    .map(|p| PendingView {
                        task_id: p.task_id.clone(),
                        capability_iri: p.capability_iri.clone(),
                        candidates: p
                            .candidates
                            .iter()
                            .map(|iri| {
                                info.get(iri.as_str()).map(|c| (*c).clone()).unwrap_or_else(|| CandidateInfo {
                                    skill: iri.clone(),
                                    skill_name: iri.clone(),
                                    machine: String::new(),
                                    machine_name: String::new(),
                                })
                            })
                            .collect(),
                    })
                    .collect(),
            ),
        };
        SessionView {
            session_id: s.session_id.clone(),
            definition_id: s.definition_id.clone(),
            policy: s.policy,
            state: state.to_owned(),
            plan,
            pending_decisions: pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceSummary {
    pub instance_id: String,
    pub definition_id: String,
    pub status: InstanceStatus,
}

/// Persists engine activity. Tracks which deployment each instance belongs
/// to because the engine only sees process ids.
struct StoreObserver {
    store: Arc<Store>,
    deployment_of: Mutex<HashMap<String, String>>,
}

impl EngineObserver for StoreObserver {
    fn instance_started(&self, record: &StartRecord, events: &[EngineEvent]) -> Result<(), String> {
        let deployment_id = self
            .deployment_of
            .lock()
            .expect("observer lock poisoned")
            .get(&record.instance_id)
            .cloned()
            .ok_or_else(|| format!("no deployment known for instance {}", record.instance_id))?;
        self.store
            .create_instance(
                &InstanceRecord {
                    deployment_id,
                    start: record.clone(),
                },
                events,
            )
            .map_err(|e| e.to_string())
    }

    fn stimulus_applied(&self, instance_id: &str, stimulus: &Stimulus, events: &[EngineEvent]) -> Result<(), String> {
        self.store
            .append_stimulus(instance_id, stimulus, events)
            .map_err(|e| e.to_string())
    }

    fn notification(&self, record: &NotificationRecord) -> Result<(), String> {
        self.store.append_notification(record).map_err(|e| e.to_string())
    }
}

pub struct AppOptions {
    /// Registry used when the store has none.
    pub seed_registry: Option<RegistryDocument>,
    pub sink: Option<Arc<dyn NotificationSink>>,
    pub skill_poll: Duration,
}

impl Default for AppOptions {
    fn default() -> Self {
        AppOptions {
            seed_registry: None,
            sink: None,
            skill_poll: Duration::from_secs(1),
        }
    }
}

pub struct App {
    store: Arc<Store>,
    registry: RwLock<Registry>,
    deployments: RwLock<Vec<Deployment>>,
    sessions: Mutex<BTreeMap<String, ResolutionSession>>,
    engine: Engine,
    observer: Arc<StoreObserver>,
    in_process: Arc<InProcessConnector>,
}

fn now_ms() -> u64 {
    skillflow_core::engine::host::now_ms()
}

impl App {
    /// Opens the data directory named by `config`.
    pub fn open(config: &Config) -> anyhow::Result<App> {
        let store = Store::open_dir(&config.data_dir)?;
        let seed_registry = match &config.registry {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
                Some(Registry::load(&bytes)?.to_document())
            }
            None => None,
        };
        let options = AppOptions {
            seed_registry,
            sink: crate::sinks::from_config(&config.notifications),
            skill_poll: Duration::from_millis(config.skill_poll_ms),
        };
        Ok(App::with_store(store, options)?)
    }

    /// Loads everything `store` holds and replays stored instances.
    pub fn with_store(store: Store, options: AppOptions) -> Result<App, ApiError> {
        let store = Arc::new(store);
        let registry = match store.load_registry()? {
            Some(doc) => Registry::from_document(doc).map_err(registry_error)?,
            None => {
                let registry = match options.seed_registry {
                    Some(doc) => Registry::from_document(doc).map_err(registry_error)?,
                    None => Registry::new(),
                };
                store.save_registry(&registry.to_document())?;
                registry
            }
        };

        let mut deployments = Vec::new();
        for record in store.deployments()? {
            let xml = store
                .deployment_xml(&record.definition_id)?
                .ok_or_else(|| ApiError::new(500, "StorageFailed", format!("missing xml for {}", record.definition_id)))?;
            let def = parse_process(&xml).map_err(model_error)?;
            deployments.push(Deployment {
                record,
                def: Arc::new(def),
                xml: Arc::new(xml),
            });
        }
        let sessions = store.sessions()?.into_iter().map(|s| (s.session_id.clone(), s)).collect();

        let observer = Arc::new(StoreObserver {
            store: Arc::clone(&store),
            deployment_of: Mutex::new(HashMap::new()),
        });
        let in_process = Arc::new(InProcessConnector::new());
        let connector: Arc<dyn SkillConnector> = Arc::new(RoutingConnector::new(
            Arc::clone(&in_process),
            HttpConnector::default(),
        ));
        let engine = Engine::new(
            connector,
            EngineOptions {
                sink: options.sink,
                observer: Some(Arc::clone(&observer) as Arc<dyn EngineObserver>),
                poll_timeout: options.skill_poll,
                ..EngineOptions::default()
            },
        );
        for stored in store.instances()? {
            let id = stored.record.start.instance_id.clone();
            let Some(dep) = deployments.iter().find(|d| d.record.definition_id == stored.record.deployment_id) else {
                tracing::warn!(instance = %id, "skipping instance of unknown deployment {}", stored.record.deployment_id);
                continue;
            };
            observer
                .deployment_of
                .lock()
                .expect("observer lock poisoned")
                .insert(id.clone(), stored.record.deployment_id.clone());
            engine
                .restore(stored.record.start, Arc::clone(&dep.def), &stored.stimuli)
                .map_err(engine_error)?;
            let replayed = engine.with_instance(&id, |i| i.history().to_vec()).map_err(engine_error)?;
            if replayed != stored.events {
                tracing::warn!(instance = %id, "replayed history differs from the stored event log");
            }
        }

        Ok(App {
            store,
            registry: RwLock::new(registry),
            deployments: RwLock::new(deployments),
            sessions: Mutex::new(sessions),
            engine,
            observer,
            in_process,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Modules reached through `in-process` interfaces.
    pub fn in_process(&self) -> &Arc<InProcessConnector> {
        &self.in_process
    }

    pub fn registry(&self) -> Registry {
        self.registry.read().expect("registry lock poisoned").clone()
    }

    // -- registry

    pub fn capabilities(&self) -> Vec<Capability> {
        self.registry.read().expect("registry lock poisoned").capabilities().cloned().collect()
    }

    pub fn machines(&self) -> Vec<MachineDocument> {
        self.registry.read().expect("registry lock poisoned").to_document().machines
    }

    pub fn register_machine(&self, doc: MachineDocument) -> ApiResult<MachineDescriptor> {
        let mut registry = self.registry.write().expect("registry lock poisoned");
        let mut next = registry.clone();
        let iri = doc.iri.clone();
        next.register_machine(doc).map_err(registry_error)?;
        self.store.save_registry(&next.to_document())?;
        *registry = next;
        Ok(registry.machine(&iri).expect("just registered").clone())
    }

    pub fn unregister_machine(&self, iri: &str) -> ApiResult<()> {
        let mut registry = self.registry.write().expect("registry lock poisoned");
        let mut next = registry.clone();
        next.unregister_machine(iri).map_err(registry_error)?;
        self.store.save_registry(&next.to_document())?;
        *registry = next;
        Ok(())
    }

    // -- deployments

    pub fn deploy(&self, xml: Vec<u8>) -> ApiResult<DeploymentRecord> {
        let def = parse_process(&xml).map_err(model_error)?;
        let structural = validate_process(&def, None);
        if !structural.is_empty() {
            return Err(validation_failed(structural));
        }
        // Registry-dependent findings are kept for information; they are
        // enforced when resolving against the registry of that moment.
        let diagnostics = validate_process(&def, Some(&self.registry()));
        let mut deployments = self.deployments.write().expect("deployment lock poisoned");
        let version = deployments.iter().filter(|d| d.record.process_id == def.id).count() + 1;
        let record = DeploymentRecord {
            definition_id: format!("{}-{version}", def.id),
            process_id: def.id.clone(),
            name: def.name.clone(),
            deployed_at: now_ms(),
            diagnostics,
        };
        self.store.add_deployment(&record, &xml)?;
        deployments.push(Deployment {
            record: record.clone(),
            def: Arc::new(def),
            xml: Arc::new(xml),
        });
        Ok(record)
    }

    pub fn deployments(&self) -> Vec<DeploymentRecord> {
        self.deployments
            .read()
            .expect("deployment lock poisoned")
            .iter()
            .map(|d| d.record.clone())
            .collect()
    }

    fn deployment(&self, id: &str) -> ApiResult<(DeploymentRecord, Arc<ProcessDefinition>, Arc<Vec<u8>>)> {
        self.deployments
            .read()
            .expect("deployment lock poisoned")
            .iter()
            .find(|d| d.record.definition_id == id)
            .map(|d| (d.record.clone(), Arc::clone(&d.def), Arc::clone(&d.xml)))
            .ok_or_else(|| ApiError::not_found("definition", id))
    }

    pub fn deployment_record(&self, id: &str) -> ApiResult<DeploymentRecord> {
        Ok(self.deployment(id)?.0)
    }

    /// The uploaded bytes, unchanged.
    pub fn deployment_xml(&self, id: &str) -> ApiResult<Arc<Vec<u8>>> {
        Ok(self.deployment(id)?.2)
    }

    // -- resolution

    pub fn create_resolution(&self, definition_id: &str, policy: SelectionPolicy) -> ApiResult<SessionView> {
        let (_, def, _) = self.deployment(definition_id)?;
        let registry = self.registry();
        let resolution = resolve(&def, &registry, policy).map_err(resolution_error)?;
        let mut candidates = Vec::new();
        if let Resolution::Pending { decisions } = &resolution {
            for iri in decisions.pending.iter().flat_map(|p| &p.candidates) {
                if let Some(skill) = registry.skill(iri) {
                    candidates.push(CandidateInfo {
                        skill: skill.iri.clone(),
                        skill_name: skill.name.clone(),
                        machine: skill.machine_iri.clone(),
                        machine_name: registry.machine(&skill.machine_iri).map(|m| m.name.clone()).unwrap_or_default(),
                    });
                }
            }
        }
        let session = ResolutionSession {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            definition_id: definition_id.to_owned(),
            policy,
            resolution,
            candidates,
            created_at: now_ms(),
        };
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        self.store.save_session(&session)?;
        let view = SessionView::of(&session);
        sessions.insert(session.session_id.clone(), session);
        Ok(view)
    }

    pub fn session(&self, id: &str) -> ApiResult<SessionView> {
        self.sessions
            .lock()
            .expect("session lock poisoned")
            .get(id)
            .map(SessionView::of)
            .ok_or_else(|| ApiError::not_found("resolution", id))
    }

    pub fn submit_decision(&self, session_id: &str, task_id: &str, skill_iri: &str) -> ApiResult<SessionView> {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let session = sessions
            .get(session_id)
            .ok_or_else(|| ApiError::not_found("resolution", session_id))?;
        let Resolution::Pending { decisions } = &session.resolution else {
            return Err(ApiError::new(409, "PlanComplete", "the session already holds a complete plan"));
        };
        let mut next = session.clone();
        next.resolution = decide(decisions, task_id, skill_iri).map_err(resolution_error)?;
        self.store.save_session(&next)?;
        let view = SessionView::of(&next);
        sessions.insert(session_id.to_owned(), next);
        Ok(view)
    }

    // -- instances

    pub fn start_instance(&self, session_id: &str, variables: Variables) -> ApiResult<InstanceView> {
        let (definition_id, plan) = {
            let sessions = self.sessions.lock().expect("session lock poisoned");
            let session = sessions
                .get(session_id)
                .ok_or_else(|| ApiError::not_found("resolution", session_id))?;
            let plan = session.resolution.plan().cloned().ok_or_else(|| {
                ApiError::new(409, "PlanIncomplete", "decisions are still pending").with(
                    "pendingDecisions",
                    SessionView::of(session).pending_decisions,
                )
            })?;
            (session.definition_id.clone(), plan)
        };
        let (_, def, _) = self.deployment(&definition_id)?;
        let registry = self.registry.read().expect("registry lock poisoned");
        let diagnostics = validate_plan(&plan, &def, &registry);
        if !diagnostics.is_empty() {
            return Err(validation_failed(diagnostics));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.observer
            .deployment_of
            .lock()
            .expect("observer lock poisoned")
            .insert(id.clone(), definition_id);
        let started = self.engine.start_instance(&id, def, &plan, &registry, variables);
        if started.is_err() {
            self.observer.deployment_of.lock().expect("observer lock poisoned").remove(&id);
        }
        started.map_err(engine_error)
    }

    pub fn instances(&self) -> Vec<InstanceSummary> {
        let deployment_of = self.observer.deployment_of.lock().expect("observer lock poisoned").clone();
        self.engine
            .instance_ids()
            .into_iter()
            .filter_map(|id| {
                self.engine
                    .with_instance(&id, |i| InstanceSummary {
                        definition_id: deployment_of.get(&id).cloned().unwrap_or_else(|| i.definition().id.clone()),
                        instance_id: id.clone(),
                        status: i.status(),
                    })
                    .ok()
            })
            .collect()
    }

    pub fn snapshot(&self, id: &str) -> ApiResult<InstanceView> {
        self.engine.snapshot(id).map_err(engine_error)
    }

    pub async fn events(&self, id: &str, since: u64, timeout: Duration) -> ApiResult<Vec<EngineEvent>> {
        self.engine.events(id, since, timeout).await.map_err(engine_error)
    }

    pub fn complete_user_task(&self, id: &str, task_id: &str, values: Variables) -> ApiResult<()> {
        self.engine.complete_user_task(id, task_id, values).map_err(engine_error)
    }

    pub fn cancel_instance(&self, id: &str) -> ApiResult<()> {
        self.engine.cancel_instance(id).map_err(engine_error)
    }

    pub fn notifications(&self) -> Vec<NotificationRecord> {
        self.engine.notifications()
    }
}

/// Body of `POST /instances`.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartRequest {
    pub session_id: String,
    #[serde(default)]
    pub variables: Variables,
}

/// Body of `POST /resolutions/{id}/decisions`.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionRequest {
    pub task_id: String,
    pub skill: String,
}

/// Body of `POST /processes/{id}/resolutions`; may be empty.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct ResolutionRequest {
    #[serde(default)]
    pub policy: SelectionPolicy,
}
