#![allow(dead_code)]

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value as Json;
use skillflow_core::plant::{PlantConfig, VirtualModule};
use skillflow_core::registry::{MachineDocument, RegistryDocument};
use skillflow_core::state_machine::SkillState;
use skillflow_server::app::{App, AppOptions};
use skillflow_server::storage::Store;
use skillflow_server::wire::{serve_plant, ServedModule};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const LOCALHOST: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn registry_doc() -> RegistryDocument {
    serde_json::from_slice(&fixture("festo_registry.json")).unwrap()
}

pub fn drill2_doc() -> MachineDocument {
    serde_json::from_slice(&fixture("drill2_machine.json")).unwrap()
}

/// The four-module plant served over HTTP on free ports, with machine
/// documents whose base URLs point at those ports.
pub struct HttpPlant {
    pub served: Vec<ServedModule>,
    pub registry: RegistryDocument,
    pub drill2: MachineDocument,
}

impl HttpPlant {
    pub async fn start() -> HttpPlant {
        let mut plant: PlantConfig = serde_json::from_slice(&fixture("festo_plant.json")).unwrap();
        for m in &mut plant.modules {
            m.port = None;
        }
        let mut registry = registry_doc();
        let mut drill2 = drill2_doc();
        let all: Vec<MachineDocument> = registry.machines.iter().cloned().chain([drill2.clone()]).collect();
        let served = serve_plant(&plant, &all, LOCALHOST).await.unwrap();
        for machine in registry.machines.iter_mut().chain([&mut drill2]) {
            let url = served
                .iter()
                .find(|s| s.module.machine().iri == machine.iri)
                .map(ServedModule::base_url)
                .unwrap();
            for skill in &mut machine.skills {
                skill.interface.base_url = Some(url.clone());
            }
        }
        HttpPlant {
            served,
            registry,
            drill2,
        }
    }

    pub fn module(&self, machine_iri: &str) -> &VirtualModule {
        &self.served.iter().find(|s| s.module.machine().iri == machine_iri).unwrap().module
    }

    pub fn drill1(&self) -> &VirtualModule {
        self.module("urn:festo:machine:drill1")
    }

    pub fn drill2(&self) -> &VirtualModule {
        self.module("urn:festo:machine:drill2")
    }

    pub async fn settle_idle(&self) {
        for s in &self.served {
            for skill in s.module.skill_ids().map(str::to_owned).collect::<Vec<_>>() {
                settle_idle(&s.module, &skill).await;
            }
        }
    }
}

pub async fn settle_idle(module: &VirtualModule, skill: &str) {
    for _ in 0..250 {
        if module.get_state(skill).unwrap().state == SkillState::Idle {
            return;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("{skill} never returned to Idle");
}

pub fn options(seed: Option<RegistryDocument>) -> AppOptions {
    AppOptions {
        seed_registry: seed,
        sink: None,
        skill_poll: Duration::from_millis(500),
    }
}

/// The service API on a free port.
pub struct Service {
    pub app: Arc<App>,
    pub url: String,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl Service {
    pub async fn start(store: Store, options: AppOptions) -> Service {
        let app = Arc::new(App::with_store(store, options).unwrap());
        Service::serve(app).await
    }

    pub async fn serve(app: Arc<App>) -> Service {
        let listener = tokio::net::TcpListener::bind(SocketAddr::new(LOCALHOST, 0)).await.unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn({
            let app = Arc::clone(&app);
            async move {
                skillflow_server::api::serve(app, listener, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            }
        });
        Service {
            app,
            url,
            shutdown: Some(tx),
            task,
        }
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Status and parsed body (Null when empty or not JSON).
pub struct Reply {
    pub status: u16,
    pub body: Json,
    pub raw: Vec<u8>,
}

pub struct Http {
    base: String,
    client: reqwest::Client,
}

impl Http {
    pub fn new(base: &str) -> Http {
        Http {
            base: base.to_owned(),
            client: reqwest::Client::new(),
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Reply {
        let resp = req.timeout(Duration::from_secs(30)).send().await.unwrap();
        let status = resp.status().as_u16();
        let raw = resp.bytes().await.unwrap().to_vec();
        let body = serde_json::from_slice(&raw).unwrap_or(Json::Null);
        Reply { status, body, raw }
    }

    pub async fn get(&self, path: &str) -> Reply {
        self.send(self.client.get(format!("{}{path}", self.base))).await
    }

    pub async fn delete(&self, path: &str) -> Reply {
        self.send(self.client.delete(format!("{}{path}", self.base))).await
    }

    pub async fn post(&self, path: &str, body: &Json) -> Reply {
        self.send(self.client.post(format!("{}{path}", self.base)).json(body)).await
    }

    pub async fn put(&self, path: &str, body: &Json) -> Reply {
        self.send(self.client.put(format!("{}{path}", self.base)).json(body)).await
    }

    pub async fn post_raw(&self, path: &str, body: impl Into<reqwest::Body>) -> Reply {
        self.send(self.client.post(format!("{}{path}", self.base)).body(body)).await
    }

    pub async fn put_raw(&self, path: &str, body: impl Into<reqwest::Body>) -> Reply {
        self.send(self.client.put(format!("{}{path}", self.base)).body(body)).await
    }
}

pub fn encode(segment: &str) -> String {
    url::form_urlencoded::byte_serialize(segment.as_bytes()).collect()
}

/// Long-polls the instance until it reports InstanceEnded or `limit` passes.
pub async fn wait_ended(http: &Http, instance: &str, limit: Duration) -> Json {
    let deadline = tokio::time::Instant::now() + limit;
    loop {
        let view = http.get(&format!("/instances/{instance}")).await.body;
        let status = view["status"].as_str().unwrap_or("").to_owned();
        if matches!(status.as_str(), "Completed" | "Faulted" | "Cancelled") {
            return view;
        }
        assert!(tokio::time::Instant::now() < deadline, "instance {instance} still {status}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Polls until the instance offers a work item for `task`.
pub async fn wait_work_item(http: &Http, instance: &str, task: &str) {
    for _ in 0..250 {
        let view = http.get(&format!("/instances/{instance}")).await.body;
        if view["workItems"].as_array().into_iter().flatten().any(|w| w["taskId"] == task) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("{task} never opened on {instance}");
}
