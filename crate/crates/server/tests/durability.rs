//! Failed writes leave neither disk nor memory changed; a reopened store
//! gives back the same service state.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use common::{fixture, options, wait_ended, Http, HttpPlant, Service};
use serde_json::json;
use skillflow_core::engine::InstanceStatus;
use skillflow_core::resolution::SelectionPolicy;
use skillflow_core::{Value, Variables};
use skillflow_server::app::{ApiError, App};
use skillflow_server::storage::{FaultyBackend, FileBackend, Store};

/// Every file under `root` with its bytes. Empty directories hold no state.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().display().to_string(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn order(color: &str, holes: i64) -> Variables {
    Variables::from([
        ("Color".to_owned(), Value::from(color)),
        ("NoOfHoles".to_owned(), Value::Integer(holes)),
    ])
}

struct Rig {
    dir: tempfile::TempDir,
    faults: Arc<FaultyBackend>,
    app: App,
}

impl Rig {
    fn new(plant: &HttpPlant) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let faults = Arc::new(FaultyBackend::new(FileBackend::new(dir.path())));
        let app = App::with_store(Store::new(Arc::clone(&faults)), options(Some(plant.registry.clone()))).unwrap();
        Rig { dir, faults, app }
    }

    /// Runs `op` with the store failing after `allowed` writes and checks
    /// that it fails with a storage error and leaves no trace on disk.
    fn fails_cleanly<T: std::fmt::Debug>(&self, allowed: u64, op: impl FnOnce(&App) -> Result<T, ApiError>) {
        let before = tree(self.dir.path());
        self.faults.fail_after(allowed);
        let result = op(&self.app);
        self.faults.disarm();
        let err = result.expect_err("operation should fail");
        assert_eq!(err.status, 500, "{err}");
        assert_eq!(err.code, "StorageFailed");
        let after = tree(self.dir.path());
        let changed: Vec<&String> = before
            .keys()
            .chain(after.keys())
            .filter(|k| before.get(*k) != after.get(*k))
            .collect();
        assert!(changed.is_empty(), "failed operation changed {changed:?}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_writes_change_nothing() {
    let plant = HttpPlant::start().await;
    let rig = Rig::new(&plant);
    let app = &rig.app;

    // Deploying writes the document, then the index.
    for allowed in [0, 1] {
        rig.fails_cleanly(allowed, |a| a.deploy(fixture("thermometer.bpmn")));
        assert!(app.deployments().is_empty());
    }
    let def = app.deploy(fixture("thermometer.bpmn")).unwrap().definition_id;
    assert_eq!(def, "Process_Thermometer-1", "a failed deploy must not use up a version");

    rig.fails_cleanly(0, |a| a.register_machine(plant.drill2.clone()));
    assert!(app.registry().machine("urn:festo:machine:drill2").is_none());
    app.register_machine(plant.drill2.clone()).unwrap();
    rig.fails_cleanly(0, |a| a.unregister_machine("urn:festo:machine:drill2"));
    assert!(app.registry().machine("urn:festo:machine:drill2").is_some());

    rig.fails_cleanly(0, |a| a.create_resolution(&def, SelectionPolicy::Interactive));
    let session = app.create_resolution(&def, SelectionPolicy::Interactive).unwrap();
    assert_eq!(session.state, "pending");
    let sid = session.session_id;

    rig.fails_cleanly(0, |a| a.submit_decision(&sid, "Task_Drill", "urn:festo:skill:drill1"));
    assert_eq!(app.session(&sid).unwrap().state, "pending");
    app.submit_decision(&sid, "Task_Drill", "urn:festo:skill:drill1").unwrap();

    // Starting writes the instance record, then its event log.
    for allowed in [0, 1] {
        rig.fails_cleanly(allowed, |a| a.start_instance(&sid, Variables::new()));
        assert!(app.instances().is_empty());
        assert!(app.engine().instance_ids().is_empty());
    }
    let id = app.start_instance(&sid, Variables::new()).unwrap().instance_id;
    let waiting = app.snapshot(&id).unwrap();

    // Completing a user task appends events, then the stimulus.
    for allowed in [0, 1] {
        rig.fails_cleanly(allowed, |a| a.complete_user_task(&id, "Activity_6k239cs", order("red", 2)));
        assert_eq!(app.snapshot(&id).unwrap(), waiting);
    }
    rig.fails_cleanly(0, |a| a.cancel_instance(&id));
    assert_eq!(app.snapshot(&id).unwrap(), waiting);

    app.complete_user_task(&id, "Activity_6k239cs", order("red", 2)).unwrap();
    let view = app.engine().wait_until_ended(&id, Duration::from_secs(5)).await.unwrap();
    assert_eq!(view.status, InstanceStatus::Completed);
    assert_eq!(view.variables["drillDuration"], Value::Real(0.2));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn failed_write_surfaces_as_500_over_http() {
    let plant = HttpPlant::start().await;
    let dir = tempfile::tempdir().unwrap();
    let faults = Arc::new(FaultyBackend::new(FileBackend::new(dir.path())));
    let service = Service::start(Store::new(Arc::clone(&faults)), options(Some(plant.registry.clone()))).await;
    let http = Http::new(&service.url);
    faults.fail_after(0);
    let r = http.post_raw("/processes", fixture("minimal.bpmn")).await;
    assert_eq!(r.status, 500);
    assert_eq!(r.body["error"], "StorageFailed");
    faults.disarm();
    assert_eq!(http.get("/processes").await.body, json!([]));
    assert_eq!(http.post_raw("/processes", fixture("minimal.bpmn")).await.status, 201);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reopened_store_restores_everything() {
    let plant = HttpPlant::start().await;
    let dir = tempfile::tempdir().unwrap();

    let service = Service::start(Store::open_dir(dir.path()).unwrap(), options(Some(plant.registry.clone()))).await;
    let http = Http::new(&service.url);
    let def = http.post_raw("/processes", fixture("thermometer.bpmn")).await.body["definitionId"]
        .as_str()
        .unwrap()
        .to_owned();
    http.post("/registry/machines", &serde_json::to_value(&plant.drill2).unwrap()).await;
    let session = http
        .post(&format!("/processes/{def}/resolutions"), &json!({"policy": "firstDeterministic"}))
        .await
        .body["sessionId"]
        .as_str()
        .unwrap()
        .to_owned();
    let pending = http
        .post(&format!("/processes/{def}/resolutions"), &json!({"policy": "interactive"}))
        .await
        .body["sessionId"]
        .as_str()
        .unwrap()
        .to_owned();
    let start = || async { http.post("/instances", &json!({"sessionId": session})).await.body["instanceId"].as_str().unwrap().to_owned() };

    // One normal run, one aborted run with a notification, one cancelled,
    // one left waiting for its user task.
    let done = start().await;
    http.post(&format!("/instances/{done}/user-tasks/Activity_6k239cs/complete"), &json!({"Color": "red", "NoOfHoles": 3})).await;
    wait_ended(&http, &done, Duration::from_secs(5)).await;
    plant.settle_idle().await;

    plant
        .drill1()
        .inject_failure(
            "drill",
            skillflow_core::plant::FailureInjection {
                mode: skillflow_core::plant::InjectionMode::Abort,
                phase: skillflow_core::plant::InjectionPhase::DuringExecute,
                one_shot: true,
            },
        )
        .unwrap();
    let aborted = start().await;
    http.post(&format!("/instances/{aborted}/user-tasks/Activity_6k239cs/complete"), &json!({"Color": "blue", "NoOfHoles": 1})).await;
    wait_ended(&http, &aborted, Duration::from_secs(5)).await;
    plant.settle_idle().await;

    let cancelled = start().await;
    http.post(&format!("/instances/{cancelled}/cancel"), &json!(null)).await;
    let waiting = start().await;

    let ids = [
        ("session", format!("/resolutions/{session}")),
        ("pending", format!("/resolutions/{pending}")),
        ("done", format!("/instances/{done}")),
        ("aborted", format!("/instances/{aborted}")),
        ("cancelled", format!("/instances/{cancelled}")),
        ("waiting", format!("/instances/{waiting}")),
        ("processes", "/processes".to_owned()),
        ("machines", "/registry/machines".to_owned()),
        ("instances", "/instances".to_owned()),
        ("notifications", "/notifications".to_owned()),
    ];
    let snapshot = |http: Http| {
        let ids = ids.clone();
        let xml = format!("/processes/{def}/xml");
        async move {
            let mut out = serde_json::Map::new();
            for (key, path) in ids {
                out.insert(key.to_owned(), http.get(&path).await.body);
            }
            out.insert("xml".to_owned(), json!(String::from_utf8(http.get(&xml).await.raw).unwrap()));
            serde_json::Value::Object(out)
        }
    };
    let before = snapshot(Http::new(&service.url)).await;
    assert_eq!(before["notifications"].as_array().unwrap().len(), 1);
    service.stop().await;

    let service = Service::start(Store::open_dir(dir.path()).unwrap(), options(None)).await;
    let http = Http::new(&service.url);
    let mut after = snapshot(Http::new(&service.url)).await;
    // Listing order is not part of the contract.
    sort_by_id(&mut after["instances"]);
    let mut expected = before.clone();
    sort_by_id(&mut expected["instances"]);
    assert_eq!(after, expected);

    // The waiting instance carries on after the restart.
    let r = http
        .post(&format!("/instances/{waiting}/user-tasks/Activity_6k239cs/complete"), &json!({"Color": "black", "NoOfHoles": 4}))
        .await;
    assert_eq!(r.status, 204);
    let view = wait_ended(&http, &waiting, Duration::from_secs(5)).await;
    assert_eq!(view["status"], "Completed");
    assert_eq!(view["variables"]["drillDuration"], json!(0.4));
    service.stop().await;

    // And its completion survives another restart.
    let app = App::with_store(Store::open_dir(dir.path()).unwrap(), options(None)).unwrap();
    let view = app.snapshot(&waiting).unwrap();
    assert_eq!(view.status, InstanceStatus::Completed);
    assert_eq!(app.notifications().len(), 1);
}

fn sort_by_id(list: &mut serde_json::Value) {
    if let Some(items) = list.as_array_mut() {
        items.sort_by_key(|i| i["instanceId"].as_str().unwrap_or_default().to_owned());
    }
}
