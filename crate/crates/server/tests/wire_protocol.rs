mod common;

use std::net::SocketAddr;
use std::time::Duration;

use common::{Http, HttpPlant, LOCALHOST};
use serde_json::json;
use skillflow_core::plant::{SkillEvent, VirtualModule, VirtualModuleConfig};
use skillflow_core::state_machine::SkillState;
use skillflow_server::wire::{serve_module, ServeError};

async fn wait_state(http: &Http, skill: &str, want: &str) {
    for _ in 0..250 {
        if http.get(&format!("/skills/{skill}/state")).await.body["state"] == want {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("{skill} never reached {want}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn drill_cycle_over_http() {
    let plant = HttpPlant::start().await;
    let http = Http::new(&plant.served[2].base_url());
    assert_eq!(plant.served[2].module.machine().iri, "urn:festo:machine:drill1");

    let r = http.put("/skills/drill/parameters", &json!({"noOfHoles": 3})).await;
    assert_eq!(r.status, 204);
    let state = http.get("/skills/drill/state").await.body;
    assert_eq!(state["state"], "Idle");
    assert_eq!(state["parameters"], json!({"noOfHoles": 3}));

    let r = http.post("/skills/drill/transitions/start", &json!(null)).await;
    assert_eq!(r.status, 202);
    assert_eq!(r.body, json!({"state": "Starting"}));

    // Not Idle any more: parameters are locked and start is illegal.
    assert_eq!(http.put("/skills/drill/parameters", &json!({"noOfHoles": 1})).await.status, 409);
    assert_eq!(http.post("/skills/drill/transitions/start", &json!(null)).await.status, 409);

    wait_state(&http, "drill", "Complete").await;
    let state = http.get("/skills/drill/state").await.body;
    assert_eq!(state["outputs"], json!({"duration": 0.3}));
    assert_eq!(http.post("/skills/drill/transitions/reset", &json!(null)).await.status, 202);
    wait_state(&http, "drill", "Idle").await;

    let events: Vec<SkillEvent> = serde_json::from_value(http.get("/skills/drill/events?since=0").await.body).unwrap();
    let states: Vec<SkillState> = events.iter().map(|e| e.state).collect();
    use SkillState::*;
    assert_eq!(states, [Starting, Execute, Completing, Complete, Resetting, Idle]);
    assert!(events.windows(2).all(|w| w[1].seq == w[0].seq + 1));

    // Nothing new: the long-poll returns empty after its window.
    let last = events.last().unwrap().seq;
    let started = std::time::Instant::now();
    let r = http.get(&format!("/skills/drill/events?since={last}&timeoutMs=150")).await;
    assert_eq!(r.body, json!([]));
    assert!(started.elapsed() >= Duration::from_millis(140));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn long_poll_wakes_on_the_next_event() {
    let plant = HttpPlant::start().await;
    let http = Http::new(&plant.served[2].base_url());
    let poll = tokio::spawn({
        let http = Http::new(&plant.served[2].base_url());
        async move { http.get("/skills/drill/events?since=0&timeoutMs=5000").await }
    });
    tokio::time::sleep(Duration::from_millis(50)).await;
    let started = std::time::Instant::now();
    http.post("/skills/drill/transitions/start", &json!(null)).await;
    let r = poll.await.unwrap();
    assert!(started.elapsed() < Duration::from_secs(2));
    assert_eq!(r.body[0]["state"], "Starting");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_and_unknown_requests() {
    let plant = HttpPlant::start().await;
    let http = Http::new(&plant.served[2].base_url());

    assert_eq!(http.put_raw("/skills/drill/parameters", "{not json").await.status, 400);
    assert_eq!(http.put("/skills/drill/parameters", &json!([1, 2])).await.status, 400);
    assert_eq!(http.put("/skills/drill/parameters", &json!({"bogus": 1})).await.status, 400);
    assert_eq!(http.put("/skills/drill/parameters", &json!({"noOfHoles": "three"})).await.status, 400);
    assert_eq!(http.put("/skills/nope/parameters", &json!({})).await.status, 404);

    assert_eq!(http.post("/skills/drill/transitions/fly", &json!(null)).await.status, 400);
    assert_eq!(http.post("/skills/drill/transitions/reset", &json!(null)).await.status, 409);
    assert_eq!(http.post("/skills/drill/transitions/clear", &json!(null)).await.status, 409);
    assert_eq!(http.post("/skills/nope/transitions/start", &json!(null)).await.status, 404);
    assert_eq!(http.get("/skills/nope/state").await.status, 404);
    assert_eq!(http.get("/skills/nope/events").await.status, 404);

    assert_eq!(http.post("/skills/drill/inject", &json!({"mode": "melt", "phase": "execute"})).await.status, 400);
    assert_eq!(http.post_raw("/skills/drill/inject", "").await.status, 400);
    assert_eq!(http.post("/skills/nope/inject", &json!({"mode": "stop", "phase": "execute"})).await.status, 404);

    // None of that touched the skill.
    let state = http.get("/skills/drill/state").await.body;
    assert_eq!(state["state"], "Idle");
    assert_eq!(state["seq"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn injected_abort_then_clear_and_reset() {
    let plant = HttpPlant::start().await;
    let http = Http::new(&plant.served[2].base_url());
    let r = http.post("/skills/drill/inject", &json!({"mode": "abort", "phase": "duringExecute"})).await;
    assert_eq!(r.status, 204);
    http.post("/skills/drill/transitions/start", &json!(null)).await;
    wait_state(&http, "drill", "Aborted").await;
    assert_eq!(http.post("/skills/drill/transitions/clear", &json!(null)).await.status, 202);
    wait_state(&http, "drill", "Stopped").await;
    assert_eq!(http.post("/skills/drill/transitions/reset", &json!(null)).await.status, 202);
    wait_state(&http, "drill", "Idle").await;

    let events: Vec<SkillEvent> = serde_json::from_value(http.get("/skills/drill/events").await.body).unwrap();
    let states: Vec<SkillState> = events.iter().map(|e| e.state).collect();
    assert!(skillflow_oracles::state_machine::is_legal_path(&states), "{states:?}");
    assert_eq!(plant.drill1().pending_injection("drill").unwrap(), None);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn occupied_port_is_reported() {
    let blocker = std::net::TcpListener::bind(SocketAddr::new(LOCALHOST, 0)).unwrap();
    let port = blocker.local_addr().unwrap().port();
    let machine = common::drill2_doc();
    let module = VirtualModule::spawn(VirtualModuleConfig {
        machine,
        skills: Default::default(),
    })
    .unwrap();
    match serve_module(module, SocketAddr::new(LOCALHOST, port)).await {
        Err(ServeError::PortUnavailable { port: p, .. }) => assert_eq!(p, port),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("bound an occupied port"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stopped_module_refuses_connections() {
    let plant = HttpPlant::start().await;
    let mut served = plant.served;
    let drill2 = served.pop().unwrap();
    let url = drill2.base_url();
    drill2.stop().await;
    let result = reqwest::Client::new()
        .get(format!("{url}/skills/drill/state"))
        .timeout(Duration::from_secs(2))
        .send()
        .await;
    assert!(result.is_err());
}
