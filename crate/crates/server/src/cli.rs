//! Command-line client. Each subcommand maps to one service endpoint, plus
//! `serve` and `plant up` which run the service and a virtual plant.

use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value as Json};
use skillflow_core::plant::{FailureInjection, InjectionMode, InjectionPhase, PlantConfig};
use skillflow_core::registry::{MachineDocument, RegistryDocument};
use skillflow_core::resolution::SelectionPolicy;
use skillflow_core::{Value, Variables};

use crate::app::App;
use crate::config::Config;
use crate::wire::{self, ServedModule};

#[derive(Debug, Parser)]
#[command(name = "skillflow", version, about = "Capability process orchestration")]
pub struct Cli {
    /// Service base URL.
    #[arg(long, env = "SKILLFLOW_URL", default_value = "http://127.0.0.1:7100", global = true)]
    pub url: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service.
    Serve {
        /// TOML config file; SKILLFLOW_* variables override it.
        #[arg(long, short)]
        config: Option<PathBuf>,
    },
    /// Deploy a process XML file.
    Deploy { file: PathBuf },
    /// List deployed processes.
    Processes,
    /// Register, remove or list machines.
    #[command(subcommand)]
    Registry(RegistryCommand),
    /// Resolve a deployed process against the current registry.
    Resolve {
        definition: String,
        #[arg(long, default_value = "interactive")]
        policy: SelectionPolicy,
    },
    /// Pick the skill for a pending task of a resolution session.
    Decide { session: String, task: String, skill: String },
    /// Start an instance from a resolution session with a complete plan.
    Start {
        session: String,
        /// Initial variable, repeatable.
        #[arg(long = "var", value_name = "NAME=VALUE", value_parser = parse_assignment)]
        vars: Vec<(String, Value)>,
    },
    /// Show an instance snapshot.
    Show { instance: String },
    /// Complete user tasks.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Print instance events until the instance ends.
    Watch {
        instance: String,
        #[arg(long, default_value_t = 0)]
        since: u64,
    },
    /// List recorded notifications.
    #[command(subcommand)]
    Notifications(NotificationsCommand),
    /// Run virtual modules and arm failures.
    #[command(subcommand)]
    Plant(PlantCommand),
}

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    /// Register a machine document.
    Add { file: PathBuf },
    /// Unregister a machine by iri.
    Rm { iri: String },
    /// List capabilities and machines.
    Ls,
}

#[derive(Debug, Subcommand)]
pub enum TaskCommand {
    /// Complete an open user task.
    Complete {
        instance: String,
        task: String,
        #[arg(value_name = "FIELD=VALUE", value_parser = parse_assignment)]
        values: Vec<(String, Value)>,
    },
}

#[derive(Debug, Subcommand)]
pub enum NotificationsCommand {
    Ls,
}

#[derive(Debug, Subcommand)]
pub enum PlantCommand {
    /// Spawn and serve the virtual modules of a plant file.
    Up {
        config: PathBuf,
        /// Registry documents providing machine descriptions.
        #[arg(long)]
        registry: Vec<PathBuf>,
        /// Single machine documents.
        #[arg(long)]
        machine: Vec<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
    /// Arm a failure in a served skill.
    Inject {
        /// Skill iri known to the service, or a skill id with --base-url.
        skill: String,
        #[arg(long, value_parser = parse_mode)]
        mode: InjectionMode,
        #[arg(long, value_parser = parse_phase)]
        phase: InjectionPhase,
        /// Keep firing on every run instead of once.
        #[arg(long)]
        repeat: bool,
        /// Module URL; skips the registry lookup.
        #[arg(long)]
        base_url: Option<String>,
    },
}

/// `name=value`; the value is read as a JSON scalar, else as a string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (name, raw) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got {s:?}"))?;
    if name.is_empty() {
        return Err(format!("empty name in {s:?}"));
    }
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((name.to_owned(), value))
}

fn parse_mode(s: &str) -> Result<InjectionMode, String> {
    serde_json::from_value(Json::String(s.to_lowercase())).map_err(|_| format!("mode must be stop or abort, got {s:?}"))
}

fn parse_phase(s: &str) -> Result<InjectionPhase, String> {
    serde_json::from_value(Json::String(s.to_owned()))
        .map_err(|_| format!("phase must be starting, execute or completing, got {s:?}"))
}

/// Thin JSON client for the service.
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Client {
        Client {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> anyhow::Result<Option<Json>> {
        let resp = req.send().await.with_context(|| format!("cannot reach {}", self.base))?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if !status.is_success() {
            let detail = serde_json::from_slice::<Json>(&bytes)
                .ok()
                .and_then(|b| b.get("message").and_then(Json::as_str).map(str::to_owned))
                .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
            bail!("{status}: {detail}");
        }
        if bytes.is_empty() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&bytes)?))
    }

    pub async fn get(&self, path: &str) -> anyhow::Result<Json> {
        Ok(self.send(self.http.get(format!("{}{path}", self.base))).await?.unwrap_or(Json::Null))
    }

    pub async fn post(&self, path: &str, body: &Json) -> anyhow::Result<Json> {
        let req = self.http.post(format!("{}{path}", self.base)).json(body);
        Ok(self.send(req).await?.unwrap_or(Json::Null))
    }

    pub async fn post_bytes(&self, path: &str, body: Vec<u8>) -> anyhow::Result<Json> {
        let req = self
            .http
            .post(format!("{}{path}", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/xml")
            .body(body);
        Ok(self.send(req).await?.unwrap_or(Json::Null))
    }

    pub async fn delete(&self, path: &str) -> anyhow::Result<()> {
        self.send(self.http.delete(format!("{}{path}", self.base))).await.map(|_| ())
    }
}

/// Percent-encodes one path segment.
fn segment(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes())
        .collect::<String>()
        .replace('+', "%20")
}

fn variables(pairs: Vec<(String, Value)>) -> Variables {
    pairs.into_iter().collect()
}

fn pretty(out: &mut dyn Write, value: &Json) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// One line per engine event.
pub fn format_event(event: &Json) -> String {
    let seq = event.get("seq").and_then(Json::as_u64).unwrap_or(0);
    let kind = event.get("kind").and_then(Json::as_str).unwrap_or("?");
    let mut detail: Vec<String> = event
        .as_object()
        .into_iter()
        .flatten()
        .filter(|(k, _)| !matches!(k.as_str(), "seq" | "kind" | "at"))
        .map(|(k, v)| match v {
            Json::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect();
    detail.sort();
    format!("{seq:>4} {kind} {}", detail.join(" "))
}

fn read_machines(registries: &[PathBuf], machines: &[PathBuf]) -> anyhow::Result<Vec<MachineDocument>> {
    let mut out = Vec::new();
    for path in registries {
        let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
        let doc: RegistryDocument = serde_json::from_slice(&bytes).with_context(|| path.display().to_string())?;
        out.extend(doc.machines);
    }
    for path in machines {
        let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
        out.push(serde_json::from_slice(&bytes).with_context(|| path.display().to_string())?);
    }
    Ok(out)
}

/// Spawns the plant described by `config`, taking machine documents from
/// the given files or, when none are given, from the service registry.
pub async fn plant_up(
    client: &Client,
    config: &PathBuf,
    registries: &[PathBuf],
    machine_files: &[PathBuf],
    host: IpAddr,
) -> anyhow::Result<Vec<ServedModule>> {
    let plant: PlantConfig = serde_json::from_slice(&std::fs::read(config).with_context(|| config.display().to_string())?)
        .with_context(|| config.display().to_string())?;
    let machines = if registries.is_empty() && machine_files.is_empty() {
        serde_json::from_value(client.get("/registry/machines").await?)?
    } else {
        read_machines(registries, machine_files)?
    };
    Ok(wire::serve_plant(&plant, &machines, host).await?)
}

async fn inject(
    client: &Client,
    skill: &str,
    injection: FailureInjection,
    base_url: Option<String>,
) -> anyhow::Result<String> {
    let (base, skill_id) = match base_url {
        Some(base) => (base, skill.to_owned()),
        None => {
            let machines: Vec<MachineDocument> = serde_json::from_value(client.get("/registry/machines").await?)?;
            let found = machines
                .iter()
                .flat_map(|m| &m.skills)
                .find(|s| s.iri == skill)
                .ok_or_else(|| anyhow!("skill {skill} is not registered"))?;
            let base = found
                .interface
                .base_url
                .clone()
                .ok_or_else(|| anyhow!("skill {skill} is not served over http"))?;
            (base, found.interface.skill_id.clone())
        }
    };
    let module = Client::new(base);
    module
        .post(&format!("/skills/{}/inject", segment(&skill_id)), &serde_json::to_value(injection)?)
        .await?;
    Ok(skill_id)
}

async fn watch(client: &Client, instance: &str, mut since: u64, out: &mut dyn Write) -> anyhow::Result<()> {
    let path = format!("/instances/{}", segment(instance));
    loop {
        let events = client.get(&format!("{path}/events?since={since}&timeoutMs=20000")).await?;
        let events = events.as_array().cloned().unwrap_or_default();
        for event in &events {
            writeln!(out, "{}", format_event(event))?;
            since = event.get("seq").and_then(Json::as_u64).unwrap_or(since);
            if event.get("kind").and_then(Json::as_str) == Some("InstanceEnded") {
                return Ok(());
            }
        }
        if events.is_empty() {
            let snapshot = client.get(&path).await?;
            let status = snapshot.get("status").and_then(Json::as_str).unwrap_or("");
            let len = snapshot.get("historyLen").and_then(Json::as_u64).unwrap_or(0);
            if matches!(status, "Completed" | "Faulted" | "Cancelled") && len <= since {
                return Ok(());
            }
        }
    }
}

async fn serve(config: Option<PathBuf>, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = Config::from_env(config.as_deref())?;
    let app = Arc::new(App::open(&config)?);
    let host: IpAddr = config.host.parse().with_context(|| format!("bad host {}", config.host))?;
    let addr = SocketAddr::new(host, config.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("port {} unavailable", config.port))?;
    writeln!(out, "skillflow listening on http://{}", listener.local_addr()?)?;
    out.flush()?;
    crate::api::serve(app, listener, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}

pub async fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let client = Client::new(&cli.url);
    match cli.command {
        Command::Serve { config } => serve(config, out).await?,
        Command::Deploy { file } => {
            let xml = std::fs::read(&file).with_context(|| file.display().to_string())?;
            pretty(out, &client.post_bytes("/processes", xml).await?)?;
        }
        Command::Processes => pretty(out, &client.get("/processes").await?)?,
        Command::Registry(RegistryCommand::Add { file }) => {
            let doc: Json = serde_json::from_slice(&std::fs::read(&file).with_context(|| file.display().to_string())?)?;
            pretty(out, &client.post("/registry/machines", &doc).await?)?;
        }
        Command::Registry(RegistryCommand::Rm { iri }) => {
            client.delete(&format!("/registry/machines/{}", segment(&iri))).await?;
            writeln!(out, "removed {iri}")?;
        }
        Command::Registry(RegistryCommand::Ls) => {
            let capabilities = client.get("/registry/capabilities").await?;
            let machines = client.get("/registry/machines").await?;
            pretty(out, &json!({ "capabilities": capabilities, "machines": machines }))?;
        }
        Command::Resolve { definition, policy } => {
            let body = json!({ "policy": policy });
            pretty(out, &client.post(&format!("/processes/{}/resolutions", segment(&definition)), &body).await?)?;
        }
        Command::Decide { session, task, skill } => {
            let body = json!({ "taskId": task, "skill": skill });
            pretty(out, &client.post(&format!("/resolutions/{}/decisions", segment(&session)), &body).await?)?;
        }
        Command::Start { session, vars } => {
            let body = json!({ "sessionId": session, "variables": variables(vars) });
            pretty(out, &client.post("/instances", &body).await?)?;
        }
        Command::Show { instance } => pretty(out, &client.get(&format!("/instances/{}", segment(&instance))).await?)?,
        Command::Task(TaskCommand::Complete { instance, task, values }) => {
            let path = format!("/instances/{}/user-tasks/{}/complete", segment(&instance), segment(&task));
            client.post(&path, &serde_json::to_value(variables(values))?).await?;
            writeln!(out, "completed {task}")?;
        }
        Command::Watch { instance, since } => watch(&client, &instance, since, out).await?,
        Command::Notifications(NotificationsCommand::Ls) => pretty(out, &client.get("/notifications").await?)?,
        Command::Plant(PlantCommand::Up {
            config,
            registry,
            machine,
            host,
        }) => {
            let served = plant_up(&client, &config, &registry, &machine, host).await?;
            for m in &served {
                writeln!(out, "{} at {}", m.module.machine().iri, m.base_url())?;
            }
            out.flush()?;
            let _ = tokio::signal::ctrl_c().await;
            for m in served {
                m.stop().await;
            }
        }
        Command::Plant(PlantCommand::Inject {
            skill,
            mode,
            phase,
            repeat,
            base_url,
        }) => {
            let injection = FailureInjection {
                mode,
                phase,
                one_shot: !repeat,
            };
            let id = inject(&client, &skill, injection, base_url).await?;
            writeln!(out, "armed {mode:?} during {phase:?} on {id}")?;
        }
    }
    Ok(())
}
