//! Skill connectors that reach modules over the wire protocol.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use reqwest::{Client, StatusCode};
use skillflow_core::engine::{ConnectorError, InProcessConnector, SkillConnector, SkillStateReport};
use skillflow_core::plant::SkillEvent;
use skillflow_core::registry::{Skill, Transport};
use skillflow_core::state_machine::{SkillState, TransitionCommand};
use skillflow_core::Variables;

/// Talks to `interface.baseUrl` of each skill.
#[derive(Clone)]
pub struct HttpConnector {
    client: Client,
    request_timeout: Duration,
}

impl Default for HttpConnector {
    fn default() -> Self {
        HttpConnector::new(Duration::from_secs(5))
    }
}

impl HttpConnector {
    /// `request_timeout` bounds every call except long-polls, which get
    /// their own window on top.
    pub fn new(request_timeout: Duration) -> HttpConnector {
        HttpConnector {
            client: Client::new(),
            request_timeout,
        }
    }

    fn url(skill: &Skill, tail: &str) -> Result<String, ConnectorError> {
        let base = skill
            .interface
            .base_url
            .as_deref()
            .ok_or_else(|| ConnectorError::Unreachable(format!("skill {} has no base url", skill.iri)))?;
        Ok(format!(
            "{}/skills/{}/{tail}",
            base.trim_end_matches('/'),
            skill.interface.skill_id
        ))
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ConnectorError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let body = resp.text().await.unwrap_or_default();
        Err(match status {
            StatusCode::NOT_FOUND => ConnectorError::Unreachable(format!("{status}: {body}")),
            s if s.is_client_error() => ConnectorError::Rejected(format!("{status}: {body}")),
            _ => ConnectorError::Unreachable(format!("{status}: {body}")),
        })
    }
}

fn transport(e: reqwest::Error) -> ConnectorError {
    ConnectorError::Unreachable(e.to_string())
}

#[derive(serde::Deserialize)]
struct Accepted {
    state: SkillState,
}

#[async_trait]
impl SkillConnector for HttpConnector {
    async fn set_parameters(&self, skill: &Skill, values: &Variables) -> Result<(), ConnectorError> {
        let resp = self
            .client
            .put(Self::url(skill, "parameters")?)
            .timeout(self.request_timeout)
            .json(values)
            .send()
            .await
            .map_err(transport)?;
        Self::check(resp).await.map(|_| ())
    }

    async fn transition(&self, skill: &Skill, command: TransitionCommand) -> Result<SkillState, ConnectorError> {
        let resp = self
            .client
            .post(Self::url(skill, &format!("transitions/{command}"))?)
            .timeout(self.request_timeout)
            .send()
            .await
            .map_err(transport)?;
        let body: Accepted = Self::check(resp).await?.json().await.map_err(transport)?;
        Ok(body.state)
    }

    async fn state(&self, skill: &Skill) -> Result<SkillStateReport, ConnectorError> {
        let resp = self
            .client
            .get(Self::url(skill, "state")?)
            .timeout(self.request_timeout)
            .send()
            .await
            .map_err(transport)?;
        Self::check(resp).await?.json().await.map_err(transport)
    }

    async fn events(&self, skill: &Skill, since: u64, timeout: Duration) -> Result<Vec<SkillEvent>, ConnectorError> {
        let resp = self
            .client
            .get(Self::url(skill, "events")?)
            .query(&[("since", since), ("timeoutMs", timeout.as_millis() as u64)])
            .timeout(timeout + self.request_timeout)
            .send()
            .await
            .map_err(transport)?;
        Self::check(resp).await?.json().await.map_err(transport)
    }
}

/// Picks the connector matching each skill's transport.
pub struct RoutingConnector {
    pub in_process: Arc<InProcessConnector>,
    pub http: HttpConnector,
}

impl RoutingConnector {
    pub fn new(in_process: Arc<InProcessConnector>, http: HttpConnector) -> RoutingConnector {
        RoutingConnector { in_process, http }
    }

    fn pick(&self, skill: &Skill) -> &dyn SkillConnector {
        match skill.interface.transport {
            Transport::InProcess => self.in_process.as_ref(),
            Transport::Http => &self.http,
        }
    }
}

#[async_trait]
impl SkillConnector for RoutingConnector {
    async fn set_parameters(&self, skill: &Skill, values: &Variables) -> Result<(), ConnectorError> {
        self.pick(skill).set_parameters(skill, values).await
    }

    async fn transition(&self, skill: &Skill, command: TransitionCommand) -> Result<SkillState, ConnectorError> {
        self.pick(skill).transition(skill, command).await
    }

    async fn state(&self, skill: &Skill) -> Result<SkillStateReport, ConnectorError> {
        self.pick(skill).state(skill).await
    }

    async fn events(&self, skill: &Skill, since: u64, timeout: Duration) -> Result<Vec<SkillEvent>, ConnectorError> {
        self.pick(skill).events(skill, since, timeout).await
    }
}
