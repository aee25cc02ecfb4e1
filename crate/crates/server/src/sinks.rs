//! Notification sinks: a JSON-lines file or a webhook.

use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde_json::json;
use skillflow_core::engine::{NotificationRecord, NotificationSink};
use tokio::io::AsyncWriteExt;
use tokio::sync::Mutex;

use crate::config::NotificationConfig;

pub struct FileSink {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> FileSink {
        FileSink {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }
}

#[async_trait]
impl NotificationSink for FileSink {
    async fn deliver(&self, record: &NotificationRecord) -> Result<(), String> {
        let mut line = serde_json::to_vec(record).map_err(|e| e.to_string())?;
        line.push(b'\n');
        let _g = self.lock.lock().await;
        let mut f = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .await
            .map_err(|e| format!("{}: {e}", self.path.display()))?;
        f.write_all(&line).await.map_err(|e| e.to_string())
    }
}

pub struct WebhookSink {
    url: String,
    client: reqwest::Client,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>) -> WebhookSink {
        WebhookSink {
            url: url.into(),
            client: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl NotificationSink for WebhookSink {
    async fn deliver(&self, record: &NotificationRecord) -> Result<(), String> {
        let resp = self
            .client
            .post(&self.url)
            .timeout(std::time::Duration::from_secs(10))
            .json(&json!({
                "subject": record.subject,
                "body": record.body,
                "instanceId": record.instance_id,
            }))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("webhook answered {}", resp.status()))
        }
    }
}

pub fn from_config(config: &NotificationConfig) -> Option<Arc<dyn NotificationSink>> {
    match config {
        NotificationConfig::None => None,
        NotificationConfig::File { path } => Some(Arc::new(FileSink::new(path.clone()))),
        NotificationConfig::Webhook { url } => Some(Arc::new(WebhookSink::new(url.clone()))),
    }
}
