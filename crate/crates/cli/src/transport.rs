//! External ranker over HTTP: POST {"prompt"} and read back {"text"}.

use std::time::Duration;

use serde::Deserialize;

use rlhaif_core::prefs::RankerTransport;
use rlhaif_core::Error;

use crate::error::{CliError, CliResult};

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

impl HttpTransport {
    /// Reads the bearer token from `token_env`; an unset variable sends no
    /// Authorization header.
    pub fn new(endpoint: String, token_env: &str, timeout_secs: u64) -> CliResult<Self> {
        if !endpoint.starts_with("http://") {
            return Err(CliError::Usage(format!("ranker endpoint {endpoint:?} must be a plain http:// URL")));
        }
        let token = std::env::var(token_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!("{token_env} is not set; calling the ranker without a token");
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpTransport { agent, endpoint, token })
    }
}

impl RankerTransport for HttpTransport {
    fn complete(&self, prompt: &str) -> rlhaif_core::Result<String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp =
            req.send_json(serde_json::json!({ "prompt": prompt })).map_err(|e| Error::Ranker(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Ranker(format!("HTTP {status}")));
        }
        let reply: Reply = resp.body_mut().read_json().map_err(|e| Error::Ranker(format!("bad reply body: {e}")))?;
        Ok(reply.text)
    }
}
