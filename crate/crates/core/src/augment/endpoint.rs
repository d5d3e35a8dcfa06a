//! Client for a text-generation endpoint: `POST {prompt, max_tokens,
//! temperature}` answered with `{text}`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{FlapError, Result};

pub const URL_ENV: &str = "FLAP_LLM_URL";
pub const AUTH_ENV: &str = "FLAP_LLM_AUTH";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    /// Sent verbatim as the `Authorization` header.
    pub auth: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub timeout: Duration,
    pub attempts: u32,
    /// Delay before the first retry; doubles after each failure.
    pub backoff: Duration,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            auth: None,
            max_tokens: 128,
            temperature: 0.7,
            timeout: Duration::from_secs(30),
            attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    /// Reads the URL and optional auth header from the environment.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(URL_ENV).map_err(|_| FlapError::Config(format!("{URL_ENV} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.auth = std::env::var(AUTH_ENV).ok();
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    pub attempts: u32,
}

/// First paragraph of `text`, with inner line breaks folded to spaces.
pub fn first_paragraph(text: &str) -> String {
    let trimmed = text.trim();
    let para = trimmed
        .split("\n\n")
        .map(str::trim)
        .find(|p| !p.is_empty())
        .unwrap_or("");
    para.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn attempt(agent: &ureq::Agent, cfg: &EndpointConfig, prompt: &str) -> std::result::Result<String, String> {
    let body = GenerateRequest {
        prompt,
        max_tokens: cfg.max_tokens,
        temperature: cfg.temperature,
    };
    let mut req = agent.post(&cfg.url);
    if let Some(auth) = &cfg.auth {
        req = req.header("Authorization", auth);
    }
    let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
    let parsed: GenerateResponse = resp.body_mut().read_json().map_err(|e| e.to_string())?;
    Ok(parsed.text)
}

/// Sends `prompt`, retrying failed requests with exponential backoff.
/// Whitespace-only output is an error.
pub fn generate_caption(prompt: &str, cfg: &EndpointConfig) -> Result<Generation> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let attempts = cfg.attempts.max(1);
    let mut delay = cfg.backoff;
    let mut last = String::new();
    for n in 1..=attempts {
        match attempt(&agent, cfg, prompt) {
            Ok(text) => {
                let text = first_paragraph(&text);
                if text.is_empty() {
                    return Err(FlapError::Input("endpoint returned an empty generation".into()));
                }
                return Ok(Generation { text, attempts: n });
            }
            Err(e) => {
                log::debug!("generation attempt {n}/{attempts} failed: {e}");
                last = e;
                if n < attempts {
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
    Err(FlapError::Endpoint { attempts, detail: last })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraph_trimming() {
        assert_eq!(
            first_paragraph("  A dog barks.\nLoudly.\n\nSecond para."),
            "A dog barks. Loudly."
        );
        assert_eq!(first_paragraph("\n\n  \n\nLate start"), "Late start");
        assert_eq!(first_paragraph(" \n\t "), "");
    }
}
