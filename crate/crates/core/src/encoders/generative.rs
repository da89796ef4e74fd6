use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::stub::caption_for;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hashing;
use crate::image::ImagePatch;

/// Scene description request for the first frame.
pub const PROMPT_DESCRIPTION: &str = "Provide a detailed description of the scene, focusing on the visual features, shape, texture, color, and distinguishing characteristics of the object enclosed within the red bounding box. Highlight any unique attributes that set it apart from similar objects.";

/// Task-specific phrases; `{class}` is replaced with the matched class.
pub const PROMPT_TASK: &str = "Create a 10 unique and detailed descriptive phrases or scenarios within a {class}. Each should vividly capture distinctive actions, characteristics, or typical contexts, emphasizing variety and creativity while maintaining relevance to the theme.";

/// High-level concept; `{description}` is replaced with the description.
pub const PROMPT_CONCEPT: &str = "Based on the description {description}, provide a concise class name (in five words or fewer) that best represents its category.";

/// Regeneration of a description that failed validation.
pub const PROMPT_REGENERATE: &str = "Rewrite the following description of the object enclosed within the red bounding box so that it is concise and visually grounded: {description}";

/// Wire request. `image` is a base64 PNG when pixels are sent; `digest` is
/// always present so caching services can key on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub digest: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying (timeouts, rate limits, 5xx).
    Transient(String),
    /// Retrying cannot help (bad request, auth).
    Permanent(String),
}

pub trait Transport: Send + Sync {
    fn send(
        &self,
        request: &GenerativeRequest,
        timeout: Duration,
    ) -> std::result::Result<GenerativeResponse, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Maximum number of attempts per request, including the first.
    pub max_retries: u32,
    /// Maximum number of requests in flight.
    pub concurrency: usize,
    /// First backoff delay; doubled after each failed attempt.
    pub backoff_ms: u64,
    /// Draw the target box into the pixels before sending.
    pub draw_bbox: bool,
    pub send_pixels: bool,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            timeout_ms: 30_000,
            max_retries: 3,
            concurrency: 4,
            backoff_ms: 250,
            draw_bbox: true,
            send_pixels: true,
        }
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an image-to-text generative service with retries and a
/// bound on concurrent requests.
pub struct GenerativeClient {
    cfg: ClientConfig,
    transport: Arc<dyn Transport>,
    permits: Permits,
}

impl std::fmt::Debug for GenerativeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenerativeClient").field("cfg", &self.cfg).finish()
    }
}

impl GenerativeClient {
    pub fn new(cfg: ClientConfig, transport: Arc<dyn Transport>) -> Self {
        let permits = Permits {
            free: Mutex::new(cfg.concurrency.max(1)),
            cv: Condvar::new(),
        };
        Self {
            cfg,
            transport,
            permits,
        }
    }

    /// Offline client backed by [`MockTransport`].
    pub fn mock(cfg: ClientConfig) -> Self {
        Self::new(cfg, Arc::new(MockTransport::default()))
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn build_request(&self, patch: &ImagePatch, prompt: &str) -> Result<GenerativeRequest> {
        let image = match (self.cfg.draw_bbox, patch.bbox()) {
            (true, Some(b)) => patch.with_rectangle(&b, &[1.0, 0.0, 0.0]),
            _ => patch.clone(),
        };
        let payload = if self.cfg.send_pixels {
            Some(base64::engine::general_purpose::STANDARD.encode(image.to_png_bytes()?))
        } else {
            None
        };
        Ok(GenerativeRequest {
            image: payload,
            digest: format!("{:016x}", image.digest()),
            prompt: prompt.to_string(),
            bbox: patch.bbox().map(|b| b.as_array()),
        })
    }

    /// Ask the service about `patch`. Transient failures are retried up to
    /// `max_retries` attempts in total with exponential backoff.
    pub fn generate_description(&self, patch: &ImagePatch, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let request = self.build_request(patch, prompt)?;
        let max = self.cfg.max_retries.max(1);
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let mut delay = self.cfg.backoff_ms;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let outcome = {
                let _permit = self.permits.acquire();
                self.transport.send(&request, timeout)
            };
            match outcome {
                Ok(resp) => return Ok(resp.text),
                Err(TransportError::Permanent(message)) => {
                    return Err(Error::Service { attempts, message })
                }
                Err(TransportError::Transient(message)) => {
                    if attempts >= max {
                        return Err(Error::Service { attempts, message });
                    }
                    log::warn!("generative request attempt {attempts} failed: {message}");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
}

/// Offline stand-in for the generative service.
///
/// Lookup order: a registered override whose needle occurs in the prompt,
/// then `<dir>/<digest>-<prompt-hash>.txt`, then `<dir>/<digest>.txt`, then a
/// template filled with the digest and a coarse caption of the boxed region.
#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    canned_dir: Option<PathBuf>,
    overrides: BTreeMap<String, String>,
}

impl MockTransport {
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            canned_dir: Some(dir.into()),
            overrides: BTreeMap::new(),
        }
    }

    /// Reply with `text` whenever the prompt contains `needle`.
    pub fn with_override(mut self, needle: impl Into<String>, text: impl Into<String>) -> Self {
        self.overrides.insert(needle.into(), text.into());
        self
    }

    pub fn prompt_key(prompt: &str) -> String {
        format!("{:016x}", hashing::fnv1a64(0, prompt.as_bytes()))
    }

    fn caption(request: &GenerativeRequest) -> String {
        let Some(data) = &request.image else {
            return "unseen".to_string();
        };
        let decoded = base64::engine::general_purpose::STANDARD
            .decode(data)
            .ok()
            .and_then(|b| ImagePatch::from_png_bytes(&b).ok());
        let Some(img) = decoded else {
            return "unreadable".to_string();
        };
        let region = request
            .bbox
            .and_then(|[x, y, w, h]| {
                // Stay inside any outline drawn on the box edge.
                let inset = if w > 4.0 && h > 4.0 { 1.0 } else { 0.0 };
                let b = BBox::new(x + inset, y + inset, w - 2.0 * inset, h - 2.0 * inset).ok()?;
                img.crop_box(&b).ok()
            })
            .unwrap_or(img);
        caption_for(&region)
    }

    fn template(request: &GenerativeRequest) -> String {
        let caption = Self::caption(request);
        let prompt = &request.prompt;
        if prompt.contains("descriptive phrases") {
            let class = prompt
                .split("within a ")
                .nth(1)
                .and_then(|rest| rest.split('.').next())
                .unwrap_or("target")
                .trim()
                .to_string();
            (1..=10)
                .map(|i| format!("{i}. {class} {caption} scene {i}"))
                .collect::<Vec<_>>()
                .join("\n")
        } else if prompt.contains("concise class name") {
            format!("{caption} object")
        } else if prompt.starts_with("Rewrite") {
            format!("{caption} target")
        } else {
            format!("a {caption} object, reference {}", request.digest)
        }
    }
}

impl Transport for MockTransport {
    fn send(
        &self,
        request: &GenerativeRequest,
        _timeout: Duration,
    ) -> std::result::Result<GenerativeResponse, TransportError> {
        if let Some((_, text)) = self
            .overrides
            .iter()
            .find(|(needle, _)| request.prompt.contains(needle.as_str()))
        {
            return Ok(GenerativeResponse { text: text.clone() });
        }
        if let Some(dir) = &self.canned_dir {
            let keyed = dir.join(format!(
                "{}-{}.txt",
                request.digest,
                Self::prompt_key(&request.prompt)
            ));
            let plain = dir.join(format!("{}.txt", request.digest));
            for path in [keyed, plain] {
                if let Ok(text) = std::fs::read_to_string(&path) {
                    return Ok(GenerativeResponse {
                        text: text.trim_end().to_string(),
                    });
                }
            }
        }
        Ok(GenerativeResponse {
            text: Self::template(request),
        })
    }
}

/// Test transport that fails a fixed number of times before delegating.
#[derive(Debug)]
pub struct FailingTransport<T> {
    failures: u32,
    seen: AtomicU32,
    inner: T,
}

impl<T> FailingTransport<T> {
    pub fn new(failures: u32, inner: T) -> Self {
        Self {
            failures,
            seen: AtomicU32::new(0),
            inner,
        }
    }

    pub fn calls(&self) -> u32 {
        self.seen.load(Ordering::SeqCst)
    }
}

impl FailingTransport<MockTransport> {
    /// Never succeeds.
    pub fn always() -> Self {
        Self::new(u32::MAX, MockTransport::default())
    }
}

impl<T: Transport> Transport for FailingTransport<T> {
    fn send(
        &self,
        request: &GenerativeRequest,
        timeout: Duration,
    ) -> std::result::Result<GenerativeResponse, TransportError> {
        let n = self.seen.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            Err(TransportError::Transient(format!("injected failure {}", n + 1)))
        } else {
            self.inner.send(request, timeout)
        }
    }
}

/// JSON-over-HTTP transport: POSTs the request and expects `{ "text": .. }`.
#[cfg(feature = "live-client")]
#[derive(Debug, Clone)]
pub struct HttpTransport {
    endpoint: String,
}

#[cfg(feature = "live-client")]
impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
        }
    }
}

#[cfg(feature = "live-client")]
impl Transport for HttpTransport {
    fn send(
        &self,
        request: &GenerativeRequest,
        timeout: Duration,
    ) -> std::result::Result<GenerativeResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(TransportError::Permanent(format!("HTTP {status}")));
        }
        resp.body_mut()
            .read_json::<GenerativeResponse>()
            .map_err(|e| TransportError::Permanent(e.to_string()))
    }
}
