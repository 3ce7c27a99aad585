//! Training prompt pool: paraphrases of the base instruction.

use std::collections::HashSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::normalize_prompt;

/// The instruction used for every validation sample.
pub const BASE_PROMPT: &str = "colorize the image";

/// Environment variable naming the paraphrase service endpoint.
pub const ENDPOINT_ENV: &str = "COLORIZE_PROMPT_ENDPOINT";
/// Environment variable holding the bearer token for the endpoint.
pub const TOKEN_ENV: &str = "COLORIZE_PROMPT_TOKEN";

const BUNDLED: [&str; 30] = [
    "add color to the image",
    "make this black and white photo colorful",
    "restore the colors of this picture",
    "give this photo realistic colors",
    "turn this grayscale image into a color image",
    "bring color back to this photograph",
    "apply natural colors to the picture",
    "colorize this black and white photograph",
    "fill the image with lifelike colors",
    "convert the monochrome image to full color",
    "paint this photo in realistic colors",
    "render this grayscale picture in color",
    "transform the black and white image into color",
    "recolor the photo with natural tones",
    "add realistic skin tones and colors to the image",
    "make the picture vivid with natural colors",
    "breathe color into this old photo",
    "change this monochrome photo into a colored one",
    "produce a colored version of this image",
    "tint the grayscale photo with true-to-life colors",
    "put color into this black and white portrait",
    "give the monochrome picture its original colors",
    "create a full color rendition of the photo",
    "add lifelike hues to this image",
    "reconstruct the colors of this grayscale photo",
    "enrich this black and white image with color",
    "make the grayscale portrait look naturally colored",
    "apply color to every part of the picture",
    "turn the monochrome portrait into a vibrant color photo",
    "restore natural color to the black and white picture",
];

/// The 30 paraphrases shipped with the crate.
pub fn bundled_prompts() -> &'static [&'static str] {
    &BUNDLED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub base_prompt: String,
    pub train_prompts: Vec<String>,
}

impl PromptPool {
    pub fn new(base_prompt: impl Into<String>, train_prompts: Vec<String>) -> Result<Self> {
        let pool = Self {
            base_prompt: base_prompt.into(),
            train_prompts,
        };
        pool.validate()?;
        Ok(pool)
    }

    /// Checks that training prompts are non-empty, distinct and never the base.
    pub fn validate(&self) -> Result<()> {
        let base = normalize_prompt(&self.base_prompt);
        if base.is_empty() {
            return Err(Error::InvalidArgument("base prompt is empty".into()));
        }
        if self.train_prompts.is_empty() {
            return Err(Error::InvalidArgument("prompt pool is empty".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.train_prompts {
            let norm = normalize_prompt(p);
            if norm.is_empty() {
                return Err(Error::InvalidArgument("empty training prompt".into()));
            }
            if norm == base {
                return Err(Error::InvalidArgument(format!("training prompt {p:?} equals the base prompt")));
            }
            if !seen.insert(norm) {
                return Err(Error::InvalidArgument(format!("duplicate training prompt {p:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.train_prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_prompts.is_empty()
    }
}

/// A service that paraphrases an instruction.
pub trait PromptClient {
    fn paraphrase(&self, base: &str, n: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptClientConfig {
    pub endpoint: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
}

fn default_timeout() -> u64 {
    30
}

fn default_retries() -> usize {
    3
}

impl PromptClientConfig {
    /// Reads the endpoint and token from the environment; `None` when no
    /// endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty())?;
        Some(Self {
            endpoint,
            token: std::env::var(TOKEN_ENV).ok(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
        })
    }
}

/// HTTP client: `POST {"base": ..., "n": ...}` answered by a JSON string array.
#[derive(Debug, Clone)]
pub struct HttpPromptClient {
    config: PromptClientConfig,
}

impl HttpPromptClient {
    pub fn new(config: PromptClientConfig) -> Self {
        Self { config }
    }

    pub fn retries(&self) -> usize {
        self.config.retries
    }
}

#[derive(Serialize)]
struct ParaphraseRequest<'a> {
    base: &'a str,
    n: usize,
}

impl PromptClient for HttpPromptClient {
    fn paraphrase(&self, base: &str, n: usize) -> Result<Vec<String>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.config.timeout_secs)))
            .build()
            .into();
        let body = serde_json::to_string(&ParaphraseRequest { base, n })?;
        let mut req = agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| Error::PromptClient(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::PromptClient(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::PromptClient(format!("bad response: {e}")))
    }
}

/// Builds a pool of `n` training paraphrases of `base`.
///
/// With a client, paraphrases are requested until `n` valid ones (distinct,
/// non-empty, not the base) are collected or `retries` extra requests are
/// spent; any shortfall is topped up from the bundled list. A failing client
/// falls back to the bundled list with a warning. Without a client the first
/// `n` bundled paraphrases are used.
pub fn expand_prompts(base: &str, n: usize, client: Option<(&dyn PromptClient, usize)>) -> Result<PromptPool> {
    if n == 0 {
        return Err(Error::InvalidArgument("prompt count must be at least 1".into()));
    }
    let base_norm = normalize_prompt(base);
    let mut seen: HashSet<String> = HashSet::new();
    let mut prompts: Vec<String> = Vec::new();
    let mut accept = |p: &str, prompts: &mut Vec<String>| {
        let norm = normalize_prompt(p);
        if !norm.is_empty() && norm != base_norm && seen.insert(norm) && prompts.len() < n {
            prompts.push(p.trim().to_string());
        }
    };

    if let Some((client, retries)) = client {
        for attempt in 0..=retries {
            match client.paraphrase(base, n - prompts.len()) {
                Ok(batch) => batch.iter().for_each(|p| accept(p, &mut prompts)),
                Err(e) => {
                    log::warn!("prompt client failed ({e}); falling back to the bundled paraphrases");
                    prompts.clear();
                    break;
                }
            }
            if prompts.len() >= n {
                break;
            }
            log::debug!("prompt client attempt {attempt}: {} of {n} valid", prompts.len());
        }
        if !prompts.is_empty() && prompts.len() < n {
            log::warn!("prompt client returned {} of {n} valid paraphrases; topping up from the bundled list", prompts.len());
        }
    }
    for p in BUNDLED {
        if prompts.len() >= n {
            break;
        }
        accept(p, &mut prompts);
    }
    if prompts.len() < n {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct paraphrases available, {n} requested",
            prompts.len()
        )));
    }
    PromptPool::new(base, prompts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct Scripted(RefCell<Vec<Result<Vec<String>>>>);

    impl PromptClient for Scripted {
        fn paraphrase(&self, _base: &str, _n: usize) -> Result<Vec<String>> {
            self.0.borrow_mut().remove(0)
        }
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn offline_single_prompt() {
        let pool = expand_prompts(BASE_PROMPT, 1, None).unwrap();
        assert_eq!(pool.train_prompts, vec![BUNDLED[0].to_string()]);
        assert_eq!(pool.base_prompt, BASE_PROMPT);
    }

    #[test]
    fn offline_thirty_prompts() {
        let pool = expand_prompts(BASE_PROMPT, 30, None).unwrap();
        assert_eq!(pool.len(), 30);
        pool.validate().unwrap();
        assert!(pool.train_prompts.iter().all(|p| normalize_prompt(p) != BASE_PROMPT));
    }

    #[test]
    fn too_many_offline_is_an_error() {
        assert!(expand_prompts(BASE_PROMPT, 31, None).is_err());
        assert!(expand_prompts(BASE_PROMPT, 0, None).is_err());
    }

    #[test]
    fn client_duplicates_filtered_and_rerequested() {
        let client = Scripted(RefCell::new(vec![
            Ok(strings(&["Tint it", "tint   it", "Colorize the image", ""])),
            Ok(strings(&["paint it", "tint it"])),
        ]));
        let pool = expand_prompts(BASE_PROMPT, 2, Some((&client, 3))).unwrap();
        assert_eq!(pool.train_prompts, strings(&["Tint it", "paint it"]));
    }

    #[test]
    fn client_failure_falls_back() {
        let client = Scripted(RefCell::new(vec![Err(Error::PromptClient("timeout".into()))]));
        let pool = expand_prompts(BASE_PROMPT, 3, Some((&client, 3))).unwrap();
        assert_eq!(pool.train_prompts, strings(&BUNDLED[..3]));
    }

    #[test]
    fn client_shortfall_is_topped_up() {
        let client = Scripted(RefCell::new(vec![Ok(strings(&["tint it"])), Ok(vec![])]));
        let pool = expand_prompts(BASE_PROMPT, 3, Some((&client, 1))).unwrap();
        assert_eq!(pool.train_prompts, strings(&["tint it", BUNDLED[0], BUNDLED[1]]));
    }

    #[test]
    fn pool_validation() {
        assert!(PromptPool::new(BASE_PROMPT, strings(&["a", "A"])).is_err());
        assert!(PromptPool::new(BASE_PROMPT, strings(&["Colorize  The Image"])).is_err());
        assert!(PromptPool::new(BASE_PROMPT, strings(&[" "])).is_err());
        assert!(PromptPool::new(BASE_PROMPT, vec![]).is_err());
        assert!(PromptPool::new(BASE_PROMPT, strings(&["a", "b"])).is_ok());
    }

    #[test]
    fn http_client_against_local_server() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 4096];
            let mut req = Vec::new();
            loop {
                let n = stream.read(&mut buf).unwrap();
                req.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&req);
                if let Some(idx) = text.find("\r\n\r\n") {
                    let len = text
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if req.len() >= idx + 4 + len {
                        break;
                    }
                }
            }
            let body = r#"["tint the photo", "paint it in color"]"#;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            String::from_utf8(req).unwrap()
        });
        let client = HttpPromptClient::new(PromptClientConfig {
            endpoint: format!("http://{addr}/paraphrase"),
            token: Some("secret".into()),
            timeout_secs: 5,
            retries: 0,
        });
        let got = client.paraphrase(BASE_PROMPT, 2).unwrap();
        assert_eq!(got, strings(&["tint the photo", "paint it in color"]));
        let request = server.join().unwrap();
        assert!(request.starts_with("POST /paraphrase"));
        assert!(request.contains("Bearer secret"));
        assert!(request.contains(r#"{"base":"colorize the image","n":2}"#));
    }
}
