//! Cached, rate-limited XYZ tile client.

mod cache;
mod limiter;

pub use cache::{CacheEntry, TileCache};
pub use limiter::RateLimiter;

use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::manifest::now_rfc3339;
use crate::tile::{StitchFrame, TileCoord};

/// Environment variable substituted for `{key}` in URL templates.
pub const KEY_ENV: &str = "ROADWEAVE_TILE_KEY";

const MAX_TILE_BYTES: u64 = 32 << 20;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("invalid url template: {0}")]
    Template(String),
    #[error("url template needs {{key}} but {KEY_ENV} is not set")]
    MissingKey,
    #[error("tile {0} not in cache (offline mode)")]
    Offline(TileCoord),
    #[error("tile {coord}: HTTP {status} after {attempts} attempt(s)")]
    Http {
        coord: TileCoord,
        status: u16,
        attempts: u32,
    },
    #[error("tile {coord}: {message} after {attempts} attempt(s)")]
    Transport {
        coord: TileCoord,
        message: String,
        attempts: u32,
    },
    #[error("tile {coord}: corrupt payload: {message}")]
    Corrupt { coord: TileCoord, message: String },
    #[error("frame {frame}: {} tile(s) missing: {}", missing.len(), join_coords(missing))]
    PartialFrame {
        frame: String,
        missing: Vec<TileCoord>,
        causes: Vec<String>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_coords(c: &[TileCoord]) -> String {
    c.iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// One tile to fetch against a `{z}/{x}/{y}` URL template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRequest {
    pub coord: TileCoord,
    pub url_template: String,
    pub attempt: u32,
}

/// Checks that `{z}`, `{x}` and `{y}` each occur exactly once.
pub fn validate_template(t: &str) -> Result<(), FetchError> {
    for p in ["{z}", "{x}", "{y}"] {
        let n = t.matches(p).count();
        if n != 1 {
            return Err(FetchError::Template(format!(
                "placeholder {p} occurs {n} times"
            )));
        }
    }
    if t.matches("{key}").count() > 1 {
        return Err(FetchError::Template(
            "placeholder {key} occurs more than once".into(),
        ));
    }
    Ok(())
}

impl TileRequest {
    pub fn new(coord: TileCoord, url_template: &str) -> Result<Self, FetchError> {
        validate_template(url_template)?;
        Ok(Self {
            coord,
            url_template: url_template.to_string(),
            attempt: 0,
        })
    }

    /// Concrete URL. Contains the API key when the template asks for one; do not log.
    fn url(&self) -> Result<String, FetchError> {
        let mut u = self
            .url_template
            .replace("{z}", &self.coord.z.to_string())
            .replace("{x}", &self.coord.x.to_string())
            .replace("{y}", &self.coord.y.to_string());
        if u.contains("{key}") {
            let key = std::env::var(KEY_ENV).map_err(|_| FetchError::MissingKey)?;
            u = u.replace("{key}", &key);
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileAsset {
    pub coord: TileCoord,
    pub bytes: Vec<u8>,
    pub content_type: String,
    pub fetched_at: String,
    /// Network attempts spent; 0 for a cache hit.
    pub attempt: u32,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchPolicy {
    /// Requests per second across all workers.
    pub rate: f64,
    pub concurrency: usize,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub offline: bool,
    /// Send conditional requests for cached tiles that carry validators.
    pub revalidate: bool,
    pub tile_px: u32,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            rate: 10.0,
            concurrency: 8,
            timeout: Duration::from_secs(30),
            max_attempts: 5,
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(30),
            offline: false,
            revalidate: false,
            tile_px: crate::tile::DEFAULT_TILE_PX,
        }
    }
}

impl FetchPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.backoff_base
            .saturating_mul(factor)
            .min(self.backoff_max)
    }
}

pub struct Fetcher {
    template: String,
    policy: FetchPolicy,
    cache: TileCache,
    agent: ureq::Agent,
    limiter: RateLimiter,
    network_calls: AtomicU64,
}

enum Outcome {
    Fresh {
        bytes: Vec<u8>,
        content_type: Option<String>,
        etag: Option<String>,
        last_modified: Option<String>,
    },
    NotModified,
}

fn header(resp: &ureq::http::Response<ureq::Body>, name: &str) -> Option<String> {
    resp.headers()
        .get(name)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl Fetcher {
    pub fn new(
        url_template: &str,
        cache_dir: &Path,
        policy: FetchPolicy,
    ) -> Result<Self, FetchError> {
        validate_template(url_template)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(policy.timeout))
            .build()
            .into();
        Ok(Self {
            template: url_template.to_string(),
            limiter: RateLimiter::new(policy.rate),
            cache: TileCache::open(cache_dir)?,
            policy,
            agent,
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn policy(&self) -> &FetchPolicy {
        &self.policy
    }

    pub fn cache(&self) -> &TileCache {
        &self.cache
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn validate(&self, coord: TileCoord, bytes: &[u8]) -> Result<String, FetchError> {
        let corrupt = |message: String| FetchError::Corrupt { coord, message };
        let format = image::guess_format(bytes).map_err(|e| corrupt(e.to_string()))?;
        let img = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| corrupt(e.to_string()))?;
        if img.width() != self.policy.tile_px || img.height() != self.policy.tile_px {
            return Err(corrupt(format!(
                "{}x{} image, expected {}x{}",
                img.width(),
                img.height(),
                self.policy.tile_px,
                self.policy.tile_px
            )));
        }
        Ok(format.to_mime_type().to_string())
    }

    fn request_once(
        &self,
        req: &TileRequest,
        cached: Option<&CacheEntry>,
    ) -> Result<Outcome, (bool, FetchError)> {
        let url = req.url().map_err(|e| (false, e))?;
        self.limiter.acquire();
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let mut builder = self.agent.get(&url);
        if let Some(e) = cached {
            if let Some(tag) = &e.etag {
                builder = builder.header("If-None-Match", tag);
            }
            if let Some(lm) = &e.last_modified {
                builder = builder.header("If-Modified-Since", lm);
            }
        }
        let transport = |message: String| {
            (
                true,
                FetchError::Transport {
                    coord: req.coord,
                    message,
                    attempts: req.attempt,
                },
            )
        };
        let mut resp = builder.call().map_err(|e| transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 304 && cached.is_some() {
            return Ok(Outcome::NotModified);
        }
        if !(200..300).contains(&status) {
            return Err((
                retryable(status),
                FetchError::Http {
                    coord: req.coord,
                    status,
                    attempts: req.attempt,
                },
            ));
        }
        let content_type = header(&resp, "content-type");
        let etag = header(&resp, "etag");
        let last_modified = header(&resp, "last-modified");
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(MAX_TILE_BYTES)
            .read_to_vec()
            .map_err(|e| transport(e.to_string()))?;
        Ok(Outcome::Fresh {
            bytes,
            content_type,
            etag,
            last_modified,
        })
    }

    /// Cache first; otherwise download with retries, validate, and cache atomically.
    pub fn fetch_tile(&self, mut req: TileRequest) -> Result<TileAsset, FetchError> {
        let coord = req.coord;
        let cached = match self.cache.load(coord)? {
            Some((bytes, Some(entry))) => Some((bytes, entry)),
            Some((bytes, None)) => match self.validate(coord, &bytes) {
                Ok(content_type) => {
                    return Ok(TileAsset {
                        coord,
                        bytes,
                        content_type,
                        fetched_at: String::new(),
                        attempt: 0,
                        from_cache: true,
                    })
                }
                Err(_) => None,
            },
            None => None,
        };
        let hit = |bytes: Vec<u8>, entry: &CacheEntry, attempt: u32| TileAsset {
            coord,
            bytes,
            content_type: entry.content_type.clone(),
            fetched_at: entry.fetched_at.clone(),
            attempt,
            from_cache: true,
        };
        let conditional = match cached {
            Some((bytes, entry)) => {
                let has_validators = entry.etag.is_some() || entry.last_modified.is_some();
                if !self.policy.revalidate || !has_validators || self.policy.offline {
                    return Ok(hit(bytes, &entry, 0));
                }
                Some((bytes, entry))
            }
            None => None,
        };
        if self.policy.offline {
            return Err(FetchError::Offline(coord));
        }
        let max = self.policy.max_attempts.max(1);
        loop {
            req.attempt += 1;
            match self.request_once(&req, conditional.as_ref().map(|c| &c.1)) {
                Ok(Outcome::NotModified) => {
                    let (bytes, entry) = conditional.expect("304 only for conditional requests");
                    return Ok(hit(bytes, &entry, req.attempt));
                }
                Ok(Outcome::Fresh {
                    bytes,
                    content_type,
                    etag,
                    last_modified,
                }) => {
                    let sniffed = self.validate(coord, &bytes)?;
                    let content_type = content_type.unwrap_or(sniffed);
                    let fetched_at = now_rfc3339();
                    self.cache.store(
                        coord,
                        &bytes,
                        &content_type,
                        etag,
                        last_modified,
                        &fetched_at,
                    )?;
                    log::debug!("fetched tile {coord} in {} attempt(s)", req.attempt);
                    return Ok(TileAsset {
                        coord,
                        bytes,
                        content_type,
                        fetched_at,
                        attempt: req.attempt,
                        from_cache: false,
                    });
                }
                Err((retry, err)) => {
                    if !retry || req.attempt >= max {
                        return Err(err);
                    }
                    let wait = self.policy.backoff(req.attempt);
                    log::warn!("tile {coord}: {err}; retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    /// All `grid²` tiles of `frame` in row-major order. Requests are issued in
    /// row-major order by up to `concurrency` workers.
    pub fn fetch_frame(&self, frame: &StitchFrame) -> Result<Vec<TileAsset>, FetchError> {
        let coords: Vec<TileCoord> = frame.tiles().collect();
        let slots: Vec<Mutex<Option<Result<TileAsset, FetchError>>>> =
            coords.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.policy.concurrency.clamp(1, coords.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&c) = coords.get(i) else { break };
                    let r =
                        TileRequest::new(c, &self.template).and_then(|req| self.fetch_tile(req));
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        let mut assets = Vec::with_capacity(coords.len());
        let mut missing = Vec::new();
        let mut causes = Vec::new();
        for (c, slot) in coords.iter().zip(slots) {
            match slot.into_inner().unwrap_or_else(|e| e.into_inner()) {
                Some(Ok(a)) => assets.push(a),
                Some(Err(e)) => {
                    missing.push(*c);
                    causes.push(e.to_string());
                }
                None => {
                    missing.push(*c);
                    causes.push("not attempted".into());
                }
            }
        }
        if !missing.is_empty() {
            return Err(FetchError::PartialFrame {
                frame: frame.key(),
                missing,
                causes,
            });
        }
        Ok(assets)
    }
}
