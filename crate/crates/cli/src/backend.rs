//! Backend selection for a run: config, cassette flags and the jobs limit.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};

use anyhow::{bail, Context, Result};

use emosim::gateway::{
    connect, BackendConfig, BackendKind, ChatBackend, ChatRequest, ChatResponse, DigestMode, GatewayError,
    RecordingBackend,
};

/// Caps the number of requests in flight across all callers.
pub struct LimitedBackend {
    inner: Arc<dyn ChatBackend>,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl LimitedBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, limit: usize) -> Self {
        LimitedBackend {
            inner,
            slots: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }
}

impl ChatBackend for LimitedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        {
            let mut free = self.slots.lock().expect("slot lock");
            while *free == 0 {
                free = self.freed.wait(free).expect("slot lock");
            }
            *free -= 1;
        }
        let result = self.inner.complete(req);
        *self.slots.lock().expect("slot lock") += 1;
        self.freed.notify_one();
        result
    }

    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackendFlags {
    pub cassette: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub jobs: usize,
}

/// Resolves relative cassette and script paths against `base`.
pub fn resolve_paths(cfg: &BackendConfig, base: &Path) -> BackendConfig {
    let fix = |p: &Option<PathBuf>| p.as_ref().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) });
    let mut out = cfg.clone();
    out.cassette_path = fix(&cfg.cassette_path);
    out.script_path = fix(&cfg.script_path);
    out
}

pub fn build(cfg: &BackendConfig, flags: &BackendFlags) -> Result<Arc<dyn ChatBackend>> {
    let mut cfg = cfg.clone();
    if let Some(c) = &flags.cassette {
        cfg.kind = BackendKind::Replay;
        cfg.cassette_path = Some(c.clone());
        cfg.script_path = None;
    }
    let mut backend = connect(&cfg).context("cannot open backend")?;
    if let Some(path) = &flags.record {
        if path.exists() {
            bail!("cassette {} already exists", path.display());
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        backend = Arc::new(RecordingBackend::new(backend, path, DigestMode::Normalized)?);
    }
    if flags.jobs > 1 {
        backend = Arc::new(LimitedBackend::new(backend, flags.jobs));
    }
    Ok(backend)
}

#[cfg(test)]
mod tests {
    use super::*;
    use emosim::gateway::{ChatMessage, MockBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn limit_bounds_concurrency() {
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (a, p) = (active.clone(), peak.clone());
        let mock = MockBackend::with_responder(move |_| {
            let now = a.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            a.fetch_sub(1, Ordering::SeqCst);
            Some("ok".into())
        });
        let limited = LimitedBackend::new(Arc::new(mock), 2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let req = ChatRequest::new("m", "t", vec![ChatMessage::user("hi")]);
                    limited.complete(&req).unwrap();
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert!(peak.load(Ordering::SeqCst) >= 1);
    }

    #[test]
    fn record_refuses_existing_cassette() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        let flags = BackendFlags {
            record: Some(path),
            ..Default::default()
        };
        assert!(build(&BackendConfig::mock("m"), &flags).is_err());
    }
}
