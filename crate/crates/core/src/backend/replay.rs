use std::fs;
use std::path::{Path, PathBuf};

use super::{Backend, BackendError};
use crate::digest::sha256_hex;
use crate::prompting::PromptBundle;

/// Replay key for a transcription call: the digest of the image bytes.
pub fn image_fixture_key(image: &Path) -> Result<String, BackendError> {
    let bytes = fs::read(image).map_err(|source| BackendError::Io {
        path: image.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Answers from `<dir>/<digest>.txt`. Completions key on the bundle digest,
/// transcriptions on the digest of the image bytes, so any prompt or
/// template change surfaces as a missing fixture.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
    model_id: String,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>, model_id: impl Into<String>) -> Self {
        ReplayBackend {
            dir: dir.into(),
            model_id: model_id.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn fixture_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    fn read(&self, key: &str) -> Result<String, BackendError> {
        let path = self.fixture_path(key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(BackendError::MissingFixture(key.to_string()))
            }
            Err(source) => Err(BackendError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}

impl Backend for ReplayBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn transcribe(&self, image: &Path, _bundle: &PromptBundle) -> Result<String, BackendError> {
        self.read(&image_fixture_key(image)?)
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        self.read(&bundle.digest())
    }
}

/// Wraps a live backend and stores every successful response in a replay
/// directory, producing fixtures a [`ReplayBackend`] can serve later.
pub struct RecordingBackend<B> {
    inner: B,
    store: ReplayBackend,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let store = ReplayBackend::new(dir, inner.model_id().to_string());
        Ok(RecordingBackend { inner, store })
    }

    fn save(&self, key: &str, text: &str) -> Result<(), BackendError> {
        let path = self.store.fixture_path(key);
        fs::write(&path, text).map_err(|source| BackendError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn supports_temperature(&self) -> bool {
        self.inner.supports_temperature()
    }

    fn transcribe(&self, image: &Path, bundle: &PromptBundle) -> Result<String, BackendError> {
        let text = self.inner.transcribe(image, bundle)?;
        self.save(&image_fixture_key(image)?, &text)?;
        Ok(text)
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        let text = self.inner.complete(bundle)?;
        self.save(&bundle.digest(), &text)?;
        Ok(text)
    }
}
