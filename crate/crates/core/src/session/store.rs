use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Session, SessionError, Stage};

/// A directory of `<id>.json` session files.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub model: String,
    pub stage: Stage,
    pub decisions: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.json"))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.path_of(id).is_file()
    }

    /// Saves a new session; fails if the id is taken.
    pub fn create(&self, session: &Session) -> Result<(), SessionError> {
        super::validate_id(&session.id)?;
        if self.exists(&session.id) {
            return Err(SessionError::AlreadyExists(session.id.clone()));
        }
        self.save(session)
    }

    /// Writes to a temporary file in the same directory, syncs it and renames
    /// it over the session file, so readers see either version whole.
    pub fn save(&self, session: &Session) -> Result<(), SessionError> {
        let path = self.path_of(&session.id);
        let tmp = self.root.join(format!(".{}.json.tmp", session.id));
        let bytes = serde_json::to_vec_pretty(session).map_err(|source| SessionError::Json {
            path: path.display().to_string(),
            source,
        })?;
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&bytes).map_err(io_err(&tmp))?;
            f.write_all(b"\n").map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn load(&self, id: &str) -> Result<Session, SessionError> {
        if super::validate_id(id).is_err() {
            return Err(SessionError::NotFound(id.to_string()));
        }
        let path = self.path_of(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(SessionError::NotFound(id.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|source| SessionError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every session in the store, sorted by id.
    pub fn list(&self) -> Result<Vec<SessionSummary>, SessionError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                if !name.starts_with('.') {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        ids.iter()
            .map(|id| {
                let s = self.load(id)?;
                Ok(SessionSummary {
                    id: s.id,
                    model: s.model,
                    stage: s.stage,
                    decisions: s.decisions.len(),
                })
            })
            .collect()
    }
}
