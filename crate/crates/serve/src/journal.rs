//! Append-only JSON-lines journal, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::session::{Event, Session};

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Corrupt { path: PathBuf, line: usize, msg: String },
}

#[derive(Clone, Debug)]
pub struct Journal {
    dir: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Journal {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, JournalError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn append(&self, id: &str, event: &Event) -> Result<(), JournalError> {
        let path = self.path(id);
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_data().map_err(io(&path))
    }

    pub fn remove(&self, id: &str) -> Result<(), JournalError> {
        let path = self.path(id);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io(&path)(e)),
            _ => Ok(()),
        }
    }

    /// Replays every journal file. A torn final line (a write cut short)
    /// is dropped; any other bad line is an error.
    pub fn load_all(&self) -> Result<Vec<Session>, JournalError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(io(&self.dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        paths.iter().map(|p| replay(p)).collect()
    }
}

fn replay(path: &Path) -> Result<Session, JournalError> {
    let lines: Vec<String> = BufReader::new(File::open(path).map_err(io(path))?)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io(path))?;
    let corrupt = |line: usize, msg: String| JournalError::Corrupt {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut session: Option<Session> = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if i + 1 == lines.len() && session.is_some() => {
                log::warn!("{}: dropping torn final line", path.display());
                break;
            }
            Err(e) => return Err(corrupt(i + 1, e.to_string())),
        };
        match &mut session {
            None => session = Some(Session::from_event(&event).map_err(|e| corrupt(i + 1, e.to_string()))?),
            Some(s) => s.apply(&event).map_err(|e| corrupt(i + 1, e.to_string()))?,
        }
    }
    let session = session.ok_or_else(|| corrupt(0, "empty journal".into()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if stem != session.session_id {
        return Err(corrupt(1, format!("file holds session {}", session.session_id)));
    }
    Ok(session)
}
