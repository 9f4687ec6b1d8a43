//! Session persistence: `<dir>/sessions/<id>.meta.json` plus an append-only
//! `<id>.jsonl` with one iteration per line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::session::{Iteration, PlanningSession, SessionMeta};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn open(data_dir: &Path) -> Result<Self> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.meta.json"))
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_id(id) && self.meta_path(id).is_file()
    }

    fn require(&self, id: &str) -> Result<()> {
        if self.exists(id) {
            Ok(())
        } else {
            Err(Error::SessionNotFound(id.to_string()))
        }
    }

    /// Writes a new session with an empty log; fails if the id is taken.
    pub fn create<T: Scalar>(&self, meta: &SessionMeta<T>) -> Result<()> {
        if !valid_id(&meta.id) {
            return Err(Error::InvalidArgument(format!("invalid session id `{}`", meta.id)));
        }
        let mut file = OpenOptions::new().write(true).create_new(true).open(self.meta_path(&meta.id))?;
        file.write_all(serde_json::to_string(meta)?.as_bytes())?;
        file.sync_all()?;
        File::create(self.log_path(&meta.id))?;
        Ok(())
    }

    pub fn write_meta<T: Scalar>(&self, meta: &SessionMeta<T>) -> Result<()> {
        self.require(&meta.id)?;
        let tmp = self.dir.join(format!("{}.meta.json.tmp", meta.id));
        fs::write(&tmp, serde_json::to_string(meta)?)?;
        fs::rename(tmp, self.meta_path(&meta.id))?;
        Ok(())
    }

    pub fn append<T: Scalar>(&self, id: &str, iteration: &Iteration<T>) -> Result<()> {
        self.require(id)?;
        let mut line = serde_json::to_string(iteration)?;
        line.push('\n');
        let mut file = OpenOptions::new().append(true).open(self.log_path(id))?;
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        Ok(())
    }

    pub fn load_meta<T: Scalar>(&self, id: &str) -> Result<SessionMeta<T>> {
        self.require(id)?;
        Ok(serde_json::from_slice(&fs::read(self.meta_path(id))?)?)
    }

    pub fn load_history<T: Scalar>(&self, id: &str) -> Result<Vec<Iteration<T>>> {
        self.require(id)?;
        let reader = BufReader::new(File::open(self.log_path(id))?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn load<T: Scalar>(&self, id: &str) -> Result<PlanningSession<T>> {
        PlanningSession::from_parts(self.load_meta(id)?, self.load_history(id)?)
    }

    /// Raw bytes of the iteration log.
    pub fn log_bytes(&self, id: &str) -> Result<Vec<u8>> {
        self.require(id)?;
        Ok(fs::read(self.log_path(id))?)
    }

    pub fn ids(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".meta.json")).map(str::to_string))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
