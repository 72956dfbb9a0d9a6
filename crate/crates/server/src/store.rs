//! Data directory: an append-only record journal, a blob directory for PDF
//! bytes, and an exclusive lock so only one writer ever opens it.
//!
//! Layout:
//!
//! ```text
//! <data_dir>/LOCK
//! <data_dir>/journal.jsonl    one Record per line, fsynced per append
//! <data_dir>/blobs/<sha256>.pdf
//! ```

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use care_core::state::{Journal, Record, State, StateError};

const JOURNAL_FILE: &str = "journal.jsonl";
const LOCK_FILE: &str = "LOCK";
const BLOB_DIR: &str = "blobs";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("data directory {0} is in use by another process")]
    Locked(PathBuf),
    #[error("data directory {path} is not writable: {source}")]
    NotWritable { path: PathBuf, source: io::Error },
    #[error("journal line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("journal record {index} does not apply: {error}")]
    Replay { index: u64, error: StateError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// File-backed [`Journal`]: one JSON record per line, `fsync`ed before
/// `append` returns.
#[derive(Debug)]
pub struct FileJournal {
    file: File,
}

impl Journal for FileJournal {
    type Error = io::Error;

    fn append(&mut self, record: &Record) -> Result<(), io::Error> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

/// Open, locked data directory.
#[derive(Debug)]
pub struct DataDir {
    root: PathBuf,
    _lock: File,
}

impl DataDir {
    /// Locks the directory (creating it if needed) and replays the journal.
    pub fn open(root: impl AsRef<Path>) -> Result<(DataDir, State, FileJournal), StoreError> {
        let root = root.as_ref().to_path_buf();
        let not_writable = |source| StoreError::NotWritable { path: root.clone(), source };
        fs::create_dir_all(root.join(BLOB_DIR)).map_err(not_writable)?;
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(root.join(LOCK_FILE)).map_err(not_writable)?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(StoreError::Locked(root)),
            Err(TryLockError::Error(e)) => return Err(e.into()),
        }

        let path = root.join(JOURNAL_FILE);
        let mut file = OpenOptions::new().create(true).truncate(false).read(true).append(true).open(&path)?;
        let (records, valid_len) = read_journal(&file)?;
        if valid_len < file.metadata()?.len() {
            // torn final write from a crash: drop the partial line
            file.set_len(valid_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let state = State::replay(records).map_err(|(index, error)| StoreError::Replay { index, error })?;
        Ok((DataDir { root, _lock: lock }, state, FileJournal { file }))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.root.join(BLOB_DIR).join(format!("{hash}.pdf"))
    }

    pub fn put_blob(&self, hash: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.blob_path(hash);
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)
    }

    pub fn blob(&self, hash: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.blob_path(hash)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Parses complete lines; returns the records and the byte length they
/// cover. An unterminated last line is treated as a torn write.
fn read_journal(file: &File) -> Result<(Vec<Record>, u64), StoreError> {
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut valid = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if buf.last() != Some(&b'\n') {
            break;
        }
        let record: Record = serde_json::from_slice(&buf[..n - 1])
            .map_err(|e| StoreError::Corrupt { line: line_no, reason: e.to_string() })?;
        records.push(record);
        valid += n as u64;
    }
    Ok((records, valid))
}
