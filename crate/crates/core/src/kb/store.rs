use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::{load, save, KbError, KnowledgeBase};

/// Result of offering a snapshot to the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitOutcome {
    Committed { version: u64 },
    /// The offered snapshot was older than the stored one and was ignored.
    KeptNewer { stored: u64, offered: u64 },
}

/// File-backed knowledge-base store: one writer at a time, readers always see
/// the last committed snapshot.
#[derive(Debug)]
pub struct KbStore {
    path: PathBuf,
    current: RwLock<Arc<KnowledgeBase>>,
    writer: Mutex<()>,
    warnings: Mutex<Vec<String>>,
}

impl KbStore {
    /// Opens the store at `path`, loading it when the file exists.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, KbError> {
        let path = path.into();
        let kb = if path.exists() {
            load(&path)?
        } else {
            KnowledgeBase::empty()
        };
        Ok(KbStore {
            path,
            current: RwLock::new(Arc::new(kb)),
            writer: Mutex::new(()),
            warnings: Mutex::new(Vec::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        Arc::clone(&self.current.read())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().clone()
    }

    /// Persists `kb` unless the store already holds a newer version, in
    /// which case the stored snapshot wins and a warning is recorded.
    pub fn commit(&self, kb: KnowledgeBase) -> Result<CommitOutcome, KbError> {
        let _guard = self.writer.lock();
        let stored = self.current.read().version;
        if kb.version < stored {
            let msg = format!(
                "ignoring knowledge base version {} older than stored version {stored}",
                kb.version
            );
            tracing::warn!("{msg}");
            self.warnings.lock().push(msg);
            return Ok(CommitOutcome::KeptNewer {
                stored,
                offered: kb.version,
            });
        }
        save(&kb, &self.path)?;
        let version = kb.version;
        *self.current.write() = Arc::new(kb.canonicalized());
        Ok(CommitOutcome::Committed { version })
    }

    /// Loads a knowledge-base file and offers it to the store; returns the
    /// snapshot the store holds afterwards.
    pub fn load_snapshot(&self, path: &Path) -> Result<Arc<KnowledgeBase>, KbError> {
        let kb = load(path)?;
        self.commit(kb)?;
        Ok(self.snapshot())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::fixtures::three_concepts;

    #[test]
    fn older_snapshot_loses_and_warns() {
        let dir = tempfile::tempdir().unwrap();
        let store = KbStore::open(dir.path().join("store.jsonl")).unwrap();

        let mut newer = three_concepts();
        newer.version = 5;
        let mut older = three_concepts();
        older.version = 3;
        older.concepts[0].explanation = "stale".into();

        let old_path = dir.path().join("old.jsonl");
        save(&older, &old_path).unwrap();

        assert_eq!(
            store.commit(newer.clone()).unwrap(),
            CommitOutcome::Committed { version: 5 }
        );
        let chosen = store.load_snapshot(&old_path).unwrap();
        assert_eq!(chosen.version, 5);
        assert_eq!(*chosen, newer);
        assert_eq!(store.warnings().len(), 1);

        // reopening reads the committed file
        let reopened = KbStore::open(store.path()).unwrap();
        assert_eq!(reopened.snapshot().version, 5);
    }
}
