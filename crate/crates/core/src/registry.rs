//! One frozen base, many per-user heads, on the filesystem.
//!
//! ```text
//! root/base.pibm
//! root/users/<user>/v<N>.piph
//! root/index.json            cache, rebuilt from a scan on open
//! ```
//!
//! Head files are written to a temporary name and renamed into place, so a
//! crash mid-write never hides or damages an earlier version. The directory
//! scan is the source of truth; `index.json` only mirrors it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::base_lm::BaseLM;
use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::ph_head::{peek_config, PHConfig, PairClassifier, PersonalizationHead};
use crate::task_data::{encode_pair, predict_class, verbalize, Prediction};

pub const BASE_FILE: &str = "base.pibm";
pub const INDEX_FILE: &str = "index.json";
pub const USERS_DIR: &str = "users";
pub const HEAD_EXT: &str = "piph";

/// A filesystem-safe user identifier: `[A-Za-z0-9._-]+`, not `.` or `..`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let charset_ok = id.bytes().all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b));
        if id.is_empty() || !charset_ok || id == "." || id == ".." {
            return Err(Error::InvalidUserId(id));
        }
        Ok(UserId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for UserId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UserId::new(s)
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        UserId::new(s)
    }
}

impl From<UserId> for String {
    fn from(u: UserId) -> String {
        u.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadVersion {
    pub version: u32,
    pub bytes: u64,
    /// From the file header; `None` if the header is unreadable.
    pub config: Option<PHConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub base_checksum: u64,
    pub d_model: usize,
    /// Versions per user, ascending.
    pub users: BTreeMap<String, Vec<HeadVersion>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryStats {
    pub n_users: usize,
    pub n_head_files: usize,
    /// All stored head versions.
    pub total_head_bytes: u64,
    pub base_bytes: u64,
    /// On-disk bytes of every version per user, in user order.
    pub bytes_per_user: Vec<(String, u64)>,
}

pub struct Registry {
    root: PathBuf,
    base: BaseLM,
    index: RwLock<Index>,
    user_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn version_of(file_name: &str) -> Option<u32> {
    let stem = file_name.strip_suffix(HEAD_EXT)?.strip_suffix('.')?;
    let digits = stem.strip_prefix('v')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().filter(|&v| v > 0)
}

impl Registry {
    /// Starts a registry at `root` with `base` as its shared model.
    pub fn create(root: &Path, base: &BaseLM) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::BaseNotFrozen);
        }
        let base_path = root.join(BASE_FILE);
        if base_path.exists() {
            return Err(Error::Config(format!("{} already exists", base_path.display())));
        }
        fs::create_dir_all(root.join(USERS_DIR))?;
        base.save(&base_path)?;
        Self::open(root)
    }

    /// Opens an existing registry and rebuilds its index from disk.
    pub fn open(root: &Path) -> Result<Self> {
        let base_path = root.join(BASE_FILE);
        if !base_path.exists() {
            return Err(Error::NotFound(format!("no base model at {}", base_path.display())));
        }
        let base = BaseLM::load(&base_path)?;
        if !base.is_frozen() {
            return Err(Error::BaseNotFrozen);
        }
        fs::create_dir_all(root.join(USERS_DIR))?;
        let reg = Registry {
            root: root.to_path_buf(),
            base,
            index: RwLock::new(Index::default()),
            user_locks: Mutex::new(HashMap::new()),
        };
        reg.rescan()?;
        Ok(reg)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base(&self) -> &BaseLM {
        &self.base
    }

    pub fn index(&self) -> Index {
        self.index.read().expect("index lock poisoned").clone()
    }

    pub fn users(&self) -> Vec<UserId> {
        self.index
            .read()
            .expect("index lock poisoned")
            .users
            .keys()
            .map(|u| UserId(u.clone()))
            .collect()
    }

    fn user_dir(&self, user: &UserId) -> PathBuf {
        self.root.join(USERS_DIR).join(user.as_str())
    }

    pub fn head_path(&self, user: &UserId, version: u32) -> PathBuf {
        self.user_dir(user).join(format!("v{version}.{HEAD_EXT}"))
    }

    fn scan_user(dir: &Path) -> Result<Vec<HeadVersion>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(version) = name.to_str().and_then(version_of) else {
                continue;
            };
            let bytes = fs::read(entry.path())?;
            out.push(HeadVersion {
                version,
                bytes: bytes.len() as u64,
                config: peek_config(&bytes),
            });
        }
        out.sort_by_key(|v| v.version);
        Ok(out)
    }

    /// Rebuilds the index from the directory tree and rewrites `index.json`.
    pub fn rescan(&self) -> Result<Index> {
        let mut index = Index {
            base_checksum: self.base.checksum(),
            d_model: self.base.config.d_model,
            users: BTreeMap::new(),
        };
        for entry in fs::read_dir(self.root.join(USERS_DIR))? {
            let entry = entry?;
            let Some(name) = entry.file_name().to_str().map(String::from) else {
                continue;
            };
            if !entry.file_type()?.is_dir() || UserId::new(name.as_str()).is_err() {
                continue;
            }
            let versions = Self::scan_user(&entry.path())?;
            if !versions.is_empty() {
                index.users.insert(name, versions);
            }
        }
        let mut guard = self.index.write().expect("index lock poisoned");
        *guard = index.clone();
        write_atomic(&self.root.join(INDEX_FILE), &serde_json::to_vec_pretty(&*guard)?)?;
        Ok(index)
    }

    fn lock_for(&self, user: &UserId) -> Arc<Mutex<()>> {
        let mut locks = self.user_locks.lock().expect("lock table poisoned");
        locks.entry(user.0.clone()).or_default().clone()
    }

    /// Stores `head` as the user's next version and returns that version.
    pub fn put_head(&self, user: &UserId, head: &PersonalizationHead) -> Result<u32> {
        if head.config.d_model != self.base.config.d_model {
            return Err(Error::Config(format!(
                "head d_model {} does not match base d_model {}",
                head.config.d_model, self.base.config.d_model
            )));
        }
        let lock = self.lock_for(user);
        let _guard = lock.lock().expect("user lock poisoned");
        let dir = self.user_dir(user);
        fs::create_dir_all(&dir)?;
        let version = Self::scan_user(&dir)?.last().map_or(1, |v| v.version + 1);
        let bytes = head.to_bytes();
        write_atomic(&self.head_path(user, version), &bytes)?;

        let mut index = self.index.write().expect("index lock poisoned");
        index.users.entry(user.0.clone()).or_default().push(HeadVersion {
            version,
            bytes: bytes.len() as u64,
            config: Some(head.config),
        });
        write_atomic(&self.root.join(INDEX_FILE), &serde_json::to_vec_pretty(&*index)?)?;
        Ok(version)
    }

    /// Latest version when `version` is `None`. The file's CRC is always verified.
    pub fn get_head(&self, user: &UserId, version: Option<u32>) -> Result<PersonalizationHead> {
        let dir = self.user_dir(user);
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("user {user}")));
        }
        let versions = Self::scan_user(&dir)?;
        let v = match version {
            None => versions
                .last()
                .map(|v| v.version)
                .ok_or_else(|| Error::NotFound(format!("user {user} has no heads")))?,
            Some(v) if versions.iter().any(|h| h.version == v) => v,
            Some(v) => return Err(Error::NotFound(format!("user {user} version {v}"))),
        };
        let head = PersonalizationHead::load(&self.head_path(user, v))?;
        if head.config.d_model != self.base.config.d_model {
            return Err(Error::Config(format!(
                "stored head d_model {} does not match base d_model {}",
                head.config.d_model, self.base.config.d_model
            )));
        }
        Ok(head)
    }

    /// Decodes `text` over `classes` with the user's latest head.
    pub fn serve_predict(&self, user: &UserId, text: &str, classes: &[String]) -> Result<Prediction> {
        let head = self.get_head(user, None)?;
        predict_with(&self.base, &head, text, classes)
    }

    pub fn stats(&self) -> Result<RegistryStats> {
        let index = self.rescan()?;
        let bytes_per_user: Vec<(String, u64)> = index
            .users
            .iter()
            .map(|(u, vs)| (u.clone(), vs.iter().map(|v| v.bytes).sum()))
            .collect();
        Ok(RegistryStats {
            n_users: index.users.len(),
            n_head_files: index.users.values().map(Vec::len).sum(),
            total_head_bytes: bytes_per_user.iter().map(|(_, b)| b).sum(),
            base_bytes: fs::metadata(self.root.join(BASE_FILE))?.len(),
            bytes_per_user,
        })
    }
}

/// Encodes every `(class, text)` pair through the frozen base and picks the
/// most confident `True`.
pub fn predict_with<C: PairClassifier>(base: &BaseLM, head: &C, text: &str, classes: &[String]) -> Result<Prediction> {
    predict_class(|c| head.confidence(&encode_pair(base, &verbalize(c), text)?), classes)
}
