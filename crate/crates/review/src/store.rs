//! Directory-backed review store.
//!
//! Layout under the root:
//! - `images/{id}.pgm`: working-size radiograph
//! - `masks/{id}.pgm`: predicted mask (revision 0)
//! - `edits/{id}.r{n}.pgm`: reviewer mask written at revision `n`
//! - `review.json`: the index, replaced by rename; this is the commit point
//!
//! Mask files are never overwritten, so an index always points at complete
//! files and a crash before the index rename leaves the previous state.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sgxp_core::dataio::Pgm;

pub const INDEX_FILE: &str = "review.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Accepted,
    Edited,
    Rejected,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Pending, Status::Accepted, Status::Edited, Status::Rejected];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Accepted => "accepted",
            Status::Edited => "edited",
            Status::Rejected => "rejected",
        }
    }

    /// Legal moves: pending to any decision, and edited to edited.
    pub fn can_become(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::Pending, Status::Accepted | Status::Edited | Status::Rejected) | (Status::Edited, Status::Edited)
        )
    }
}

impl FromStr for Status {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        Status::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| StoreError::BadStatus(s.to_string()))
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One index row. Paths are relative to the store root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_id: String,
    pub image: String,
    pub mask: String,
    pub status: Status,
    pub revision: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    /// Sorted by `image_id`.
    pub items: Vec<ReviewItem>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("review store at {0} is not initialized")]
    Uninitialized(PathBuf),
    #[error("unknown status {0:?}")]
    BadStatus(String),
    #[error("unknown item {0:?}")]
    NotFound(String),
    #[error("stale revision {given}; current revision is {current}")]
    StaleRevision { given: u64, current: u64 },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: Status, to: Status },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("write interrupted after {0:?}: {1}")]
    Interrupted(Stage, std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Points inside an update at which a fault hook runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// New mask file is in place; the index still points at the old one.
    MaskWritten,
    /// Temporary index is written but not yet renamed.
    IndexStaged,
}

/// Reviewer decision for one item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Update {
    pub status: Status,
    /// PGM bytes of the corrected mask.
    pub mask: Option<Vec<u8>>,
    /// Revision the reviewer based the decision on.
    pub revision: Option<u64>,
}

/// Item with its raster payloads read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemData {
    pub item: ReviewItem,
    pub image_pgm: Vec<u8>,
    pub mask_pgm: Vec<u8>,
}

pub struct ReviewStore {
    root: PathBuf,
    writer: Mutex<()>,
}

impl ReviewStore {
    pub fn open(root: impl Into<PathBuf>) -> Self {
        ReviewStore {
            root: root.into(),
            writer: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_rel(id: &str) -> String {
        format!("images/{id}.pgm")
    }

    pub fn mask_rel(id: &str) -> String {
        format!("masks/{id}.pgm")
    }

    /// Writes a fresh index with every id pending at revision 0. Expects
    /// `images/{id}.pgm` and `masks/{id}.pgm` to exist already.
    pub fn initialize(root: &Path, ids: &[String]) -> Result<ReviewStore> {
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            check_id(id)?;
            let item = ReviewItem {
                image_id: id.clone(),
                image: Self::image_rel(id),
                mask: Self::mask_rel(id),
                status: Status::Pending,
                revision: 0,
            };
            for rel in [&item.image, &item.mask] {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(StoreError::Corrupt(format!("missing {}", p.display())));
                }
            }
            items.push(item);
        }
        items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if items.windows(2).any(|w| w[0].image_id == w[1].image_id) {
            return Err(StoreError::Corrupt("duplicate image ids".into()));
        }
        let store = ReviewStore::open(root);
        store.write_index(&Index { items }, &mut |_| Ok(()))?;
        Ok(store)
    }

    pub fn is_initialized(&self) -> bool {
        self.root.join(INDEX_FILE).is_file()
    }

    pub fn index(&self) -> Result<Index> {
        let path = self.root.join(INDEX_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::Uninitialized(self.root.clone()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt(format!("{}: {e}", path.display())))
    }

    /// Items ordered by id, optionally filtered by status.
    pub fn list(&self, status: Option<Status>) -> Result<Vec<ReviewItem>> {
        let mut items = self.index()?.items;
        items.retain(|it| status.is_none_or(|s| it.status == s));
        Ok(items)
    }

    pub fn item(&self, id: &str) -> Result<ReviewItem> {
        self.index()?
            .items
            .into_iter()
            .find(|it| it.image_id == id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<ItemData> {
        let item = self.item(id)?;
        let image_pgm = self.read_rel(&item.image)?;
        let mask_pgm = self.read_rel(&item.mask)?;
        Ok(ItemData {
            item,
            image_pgm,
            mask_pgm,
        })
    }

    /// Items whose mask was corrected by a reviewer.
    pub fn edited(&self) -> Result<Vec<ReviewItem>> {
        self.list(Some(Status::Edited))
    }

    pub fn update(&self, id: &str, update: Update) -> Result<u64> {
        self.update_with(id, update, |_| Ok(()))
    }

    /// `update` with a hook called at each [`Stage`]; an error from the hook
    /// aborts the write at that point, as a crash would.
    pub fn update_with(
        &self,
        id: &str,
        update: Update,
        mut hook: impl FnMut(Stage) -> std::io::Result<()>,
    ) -> Result<u64> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let mut index = self.index()?;
        let pos = index
            .items
            .iter()
            .position(|it| it.image_id == id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))?;
        let current = index.items[pos].clone();
        if let Some(given) = update.revision {
            if given != current.revision {
                return Err(StoreError::StaleRevision {
                    given,
                    current: current.revision,
                });
            }
        }
        if !current.status.can_become(update.status) {
            return Err(StoreError::IllegalTransition {
                from: current.status,
                to: update.status,
            });
        }
        let revision = current.revision + 1;
        let mut next = current.clone();
        next.status = update.status;
        next.revision = revision;
        match (update.status, update.mask) {
            (Status::Edited, None) => return Err(StoreError::InvalidMask("status edited requires a mask".into())),
            (Status::Edited, Some(bytes)) => {
                self.validate_mask(&current, &bytes)?;
                let rel = format!("edits/{id}.r{revision}.pgm");
                self.write_atomic(&rel, &bytes)?;
                hook(Stage::MaskWritten).map_err(|e| StoreError::Interrupted(Stage::MaskWritten, e))?;
                next.mask = rel;
            }
            (s, Some(_)) => return Err(StoreError::InvalidMask(format!("a mask is only accepted with status edited, not {s}"))),
            (_, None) => {}
        }
        index.items[pos] = next;
        self.write_index(&index, &mut hook)?;
        Ok(revision)
    }

    fn validate_mask(&self, item: &ReviewItem, bytes: &[u8]) -> Result<()> {
        let pgm = Pgm::parse(bytes).map_err(|e| StoreError::InvalidMask(e.to_string()))?;
        pgm.to_mask().map_err(|e| StoreError::InvalidMask(e.to_string()))?;
        let image = Pgm::parse(&self.read_rel(&item.image)?)
            .map_err(|e| StoreError::Corrupt(format!("{}: {e}", item.image)))?;
        if (pgm.width, pgm.height) != (image.width, image.height) {
            return Err(StoreError::InvalidMask(format!(
                "mask is {}x{} but the image is {}x{}",
                pgm.width, pgm.height, image.width, image.height
            )));
        }
        Ok(())
    }

    fn read_rel(&self, rel: &str) -> Result<Vec<u8>> {
        let p = self.root.join(rel);
        fs::read(&p).map_err(io_err(&p))
    }

    /// Writes to a temporary sibling, syncs, then renames into place.
    fn write_atomic(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        let dir = path.parent().expect("relative path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = tmp_path(&path);
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    fn write_index(&self, index: &Index, hook: &mut dyn FnMut(Stage) -> std::io::Result<()>) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        let tmp = tmp_path(&path);
        let text = serde_json::to_string_pretty(index).expect("index serializes");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).and_then(|_| f.sync_all()).map_err(io_err(&tmp))?;
        hook(Stage::IndexStaged).map_err(|e| StoreError::Interrupted(Stage::IndexStaged, e))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().expect("file path").to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Ids become file names, so keep them to a safe alphabet.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::Corrupt(format!("image id {id:?} is not a safe file name")))
    }
}
