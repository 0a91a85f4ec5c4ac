//! Mask review service: lists predicted masks, serves them with their
//! images, and records accept / edit / reject decisions with optimistic
//! locking on a per-item revision.

pub mod api;
pub mod store;

pub use api::{router, serve, ItemBody, ItemSummary, PutBody, PutReply};
pub use store::{Index, ItemData, ReviewItem, ReviewStore, Stage, Status, StoreError, Update, INDEX_FILE};
