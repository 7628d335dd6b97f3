//! File formats: checkpoints, event streams, IDX images, spike encoding.

pub mod checkpoint;
pub mod encode;
pub mod events;
pub mod idx;

use std::path::Path;

use crate::error::Result;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint};
pub use encode::{encode_spikes, Encoding};
pub use events::{gen_toy_events, load_event_dir, load_events, toy_event_dataset, EventRecord, EventStream};
pub use idx::{load_idx, parse_idx, IdxData};

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}
