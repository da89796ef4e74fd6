use std::path::Path;

use serde_json::{Map, Value};

use super::{BagConfig, BagOfDescriptions, DescriptionEntry};
use crate::container::{from_container_str, to_container_string, write_atomic};
use crate::error::{Error, Result};

/// Write `bag` as a versioned, checksummed container (atomic replace).
pub fn save_bag(path: &Path, bag: &BagOfDescriptions) -> Result<()> {
    write_atomic(path, bag_to_string(bag)?.as_bytes())
}

pub fn load_bag(path: &Path) -> Result<BagOfDescriptions> {
    bag_from_str(&std::fs::read_to_string(path)?)
}

pub fn bag_to_string(bag: &BagOfDescriptions) -> Result<String> {
    to_container_string(bag)
}

/// Parse container text. Entries are decoded one at a time so a bad entry is
/// reported by its index.
pub fn bag_from_str(text: &str) -> Result<BagOfDescriptions> {
    let mut body = from_container_str(text)?;
    let frame_digest = match take(&mut body, "frame_digest")? {
        Value::String(s) => s,
        other => return Err(Error::Integrity(format!("frame_digest is not a string: {other}"))),
    };
    let config: BagConfig = serde_json::from_value(take(&mut body, "config")?)
        .map_err(|e| Error::Integrity(format!("bad config: {e}")))?;
    let Value::Array(raw) = take(&mut body, "entries")? else {
        return Err(Error::Integrity("entries is not an array".into()));
    };
    let entries = raw
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value::<DescriptionEntry>(v).map_err(|e| Error::MalformedEntry {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(key) = body.keys().next() {
        return Err(Error::Integrity(format!("unexpected field `{key}`")));
    }
    Ok(BagOfDescriptions {
        frame_digest,
        config,
        entries,
    })
}

fn take(body: &mut Map<String, Value>, key: &str) -> Result<Value> {
    body.remove(key)
        .ok_or_else(|| Error::Integrity(format!("missing field `{key}`")))
}
