//! Versioned, checksummed JSON container used for bags and model parameters.
//!
//! A container is a JSON object holding `version`, the body's own fields and
//! `checksum`: the SHA-256 (hex) of the compact serialization of every other
//! field, keys in sorted order. Files are written to a temporary sibling and
//! renamed into place, so readers never observe a partial file.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

fn checksum(body: &Map<String, Value>) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Serialize `body` (which must be a JSON object) into container text.
pub fn to_container_string<T: Serialize>(body: &T) -> Result<String> {
    let mut map = match serde_json::to_value(body)? {
        Value::Object(m) => m,
        _ => return Err(Error::InvalidArgument("container body must be an object".into())),
    };
    if map.contains_key("version") || map.contains_key("checksum") {
        return Err(Error::InvalidArgument(
            "container body may not define `version` or `checksum`".into(),
        ));
    }
    map.insert("version".into(), Value::from(FORMAT_VERSION));
    let sum = checksum(&map)?;
    map.insert("checksum".into(), Value::String(sum));
    let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
    text.push('\n');
    Ok(text)
}

/// Parse and verify container text; returns the body without `version` and
/// `checksum`.
pub fn from_container_str(text: &str) -> Result<Map<String, Value>> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            Error::Integrity(format!("file is truncated ({e})"))
        } else {
            Error::Integrity(format!("file is corrupt ({e})"))
        }
    })?;
    let Value::Object(mut map) = value else {
        return Err(Error::Integrity("top level is not an object".into()));
    };
    let stored = match map.remove("checksum") {
        Some(Value::String(s)) => s,
        _ => return Err(Error::Integrity("missing checksum".into())),
    };
    let version = map
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Integrity("missing version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let actual = checksum(&map)?;
    if actual != stored {
        return Err(Error::Integrity(format!(
            "checksum mismatch (stored {stored}, computed {actual})"
        )));
    }
    map.remove("version");
    Ok(map)
}

/// Atomically write `body` as a container file.
pub fn write_container<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let text = to_container_string(body)?;
    write_atomic(path, text.as_bytes())
}

pub fn read_container(path: &Path) -> Result<Map<String, Value>> {
    from_container_str(&std::fs::read_to_string(path)?)
}

/// Write to `<path>.tmp` in the same directory, fsync, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
