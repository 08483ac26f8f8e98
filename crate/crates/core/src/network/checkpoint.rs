//! Single-file network checkpoints.
//!
//! ```text
//! ESOSEG-CHECKPOINT 1
//! config = {"variant":"DDAUnet",...}
//! params = <count>
//! <name> <trainable|buffer> <d0>x<d1>x...
//! ...
//! end
//! <raw little-endian f32 payload, parameters in header order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::Network;
use super::NetworkConfig;
use crate::error::{Error, Result};

const MAGIC: &str = "ESOSEG-CHECKPOINT 1";

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("config = {}\n", serde_json::to_string(net.config())?));
    let entries = net.params().entries();
    header.push_str(&format!("params = {}\n", entries.len()));
    for e in entries {
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        let kind = if e.buffer { "buffer" } else { "trainable" };
        header.push_str(&format!("{} {kind} {}\n", e.name, dims.join("x")));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for e in entries {
        for v in &e.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so a crash never leaves a half-written best model.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint, rebuilding the network from the echoed config.
pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkConfig) -> Result<Network<f32>> {
    let net = load_checkpoint(path)?;
    if net.config() != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint holds {} ({}), expected {} ({})",
            net.config().variant,
            serde_json::to_string(net.config())?,
            expected.variant,
            serde_json::to_string(expected)?
        )));
    }
    Ok(net)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Compatibility(msg.into())
}

fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("checkpoint header is truncated"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("checkpoint header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not an esoseg checkpoint"));
    }
    let config: NetworkConfig = next_line()?
        .strip_prefix("config = ")
        .ok_or_else(|| bad("missing config line"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| bad(format!("config echo: {e}"))))?;
    let count: usize = next_line()?
        .strip_prefix("params = ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing parameter count"))?;
    let mut declared = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, kind, dims] = fields[..] else {
            return Err(bad(format!("malformed parameter line {line:?}")));
        };
        let buffer = match kind {
            "trainable" => false,
            "buffer" => true,
            _ => return Err(bad(format!("unknown parameter kind {kind:?}"))),
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape {dims:?}")))?;
        declared.push((name.to_string(), buffer, shape));
    }
    if next_line()? != "end" {
        return Err(bad("missing end of header"));
    }

    let mut net = Network::<f32>::build(&config, 0).map_err(|e| bad(format!("config echo: {e}")))?;
    if net.params().len() != declared.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, {} expects {}",
            declared.len(),
            config.variant,
            net.params().len()
        )));
    }
    let payload = &bytes[pos..];
    let expected: usize = declared.iter().map(|(_, _, s)| s.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::Compatibility(format!(
            "payload holds {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(4);
    for (entry, (name, buffer, shape)) in net.params_mut().entries_mut().iter_mut().zip(&declared) {
        if &entry.name != name || entry.buffer != *buffer || &entry.shape != shape {
            return Err(bad(format!(
                "parameter {name} {shape:?} does not match {} {:?}",
                entry.name, entry.shape
            )));
        }
        for (v, c) in entry.data.iter_mut().zip(chunks.by_ref()) {
            *v = f32::from_le_bytes(c.try_into().expect("chunk of 4"));
        }
    }
    Ok(net)
}
