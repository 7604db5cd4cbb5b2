use std::fs;
use std::path::Path;

use super::{GateKind, ModelConfig, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DRMC";

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

/// Serializes the configuration and all parameters in declaration order.
pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::with_capacity(25 + 4 * net.params().num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.channels, cfg.experts, cfg.blocks, cfg.router_hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.gate.tag());
    for t in net.params().tensors() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err(0, "missing DRMC magic");
    }
    let u32_at = |off: usize| -> Result<u32> {
        match bytes.get(off..off + 4) {
            Some(b) => Ok(u32::from_le_bytes(b.try_into().expect("4 bytes"))),
            None => format_err(bytes.len(), format!("header truncated, need {} bytes", off + 4)),
        }
    };
    let version = u32_at(4)?;
    if version != CHECKPOINT_VERSION {
        return format_err(4, format!("unsupported checkpoint version {version}"));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i).map(|v| v as usize)).collect::<Result<_>>()?;
    let tag = *bytes
        .get(24)
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: "header truncated before gate tag".into(),
        })?;
    let gate = match GateKind::from_tag(tag) {
        Some(g) => g,
        None => return format_err(24, format!("unknown gate tag {tag}")),
    };
    let config = ModelConfig {
        channels: dims[0],
        experts: dims[1],
        blocks: dims[2],
        router_hidden: dims[3],
        gate,
    };
    let mut net = Network::new(config, 0).map_err(|e| Error::Format {
        offset: 8,
        message: format!("invalid config record: {e}"),
    })?;
    let payload = &bytes[25..];
    let expected = 4 * net.params().num_scalars();
    if payload.len() != expected {
        return format_err(
            25 + payload.len().min(expected),
            format!(
                "parameter payload has {} bytes, expected {expected}",
                payload.len()
            ),
        );
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        for x in net.params_mut().get_mut(id).data_mut() {
            *x = floats.next().expect("length checked");
        }
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    network_from_bytes(&fs::read(path)?)
}
