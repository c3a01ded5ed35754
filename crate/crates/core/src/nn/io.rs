//! `RSMDL1` model files: magic, u32 version, u32 descriptor length, JSON
//! descriptor, then every parameter tensor in declaration order as
//! little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, Sequential};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"RSMDL1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescriptor {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
struct FileDescriptor {
    meta: serde_json::Value,
    networks: Vec<NetworkDescriptor>,
}

pub fn encode_networks(meta: &serde_json::Value, nets: &[(&str, &Sequential<f32>)]) -> Vec<u8> {
    let desc = FileDescriptor {
        meta: meta.clone(),
        networks: nets
            .iter()
            .map(|(name, net)| NetworkDescriptor {
                name: (*name).to_string(),
                input_shape: net.input_shape().to_vec(),
                layers: net.specs().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, net) in nets {
        for t in net.params() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_networks(buf: &[u8]) -> Result<(serde_json::Value, Vec<(String, Sequential<f32>)>)> {
    let need = |end: usize, what: &str| -> Result<()> {
        if buf.len() < end {
            Err(Error::format(buf.len() as u64, format!("truncated {what}")))
        } else {
            Ok(())
        }
    };
    need(14, "header")?;
    if &buf[..6] != MAGIC {
        return Err(Error::format(0, "bad magic, expected RSMDL1"));
    }
    let version = u32::from_le_bytes(buf[6..10].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(6, format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    need(14 + len, "descriptor")?;
    let desc: FileDescriptor =
        serde_json::from_slice(&buf[14..14 + len]).map_err(|e| Error::format(14, format!("bad descriptor: {e}")))?;
    let mut pos = 14 + len;
    let mut nets = Vec::with_capacity(desc.networks.len());
    for nd in desc.networks {
        let mut net = Sequential::<f32>::with_zero_params(&nd.input_shape, nd.layers)
            .map_err(|e| Error::format(14, format!("network {}: {e}", nd.name)))?;
        for t in net.params_mut() {
            let bytes = t.len() * 4;
            need(pos + bytes, &format!("parameters of {}", nd.name))?;
            for (v, c) in t.data_mut().iter_mut().zip(buf[pos..pos + bytes].chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
            pos += bytes;
        }
        nets.push((nd.name, net));
    }
    if pos != buf.len() {
        return Err(Error::format(pos as u64, "trailing bytes after parameters"));
    }
    Ok((desc.meta, nets))
}

pub fn write_networks(
    path: impl AsRef<Path>,
    meta: &serde_json::Value,
    nets: &[(&str, &Sequential<f32>)],
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_networks(meta, nets)).map_err(|e| Error::io(path, e))
}

pub fn read_networks(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, Sequential<f32>)>)> {
    let path = path.as_ref();
    decode_networks(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = Sequential::<f32>::new(
            &[1, 4, 4, 4],
            vec![
                LayerSpec::Conv3d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 16,
                    out_features: 5,
                },
            ],
            3,
        )
        .unwrap();
        let meta = serde_json::json!({"variant": "cae"});
        let bytes = encode_networks(&meta, &[("encoder", &net)]);
        assert_eq!(&bytes[..6], b"RSMDL1");
        let (m, nets) = decode_networks(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(nets[0].0, "encoder");
        assert_eq!(nets[0].1, net);
        assert_eq!(encode_networks(&m, &[("encoder", &nets[0].1)]), bytes);
        assert!(matches!(
            decode_networks(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
