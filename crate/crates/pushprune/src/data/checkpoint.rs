//! Versioned binary checkpoints: magic, format version, the netspec text,
//! length-prefixed little-endian f64 parameter blocks in spec order, and a
//! trailing FNV-1a checksum over everything before it.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{parse_netspec, write_netspec, LayerKind, LayerParams, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PPCK";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn push_block(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct BlockReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlockReader<'a> {
    fn take_block(&mut self) -> Result<Vec<f64>> {
        if self.pos + 8 > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "truncated checkpoint at byte {}",
                self.pos
            )));
        }
        let len = u64::from_le_bytes(self.bytes[self.pos..self.pos + 8].try_into().unwrap()) as usize;
        self.pos += 8;
        let need = len * 8;
        if self.pos + need > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "truncated parameter block at byte {}",
                self.pos
            )));
        }
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let off = self.pos + i * 8;
            out.push(f64::from_le_bytes(self.bytes[off..off + 8].try_into().unwrap()));
        }
        self.pos += need;
        Ok(out)
    }
}

/// Serialize spec text and all parameters (including batchnorm running
/// statistics) in canonical spec order.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    let spec_text = write_netspec(&net.spec);
    body.extend_from_slice(&(spec_text.len() as u64).to_le_bytes());
    body.extend_from_slice(spec_text.as_bytes());

    for layer in net.spec.layers() {
        match net.params(&layer.id) {
            Some(LayerParams::Fc { w, b }) | Some(LayerParams::Conv { w, b }) => {
                push_block(&mut body, w.data());
                push_block(&mut body, b.data());
            }
            Some(LayerParams::BatchNorm { gamma, beta, run_mean, run_var }) => {
                push_block(&mut body, gamma.data());
                push_block(&mut body, beta.data());
                push_block(&mut body, run_mean);
                push_block(&mut body, run_var);
            }
            None => {}
        }
    }
    let checksum = fnv1a(&body);
    body.extend_from_slice(&checksum.to_le_bytes());

    let mut f = std::fs::File::create(path)?;
    f.write_all(&body)?;
    Ok(())
}

/// Load and verify a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 8 + 8 {
        return Err(Error::Integrity("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    if &body[0..4] != MAGIC {
        return Err(Error::Integrity("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let spec_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + spec_len > body.len() {
        return Err(Error::Integrity("truncated spec text".into()));
    }
    let spec_text = std::str::from_utf8(&body[16..16 + spec_len])
        .map_err(|_| Error::Integrity("spec text is not UTF-8".into()))?;
    let spec = parse_netspec(spec_text)?;

    let mut reader = BlockReader { bytes: body, pos: 16 + spec_len };
    let mut params = std::collections::HashMap::new();
    for layer in spec.layers() {
        let p = match &layer.kind {
            LayerKind::Fc { in_dim, out_dim } => Some((vec![*in_dim, *out_dim], vec![*out_dim], false)),
            LayerKind::Decision { in_dim, classes } => {
                Some((vec![*in_dim, *classes], vec![*classes], false))
            }
            LayerKind::Conv { in_ch, out_ch, kh, kw, .. } => {
                Some((vec![*out_ch, *in_ch, *kh, *kw], vec![*out_ch], false))
            }
            LayerKind::BatchNorm { ch } => Some((vec![*ch], vec![*ch], true)),
            _ => None,
        };
        let Some((w_shape, b_shape, is_bn)) = p else { continue };
        let w = reader.take_block()?;
        let b = reader.take_block()?;
        let expect_w: usize = w_shape.iter().product();
        if w.len() != expect_w || b.len() != b_shape[0] {
            return Err(Error::Integrity(format!(
                "parameter block size mismatch at layer {}",
                layer.id
            )));
        }
        if is_bn {
            let run_mean = reader.take_block()?;
            let run_var = reader.take_block()?;
            if run_mean.len() != b_shape[0] || run_var.len() != b_shape[0] {
                return Err(Error::Integrity(format!(
                    "batchnorm statistics size mismatch at layer {}",
                    layer.id
                )));
            }
            params.insert(
                layer.id.clone(),
                LayerParams::BatchNorm {
                    gamma: Tensor::from_vec(w_shape, w)?,
                    beta: Tensor::from_vec(b_shape, b)?,
                    run_mean,
                    run_var,
                },
            );
        } else if matches!(layer.kind, LayerKind::Conv { .. }) {
            params.insert(
                layer.id.clone(),
                LayerParams::Conv {
                    w: Tensor::from_vec(w_shape, w)?,
                    b: Tensor::from_vec(b_shape, b)?,
                },
            );
        } else {
            params.insert(
                layer.id.clone(),
                LayerParams::Fc {
                    w: Tensor::from_vec(w_shape, w)?,
                    b: Tensor::from_vec(b_shape, b)?,
                },
            );
        }
    }
    if reader.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} unread bytes after parameters",
            body.len() - reader.pos
        )));
    }
    Network::from_parts(spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{modular_conv_classifier, BranchWidths, NetworkSpec};

    fn nets_equal(a: &Network, b: &Network) -> bool {
        if a.spec != b.spec {
            return false;
        }
        let mut same = true;
        a.for_each_param(|id, slot, t| {
            b.for_each_param(|id2, slot2, t2| {
                if id == id2 && slot == slot2 && t.data() != t2.data() {
                    same = false;
                }
            });
        });
        same
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let widths = BranchWidths {
            b1x1: 3,
            b3x3_reduce: 2,
            b3x3: 4,
            bdbl_reduce: 2,
            bdbl: 3,
            bpool_proj: 2,
        };
        let spec = modular_conv_classifier((1, 8, 8), 4, &[widths], &[1], 3);
        let net = Network::build(spec, 77).unwrap();
        let path = std::env::temp_dir().join("pushprune_ckpt_roundtrip.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(nets_equal(&net, &loaded));

        // running stats survive too
        let (LayerParams::BatchNorm { run_var: a, .. }, LayerParams::BatchNorm { run_var: b, .. }) =
            (net.params("stem.bn0").unwrap(), loaded.params("stem.bn0").unwrap())
        else {
            panic!("missing bn");
        };
        assert_eq!(a, b);
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let spec = NetworkSpec::fc_classifier(3, &[2], 2);
        let net = Network::build(spec, 5).unwrap();
        let path = std::env::temp_dir().join("pushprune_ckpt_corrupt.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        // flip one byte at a sample of positions including the checksum
        let step = (good.len() / 50).max(1);
        for pos in (0..good.len()).step_by(step) {
            let mut bad = good.clone();
            bad[pos] ^= 0x55;
            let bp = std::env::temp_dir().join("pushprune_ckpt_corrupt_bad.ckpt");
            std::fs::write(&bp, &bad).unwrap();
            assert!(
                load_checkpoint(&bp).is_err(),
                "corruption at byte {pos} went undetected"
            );
        }
    }

    #[test]
    fn version_mismatch_is_integrity_error() {
        let spec = NetworkSpec::fc_classifier(3, &[2], 2);
        let net = Network::build(spec, 5).unwrap();
        let path = std::env::temp_dir().join("pushprune_ckpt_version.ckpt");
        save_checkpoint(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // version byte
        // rebuild the checksum so only the version differs
        let len = bytes.len();
        let checksum = fnv1a(&bytes[..len - 8]);
        bytes[len - 8..].copy_from_slice(&checksum.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
