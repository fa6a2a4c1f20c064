//! IDX container parsing (the MNIST distribution format): big-endian, a
//! four-byte magic (zero, zero, element type, rank), one u32 extent per
//! dimension, then raw data. Files may be gzip-compressed; the gzip magic
//! is sniffed from the first two bytes.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const TYPE_U8: u8 = 0x08;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse { offset: 0, message: format!("gzip: {e}") })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxFile {
    dims: Vec<usize>,
    data: Vec<u8>,
}

fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let err = |offset: usize, message: &str| Error::Parse {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 4 {
        return Err(err(0, "file too short for an IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "bad magic: first two bytes must be zero"));
    }
    if bytes[2] != TYPE_U8 {
        return Err(err(2, "unsupported element type (only unsigned byte, 0x08)"));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || rank > 4 {
        return Err(err(3, "unsupported rank"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(bytes.len(), "truncated dimension table"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 4 + 4 * i;
        let d = u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if d == 0 {
            return Err(err(off, "zero extent"));
        }
        dims.push(d as usize);
    }
    let expected: usize = dims.iter().product();
    let have = bytes.len() - header;
    if have < expected {
        return Err(err(bytes.len(), "truncated data section"));
    }
    if have > expected {
        return Err(err(header + expected, "trailing bytes after data section"));
    }
    Ok(IdxFile { dims, data: bytes[header..].to_vec() })
}

/// Parse an images file (rank 3: n×rows×cols) and a labels file (rank 1)
/// into one split. Pixels are rescaled by 1/255; counts must agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Split> {
    let images = parse_idx(&read_file(images_path)?)?;
    if images.dims.len() != 3 {
        return Err(Error::Parse {
            offset: 3,
            message: format!(
                "images file must be rank 3 (n, rows, cols), got rank {}",
                images.dims.len()
            ),
        });
    }
    let labels = parse_idx(&read_file(labels_path)?)?;
    if labels.dims.len() != 1 {
        return Err(Error::Parse {
            offset: 3,
            message: format!("labels file must be rank 1, got rank {}", labels.dims.len()),
        });
    }
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{n} images but {} labels", labels.dims[0]),
        });
    }
    let data: Vec<f64> = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Split {
        images: Tensor::from_vec([n, 1, rows, cols], data)?,
        labels: labels.data.iter().map(|&b| b as usize).collect(),
    })
}

/// Load the four standard MNIST files from a directory (gzipped or not) and
/// apply the holdout rule: the first 1,000 images of each category in the
/// training set become the validation split.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for candidate in [format!("{stem}"), format!("{stem}.gz")] {
            let p = dir.join(&candidate);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found under {}", stem, dir.display()),
        )))
    };
    let train_full = load_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
    )?;

    let mut seen = vec![0usize; 10];
    let mut val_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (i, &l) in train_full.labels.iter().enumerate() {
        if seen[l] < 1000 {
            val_idx.push(i);
            seen[l] += 1;
        } else {
            train_idx.push(i);
        }
    }
    let (vi, vl) = train_full.batch(&val_idx);
    let (ti, tl) = train_full.batch(&train_idx);
    let ds = Dataset {
        train: Split { images: ti, labels: tl },
        val: Split { images: vi, labels: vl },
        test,
        classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-crafted: 2 images of 2×2 plus 2 labels.
    fn tiny_images() -> Vec<u8> {
        let mut v = vec![0, 0, TYPE_U8, 3];
        v.extend_from_slice(&2u32.to_be_bytes());
        v.extend_from_slice(&2u32.to_be_bytes());
        v.extend_from_slice(&2u32.to_be_bytes());
        v.extend_from_slice(&[0, 51, 102, 153, 204, 255, 10, 20]);
        v
    }

    fn tiny_labels() -> Vec<u8> {
        let mut v = vec![0, 0, TYPE_U8, 1];
        v.extend_from_slice(&2u32.to_be_bytes());
        v.extend_from_slice(&[7, 3]);
        v
    }

    fn write_pair(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        std::fs::create_dir_all(dir).unwrap();
        let ip = dir.join("imgs");
        let lp = dir.join("lbls");
        std::fs::write(&ip, tiny_images()).unwrap();
        std::fs::write(&lp, tiny_labels()).unwrap();
        (ip, lp)
    }

    #[test]
    fn hand_crafted_file_parses_to_exact_tensors() {
        let dir = std::env::temp_dir().join("pushprune_idx_test_ok");
        let (ip, lp) = write_pair(&dir);
        let split = load_idx(&ip, &lp).unwrap();
        assert_eq!(split.images.shape(), &[2, 1, 2, 2]);
        let want: Vec<f64> = [0, 51, 102, 153, 204, 255, 10, 20]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        assert_eq!(split.images.data(), &want[..]);
        assert_eq!(split.labels, vec![7, 3]);
    }

    #[test]
    fn empty_file_is_parse_error_at_offset_zero() {
        let dir = std::env::temp_dir().join("pushprune_idx_test_empty");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("empty");
        std::fs::write(&p, []).unwrap();
        match load_idx(&p, &p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn every_header_byte_mutation_is_rejected() {
        let dir = std::env::temp_dir().join("pushprune_idx_test_mut");
        std::fs::create_dir_all(&dir).unwrap();
        let lp = dir.join("lbls");
        std::fs::write(&lp, tiny_labels()).unwrap();

        let good = tiny_images();
        let header_len = 4 + 4 * 3;
        for pos in 0..header_len {
            for delta in [1u8, 0x80] {
                let mut bad = good.clone();
                bad[pos] = bad[pos].wrapping_add(delta);
                let ip = dir.join(format!("img_{pos}_{delta}"));
                std::fs::write(&ip, &bad).unwrap();
                assert!(
                    load_idx(&ip, &lp).is_err(),
                    "mutation at byte {pos} (+{delta}) was accepted"
                );
            }
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("pushprune_idx_test_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let ip = dir.join("imgs");
        std::fs::write(&ip, tiny_images()).unwrap();
        let mut l = vec![0, 0, TYPE_U8, 1];
        l.extend_from_slice(&3u32.to_be_bytes());
        l.extend_from_slice(&[1, 2, 3]);
        let lp = dir.join("lbls3");
        std::fs::write(&lp, l).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn gzipped_files_are_sniffed_and_parsed() {
        use std::io::Write;
        let dir = std::env::temp_dir().join("pushprune_idx_test_gz");
        std::fs::create_dir_all(&dir).unwrap();
        let gz = |bytes: &[u8], path: &Path| {
            let f = std::fs::File::create(path).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
        };
        let ip = dir.join("imgs.gz");
        let lp = dir.join("lbls.gz");
        gz(&tiny_images(), &ip);
        gz(&tiny_labels(), &lp);
        let split = load_idx(&ip, &lp).unwrap();
        assert_eq!(split.images.shape(), &[2, 1, 2, 2]);
    }

    #[test]
    fn real_mnist_parses_with_published_counts_and_holdout() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        let ds = load_mnist(&dir).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 60_000);
        assert_eq!(ds.val.len(), 10_000); // 1,000 held out per category
        assert_eq!(ds.test.len(), 10_000);
        assert_eq!(ds.train.images.shape()[2..], [28, 28]);
        for c in 0..10 {
            assert_eq!(ds.val.labels.iter().filter(|&&l| l == c).count(), 1000);
        }
    }
}
