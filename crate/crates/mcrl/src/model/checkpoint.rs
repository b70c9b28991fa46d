//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MCRLCKPT"
//! 8       4     format version (u32)
//! 12      16    d_in, hidden, feat_dim, n_classes (u32 each)
//! 28      8     rng seed (u64)
//! 36      8     epochs completed (u64)
//! 44      ..    parameter blocks w1, b1, w2, b2, wc, bc (f64, row-major)
//! ```
//!
//! The file length is exact: truncated or oversized payloads are rejected, so
//! a load-save round trip reproduces the original bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Mat;

const MAGIC: &[u8; 8] = b"MCRLCKPT";

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 4 * 4 + 8 + 8;

/// A model snapshot plus the training-state fields needed to resume or audit
/// a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Seed the producing run was launched with.
    pub rng_seed: u64,
    /// Number of completed training epochs.
    pub epoch: u64,
}

impl Checkpoint {
    /// Checks that the stored model fits data of width `d_in` labeled with
    /// `n_classes` classes.
    pub fn validate_dims(&self, d_in: usize, n_classes: usize) -> Result<()> {
        let dims = self.params.dims();
        if dims.d_in != d_in || dims.n_classes != n_classes {
            return Err(Error::DimensionMismatch {
                checkpoint: format!("d_in={}, n_classes={}", dims.d_in, dims.n_classes),
                required: format!("d_in={d_in}, n_classes={n_classes}"),
            });
        }
        Ok(())
    }
}

/// Writes `ckpt` to `path`, overwriting any existing file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let dims = ckpt.params.dims();
    let n_params: usize = dims.block_shapes().iter().map(|(r, c)| r * c).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n_params);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [dims.d_in, dims.hidden, dims.feat_dim, dims.n_classes] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    for block in ckpt.params.blocks() {
        for v in block.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads a checkpoint back, verifying magic, version, dimensions, exact file
/// length, and finiteness of every parameter.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let corrupt = |reason: String| Error::CorruptCheckpoint { path: path.to_path_buf(), reason };

    if buf.len() < HEADER_LEN {
        return Err(corrupt(format!("file too short: {} bytes", buf.len())));
    }
    if &buf[0..8] != MAGIC {
        return Err(corrupt("bad magic; not a checkpoint file".to_string()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dim = |i: usize| u32::from_le_bytes(buf[12 + 4 * i..16 + 4 * i].try_into().unwrap());
    let (d_in, hidden, feat_dim, n_classes) =
        (dim(0) as usize, dim(1) as usize, dim(2) as usize, dim(3) as usize);
    let dims = ModelDims::new(d_in, hidden, feat_dim, n_classes)
        .map_err(|e| corrupt(format!("invalid dimensions: {e}")))?;
    let rng_seed = u64::from_le_bytes(buf[28..36].try_into().unwrap());
    let epoch = u64::from_le_bytes(buf[36..44].try_into().unwrap());

    let n_params: usize = dims.block_shapes().iter().map(|(r, c)| r * c).sum();
    let expected_len = HEADER_LEN + 8 * n_params;
    if buf.len() != expected_len {
        return Err(corrupt(format!(
            "payload length {} does not match dimensions (expected {expected_len})",
            buf.len()
        )));
    }

    let mut params = ModelParams::zeros(dims);
    let mut off = HEADER_LEN;
    for block in params.blocks_mut() {
        read_block(block, &buf, &mut off);
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite parameter value".to_string()));
    }
    Ok(Checkpoint { params, rng_seed, epoch })
}

fn read_block(block: &mut Mat, buf: &[u8], off: &mut usize) {
    for v in block.data_mut() {
        *v = f64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap());
        *off += 8;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use std::fs;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(99);
        let dims = ModelDims::new(5, 7, 4, 3).unwrap();
        Checkpoint { params: ModelParams::init(dims, &mut rng), rng_seed: 99, epoch: 17 }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = sample_checkpoint();
        save_checkpoint(&original, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, original);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let original = sample_checkpoint();
        save_checkpoint(&original, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CorruptCheckpoint { .. }) => {}
            other => panic!("expected corrupt-checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn future_version_is_rejected_with_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found: 2, expected: 1, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.params.w2.set(0, 0, f64::NAN);
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/nowhere.ckpt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn dimension_binding_check() {
        let ckpt = sample_checkpoint();
        assert!(ckpt.validate_dims(5, 3).is_ok());
        assert!(matches!(
            ckpt.validate_dims(6, 3),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ckpt.validate_dims(5, 4).is_err());
    }
}
