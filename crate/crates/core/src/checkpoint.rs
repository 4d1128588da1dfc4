//! Binary model checkpoint.
//!
//! Layout (all integers little-endian u32, all floats little-endian f64):
//!
//! ```text
//! magic            8 bytes  "VAECPCKP"
//! version          1 byte   currently 1
//! modes            u32      D
//! dims             u32 * D
//! rank             u32      R
//! hidden           u32      K
//! decoder weights  f64 * K * D * R   row-major, one row per hidden unit
//! hidden bias      f64 * K
//! mean head        f64 * K, then f64 bias
//! variance head    f64 * K, then f64 bias
//! posteriors       per mode, per row: f64 * R mean, f64 * R log-precision
//! prior            f64 * R mean, f64 * R log-precision
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::model::{
    variational_state_from_parts, DecoderParams, RowPosterior, VariationalState,
};

const MAGIC: &[u8; 8] = b"VAECPCKP";
const VERSION: u8 = 1;

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| ckpt_err(self.path, "truncated file"))?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| ckpt_err(self.path, "truncated file"))?;
        Ok(f64::from_le_bytes(buf))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Writes decoder and variational parameters to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    theta: &DecoderParams,
    state: &VariationalState,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION])?;
    out.write_all(&(state.modes() as u32).to_le_bytes())?;
    for &n in state.dims() {
        out.write_all(&(n as u32).to_le_bytes())?;
    }
    out.write_all(&(state.rank() as u32).to_le_bytes())?;
    out.write_all(&(theta.hidden() as u32).to_le_bytes())?;
    let write_f64s = |out: &mut BufWriter<File>, values: &[f64]| -> Result<()> {
        for v in values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    write_f64s(&mut out, theta.w().as_slice())?;
    write_f64s(&mut out, theta.b())?;
    write_f64s(&mut out, theta.w_mu())?;
    write_f64s(&mut out, &[theta.b_mu()])?;
    write_f64s(&mut out, theta.w_sigma())?;
    write_f64s(&mut out, &[theta.b_sigma()])?;
    for d in 0..state.modes() {
        for i in 0..state.dims()[d] {
            let row = state.row(d, i);
            write_f64s(&mut out, &row.mean)?;
            write_f64s(&mut out, &row.log_precision)?;
        }
    }
    write_f64s(&mut out, &state.prior_mean)?;
    write_f64s(&mut out, &state.prior_log_precision)?;
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DecoderParams, VariationalState)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut reader = Reader {
        inner: BufReader::new(file),
        path,
    };
    let mut magic = [0u8; 8];
    reader
        .inner
        .read_exact(&mut magic)
        .map_err(|_| ckpt_err(path, "truncated file"))?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "bad magic; not a model checkpoint"));
    }
    let mut version = [0u8; 1];
    reader
        .inner
        .read_exact(&mut version)
        .map_err(|_| ckpt_err(path, "truncated file"))?;
    if version[0] != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {}", version[0])));
    }
    let modes = reader.u32()? as usize;
    if !(2..=64).contains(&modes) {
        return Err(ckpt_err(path, format!("implausible mode count {modes}")));
    }
    let mut dims = Vec::with_capacity(modes);
    for _ in 0..modes {
        dims.push(reader.u32()? as usize);
    }
    let rank = reader.u32()? as usize;
    let hidden = reader.u32()? as usize;
    if rank < 1 || hidden < 1 || dims.contains(&0) {
        return Err(ckpt_err(path, "invalid shape header"));
    }

    let w_data = reader.f64_vec(hidden * modes * rank)?;
    let mut w = Matrix::zeros(hidden, modes * rank);
    w.as_mut_slice().copy_from_slice(&w_data);
    let b = reader.f64_vec(hidden)?;
    let w_mu = reader.f64_vec(hidden)?;
    let b_mu = reader.f64()?;
    let w_sigma = reader.f64_vec(hidden)?;
    let b_sigma = reader.f64()?;
    let theta = DecoderParams::new(w, b, w_mu, b_mu, w_sigma, b_sigma, modes, rank)
        .map_err(|e| ckpt_err(path, e.to_string()))?;

    let mut rows = Vec::with_capacity(modes);
    for &n in &dims {
        let mut mode_rows = Vec::with_capacity(n);
        for _ in 0..n {
            let mean = reader.f64_vec(rank)?;
            let log_precision = reader.f64_vec(rank)?;
            mode_rows.push(RowPosterior {
                mean,
                log_precision,
            });
        }
        rows.push(mode_rows);
    }
    let prior_mean = reader.f64_vec(rank)?;
    let prior_log_precision = reader.f64_vec(rank)?;
    let state =
        variational_state_from_parts(dims, rank, rows, prior_mean, prior_log_precision)
            .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok((theta, state))
}
