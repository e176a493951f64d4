//! Binary ensemble files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 8 bytes   magic "ROPDFENS"
//! u32       format version (1)
//! u64       header length L
//! L bytes   UTF-8 JSON header: case_name, n, correlation, config, n_realizations, times
//! payload   f64 x n_realizations x n_times x 4n, row-major
//!           [realization][time][v_hat(n) | omega(n) | delta(n) | eta(n)]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::case::GridCase;
use crate::error::{Error, Result};
use crate::noise::CorrelationKind;
use crate::sim::{Ensemble, SimConfig};

const MAGIC: &[u8; 8] = b"ROPDFENS";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    case_name: String,
    n: usize,
    correlation: CorrelationKind,
    config: SimConfig,
    n_realizations: usize,
    times: Vec<f64>,
}

pub fn store_ensemble(ens: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        case_name: ens.case_name.clone(),
        n: ens.n,
        correlation: ens.correlation,
        config: ens.config,
        n_realizations: ens.n_realizations(),
        times: ens.times.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Other(e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * ens.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for x in &ens.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], len: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < len {
        return Err(Error::Schema(format!(
            "file truncated while reading {what}"
        )));
    }
    let (head, tail) = bytes.split_at(len);
    *bytes = tail;
    Ok(head)
}

pub fn load_ensemble(path: impl AsRef<Path>) -> Result<Ensemble> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = raw.as_slice();
    if take(&mut bytes, 8, "magic")? != MAGIC {
        return Err(Error::Schema("not an ensemble file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Schema(format!(
            "unsupported ensemble version {version}"
        )));
    }
    let len =
        u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Schema(format!("bad header: {e}")))?;
    let count = header.n_realizations * header.times.len() * 4 * header.n;
    if bytes.len() != 8 * count {
        return Err(Error::Schema(format!(
            "payload has {} bytes, header implies {}",
            bytes.len(),
            8 * count
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Ensemble {
        case_name: header.case_name,
        correlation: header.correlation,
        config: header.config,
        n: header.n,
        times: header.times,
        data,
    })
}

/// Loads an ensemble and checks that it was produced for `case`.
pub fn load_ensemble_for(path: impl AsRef<Path>, case: &GridCase) -> Result<Ensemble> {
    let ens = load_ensemble(path)?;
    if ens.n != case.n {
        return Err(Error::Dimension {
            what: format!("ensemble for {}", ens.case_name),
            expected: case.n,
            got: ens.n,
        });
    }
    Ok(ens)
}
