//! On-disk formats.
//!
//! `HSTS1` files hold a stack of equally shaped matrices: a plain-text header
//! of `key=value` lines closed by one empty line, then the raw payload of
//! little-endian `f64` values, frame after frame, each frame column-major
//! (for observations, one pixel spectrum after another).
//!
//! ```text
//! magic=HSTS1
//! kind=sequence
//! K=10
//! L=129
//! N=2500
//! dtype=f64le
//! layout=frame-major,column-major
//!
//! <K*L*N*8 bytes>
//! ```
//!
//! Endmember files use `kind=endmembers` with `K`, `L`, `P` (frames are L x P);
//! abundance files use `kind=abundances` with `K`, `P`, `N` (frames are P x N).
//! Small matrices travel as CSV with one row per line and 17 significant digits.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, UnmixError};
use crate::model::{AbundanceTrajectory, EndmemberTrajectory, FrameSequence, GroundTruth, Matrix, ReferenceSpectra, ScaleSeries};

pub const MAGIC: &str = "HSTS1";
const DTYPE: &str = "f64le";
const LAYOUT: &str = "frame-major,column-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HstsKind {
    Sequence,
    Endmembers,
    Abundances,
}

impl HstsKind {
    fn name(self) -> &'static str {
        match self {
            Self::Sequence => "sequence",
            Self::Endmembers => "endmembers",
            Self::Abundances => "abundances",
        }
    }

    /// Header keys for the frame rows and columns.
    fn shape_keys(self) -> [&'static str; 2] {
        match self {
            Self::Sequence => ["L", "N"],
            Self::Endmembers => ["L", "P"],
            Self::Abundances => ["P", "N"],
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "sequence" => Some(Self::Sequence),
            "endmembers" => Some(Self::Endmembers),
            "abundances" => Some(Self::Abundances),
            _ => None,
        }
    }
}

/// Serializes a stack of equally shaped frames.
pub fn encode_hsts(kind: HstsKind, frames: &[Matrix]) -> Vec<u8> {
    let (rows, cols) = frames.first().map_or((0, 0), |f| f.shape());
    let [rk, ck] = kind.shape_keys();
    let header = format!(
        "magic={MAGIC}\nkind={}\nK={}\n{rk}={rows}\n{ck}={cols}\ndtype={DTYPE}\nlayout={LAYOUT}\n\n",
        kind.name(),
        frames.len()
    );
    let mut out = Vec::with_capacity(header.len() + frames.len() * rows * cols * 8);
    out.extend_from_slice(header.as_bytes());
    for f in frames {
        for v in f.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, detail: impl Into<String>) -> UnmixError {
    UnmixError::Format { offset: offset as u64, detail: detail.into() }
}

/// Parses an `HSTS1` byte buffer.
pub fn decode_hsts(bytes: &[u8]) -> Result<(HstsKind, Vec<Matrix>)> {
    if !bytes.starts_with(format!("magic={MAGIC}\n").as_bytes()) {
        return Err(format_err(0, format!("missing 'magic={MAGIC}' line")));
    }
    let mut pos = 0;
    let mut fields: Vec<(String, String, usize)> = Vec::new();
    loop {
        let rel = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| format_err(bytes.len(), "header is not terminated by an empty line"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + rel]).map_err(|_| format_err(pos, "header is not UTF-8"))?;
        let line_start = pos;
        pos += rel + 1;
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(line_start, format!("header line '{line}' is not key=value")))?;
        fields.push((k.to_string(), v.to_string(), line_start));
    }
    let header_end = pos;
    let get = |key: &str| -> Result<(&str, usize)> {
        fields
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, at)| (v.as_str(), *at))
            .ok_or_else(|| format_err(header_end, format!("header lacks key '{key}'")))
    };
    let (kind_str, at) = get("kind")?;
    let kind = HstsKind::parse(kind_str).ok_or_else(|| format_err(at, format!("unknown kind '{kind_str}'")))?;
    for (key, want) in [("dtype", DTYPE), ("layout", LAYOUT)] {
        let (v, at) = get(key)?;
        if v != want {
            return Err(format_err(at, format!("{key}={v}, expected {want}")));
        }
    }
    let dim = |key: &str| -> Result<usize> {
        let (v, at) = get(key)?;
        match v.parse::<usize>() {
            Ok(d) if d > 0 => Ok(d),
            _ => Err(format_err(at, format!("{key}={v} is not a positive integer"))),
        }
    };
    let [rk, ck] = kind.shape_keys();
    let (frames, rows, cols) = (dim("K")?, dim(rk)?, dim(ck)?);
    let per_frame = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err(header_end, "frame size overflows"))?;
    let payload_len = frames
        .checked_mul(per_frame)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| format_err(header_end, "payload size overflows"))?;
    let available = bytes.len() - header_end;
    if available < payload_len {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {available} bytes present, {payload_len} expected"),
        ));
    }
    if available > payload_len {
        return Err(format_err(header_end + payload_len, "trailing bytes after payload"));
    }
    let values = bytes[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let all: Vec<f64> = values.collect();
    let out = all
        .chunks_exact(per_frame)
        .map(|c| Matrix::from_column_slice(rows, cols, c))
        .collect();
    Ok((kind, out))
}

fn read_kind(path: &Path, want: HstsKind) -> Result<Vec<Matrix>> {
    let (kind, frames) = decode_hsts(&fs::read(path)?)?;
    if kind != want {
        return Err(format_err(0, format!("{} holds {}, expected {}", path.display(), kind.name(), want.name())));
    }
    Ok(frames)
}

pub fn write_sequence(path: &Path, x: &FrameSequence) -> Result<()> {
    Ok(fs::write(path, encode_hsts(HstsKind::Sequence, x.frames()))?)
}

pub fn read_sequence(path: &Path) -> Result<FrameSequence> {
    FrameSequence::new(read_kind(path, HstsKind::Sequence)?)
}

pub fn write_endmembers(path: &Path, s: &EndmemberTrajectory) -> Result<()> {
    Ok(fs::write(path, encode_hsts(HstsKind::Endmembers, s.frames()))?)
}

pub fn read_endmembers(path: &Path) -> Result<EndmemberTrajectory> {
    EndmemberTrajectory::new(read_kind(path, HstsKind::Endmembers)?)
}

pub fn write_abundances(path: &Path, a: &AbundanceTrajectory) -> Result<()> {
    Ok(fs::write(path, encode_hsts(HstsKind::Abundances, a.frames()))?)
}

pub fn read_abundances(path: &Path) -> Result<AbundanceTrajectory> {
    AbundanceTrajectory::new(read_kind(path, HstsKind::Abundances)?)
}

/// Formats a real with 17 significant digits.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV line per matrix row.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn csv_to_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let row = trimmed
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(offset, format!("bad CSV value: {e}")))?;
            if rows.first().is_some_and(|r| r.len() != row.len()) {
                return Err(format_err(offset, format!("row has {} fields, expected {}", row.len(), rows[0].len())));
            }
            rows.push(row);
        }
        offset += line.len();
    }
    if rows.is_empty() {
        return Err(format_err(0, "CSV holds no rows"));
    }
    let cols = rows[0].len();
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    Ok(fs::write(path, matrix_to_csv(m))?)
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    csv_to_matrix(&fs::read_to_string(path)?)
}

/// Binary 8-bit graymap of one abundance map, min-max scaled, row-major.
pub fn encode_pgm(map: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if width * height != map.len() {
        return Err(UnmixError::Dimension(format!("{width}x{height} image for {} pixels", map.len())));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(map.iter().map(|v| if span > 0.0 { (255.0 * (v - lo) / span).round() as u8 } else { 0 }));
    Ok(out)
}

/// Writes `{prefix}_p{p}.pgm` for every source `p` (one-based) of `a_k`.
pub fn export_abundance_pgm(a_k: &Matrix, width: usize, height: usize, prefix: &Path) -> Result<Vec<PathBuf>> {
    if width * height != a_k.ncols() {
        return Err(UnmixError::Dimension(format!("{width}x{height} image for {} pixels", a_k.ncols())));
    }
    let mut paths = Vec::with_capacity(a_k.nrows());
    for p in 0..a_k.nrows() {
        let map: Vec<f64> = a_k.row(p).iter().copied().collect();
        let mut name = prefix.as_os_str().to_owned();
        name.push(format!("_p{}.pgm", p + 1));
        let path = PathBuf::from(name);
        fs::write(&path, encode_pgm(&map, width, height)?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub const S_FILE: &str = "S.hsts";
pub const A_FILE: &str = "A.hsts";
pub const PSI_FILE: &str = "psi.csv";
pub const S0_FILE: &str = "s0.csv";

/// Writes `S.hsts`, `A.hsts` and `psi.csv` into `dir`.
pub fn write_estimate_dir(dir: &Path, s: &EndmemberTrajectory, a: &AbundanceTrajectory, psi: &ScaleSeries) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_endmembers(&dir.join(S_FILE), s)?;
    write_abundances(&dir.join(A_FILE), a)?;
    write_matrix_csv(&dir.join(PSI_FILE), psi.matrix())
}

pub fn read_estimate_dir(dir: &Path) -> Result<(EndmemberTrajectory, AbundanceTrajectory, ScaleSeries)> {
    Ok((
        read_endmembers(&dir.join(S_FILE))?,
        read_abundances(&dir.join(A_FILE))?,
        ScaleSeries::new(read_matrix_csv(&dir.join(PSI_FILE))?)?,
    ))
}

/// Truth layout: the estimate files plus `s0.csv`.
pub fn write_truth_dir(dir: &Path, truth: &GroundTruth) -> Result<()> {
    write_estimate_dir(dir, &truth.s, &truth.a, &truth.psi)?;
    write_matrix_csv(&dir.join(S0_FILE), truth.s0.matrix())
}

pub fn read_reference_csv(path: &Path) -> Result<ReferenceSpectra> {
    ReferenceSpectra::new(read_matrix_csv(path)?)
}
