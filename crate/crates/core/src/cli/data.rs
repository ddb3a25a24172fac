//! Datasets: IDX files, binarisation and synthetic generators.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, DATA};

/// Image tensor of unsigned bytes (rank 3, e.g. MNIST images).
pub const IDX_IMAGES: u32 = 0x0000_0803;
/// Vector of unsigned bytes (rank 1, e.g. MNIST labels).
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Contents of an IDX file of unsigned bytes.
///
/// `rows` has one row per entry of the first dimension, flattened over the
/// rest. Images (rank > 1) are scaled to `[0, 1]`; label vectors keep their
/// raw byte values.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxMatrix {
    pub dims: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl IdxMatrix {
    pub fn is_labels(&self) -> bool {
        self.dims.len() == 1
    }

    pub fn num_cols(&self) -> usize {
        self.dims[1..].iter().product()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses IDX bytes: a big-endian magic (`0x0000 08 rank`), `rank`
/// big-endian u32 dimension sizes, then the row-major payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxMatrix> {
    let be_u32 = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| parse_err(bytes.len(), "truncated IDX header"))
    };
    let magic = be_u32(0)?;
    if magic != IDX_IMAGES && magic != IDX_LABELS {
        return Err(parse_err(0, format!("unsupported IDX magic {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        dims.push(be_u32(4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(parse_err(
            bytes.len(),
            format!("truncated IDX payload: expected {len} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > len {
        return Err(parse_err(start + len, "trailing bytes after IDX payload"));
    }
    let labels = rank == 1;
    let cols = if labels { 1 } else { dims[1..].iter().product() };
    let rows = if cols == 0 {
        vec![Vec::new(); dims[0]]
    } else {
        payload
            .chunks(cols)
            .map(|c| {
                c.iter()
                    .map(|&b| if labels { b as f64 } else { b as f64 / 255.0 })
                    .collect()
            })
            .collect()
    };
    Ok(IdxMatrix { dims, rows })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxMatrix> {
    parse_idx(&std::fs::read(path)?)
}

/// Serialises back to IDX bytes; values are rounded to the nearest byte.
pub fn encode_idx(m: &IdxMatrix) -> Result<Vec<u8>> {
    let magic = match m.dims.len() {
        1 => IDX_LABELS,
        3 => IDX_IMAGES,
        r => return Err(Error::InvalidArgument(format!("cannot encode rank-{r} IDX data"))),
    };
    let mut out = magic.to_be_bytes().to_vec();
    for &d in &m.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let scale = if m.is_labels() { 1.0 } else { 255.0 };
    for row in &m.rows {
        for &v in row {
            let b = (v * scale).round();
            if !(0.0..=255.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("value {v} does not fit in a byte")));
            }
            out.push(b as u8);
        }
    }
    Ok(out)
}

pub fn write_idx(path: impl AsRef<Path>, m: &IdxMatrix) -> Result<()> {
    std::fs::write(path, encode_idx(m)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Binary examples, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<f64>>,
    pub n_visible: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, n_visible: usize, split: Split) -> Result<Self> {
        for row in &rows {
            crate::error::check_len("dataset row", n_visible, row.len())?;
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument("dataset values must be 0 or 1".into()));
            }
        }
        Ok(Self { rows, n_visible, split })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn take(mut self, n: usize) -> Self {
        self.rows.truncate(n);
        self
    }
}

/// `x >= threshold -> 1`, otherwise 0.
pub fn binarize(rows: &[Vec<f64>], threshold: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| (v >= threshold) as u8 as f64).collect())
        .collect()
}

/// Standard bars-and-stripes list for a `rows x cols` grid: every subset of
/// columns switched on (bars), then every subset of rows (stripes). The
/// all-off and all-on images appear in both halves, so the list has
/// `2^cols + 2^rows` entries of which `2^cols + 2^rows - 2` are distinct.
pub fn bars_stripes_patterns(rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = rows * cols;
    let mut out = Vec::with_capacity((1 << cols) + (1 << rows));
    for mask in 0..1usize << cols {
        out.push((0..n).map(|u| ((mask >> (u % cols)) & 1) as f64).collect());
    }
    for mask in 0..1usize << rows {
        out.push((0..n).map(|u| ((mask >> (u / cols)) & 1) as f64).collect());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    BarsStripes { rows: usize, cols: usize },
    RandomBernoulli { n_visible: usize, p: f64 },
}

impl SyntheticKind {
    pub fn n_visible(&self) -> usize {
        match *self {
            SyntheticKind::BarsStripes { rows, cols } => rows * cols,
            SyntheticKind::RandomBernoulli { n_visible, .. } => n_visible,
        }
    }
}

/// `size` examples drawn with the seeded data stream `index`.
///
/// Bars-and-stripes examples are drawn uniformly from the standard list.
pub fn synthetic_dataset(kind: SyntheticKind, size: usize, seed: u64, index: u64, split: Split) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, DATA, index);
    let rows = match kind {
        SyntheticKind::BarsStripes { rows, cols } => {
            if rows == 0 || cols == 0 || rows + cols > 24 {
                return Err(Error::InvalidArgument(format!(
                    "bad bars-and-stripes grid {rows}x{cols}"
                )));
            }
            let patterns = bars_stripes_patterns(rows, cols);
            (0..size)
                .map(|_| patterns[rng.random_range(0..patterns.len())].clone())
                .collect()
        }
        SyntheticKind::RandomBernoulli { n_visible, p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "Bernoulli p must lie in [0, 1], got {p}"
                )));
            }
            (0..size)
                .map(|_| (0..n_visible).map(|_| rng.random_bool(p) as u8 as f64).collect())
                .collect()
        }
    };
    Dataset::new(rows, kind.n_visible(), split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn parses_small_image_tensor() {
        let b = idx_bytes(IDX_IMAGES, &[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 255]);
        let m = parse_idx(&b).unwrap();
        assert_eq!(m.dims, vec![2, 2, 2]);
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0], vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(m.rows[1], vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_payload_gives_zero_matrix() {
        let m = parse_idx(&idx_bytes(IDX_IMAGES, &[3, 2, 2], &[0; 12])).unwrap();
        assert!(m.rows.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_keep_raw_values() {
        let m = parse_idx(&idx_bytes(IDX_LABELS, &[3], &[7, 0, 9])).unwrap();
        assert!(m.is_labels());
        assert_eq!(m.rows, vec![vec![7.0], vec![0.0], vec![9.0]]);
    }

    #[test]
    fn bad_input_reports_offsets() {
        match parse_idx(&idx_bytes(0x0000_0903, &[1, 1, 1], &[0])) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_idx(&idx_bytes(IDX_IMAGES, &[2, 2, 2], &[0; 5])) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16 + 5),
            other => panic!("{other:?}"),
        }
        match parse_idx(&idx_bytes(IDX_IMAGES, &[1, 1, 1], &[0, 0])) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 17),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_idx(&IDX_IMAGES.to_be_bytes()),
            Err(Error::Parse { offset: 4, .. })
        ));
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let payload: Vec<u8> = (0..=255).chain(0..=255).map(|v| v as u8).collect();
        let b = idx_bytes(IDX_IMAGES, &[8, 8, 8], &payload);
        assert_eq!(encode_idx(&parse_idx(&b).unwrap()).unwrap(), b);
        let l = idx_bytes(IDX_LABELS, &[4], &[1, 2, 3, 250]);
        assert_eq!(encode_idx(&parse_idx(&l).unwrap()).unwrap(), l);
    }

    #[test]
    fn idx_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        let b = idx_bytes(IDX_IMAGES, &[2, 1, 3], &[1, 2, 3, 4, 5, 6]);
        std::fs::write(&path, &b).unwrap();
        let m = load_idx(&path).unwrap();
        let out = dir.path().join("y.idx");
        write_idx(&out, &m).unwrap();
        assert_eq!(std::fs::read(out).unwrap(), b);
    }

    #[test]
    fn binarize_threshold_is_inclusive_and_idempotent() {
        let m = vec![vec![0.5, 0.49, 1.0, 0.0]];
        let b = binarize(&m, 0.5);
        assert_eq!(b, vec![vec![1.0, 0.0, 1.0, 0.0]]);
        assert_eq!(binarize(&b, 0.5), b);
        assert!(binarize(&[vec![0.1, 0.3, 0.49]], 0.5)[0].iter().all(|&v| v == 0.0));
    }

    fn is_bars_or_stripes(x: &[f64], rows: usize, cols: usize) -> bool {
        let bars = (0..rows).all(|r| (0..cols).all(|c| x[r * cols + c] == x[c]));
        let stripes = (0..rows).all(|r| (0..cols).all(|c| x[r * cols + c] == x[r * cols]));
        bars || stripes
    }

    #[test]
    fn bars_stripes_list_matches_enumeration() {
        for (rows, cols) in [(2, 2), (3, 3), (3, 4), (4, 4)] {
            let list = bars_stripes_patterns(rows, cols);
            assert_eq!(list.len(), (1 << rows) + (1 << cols));
            let distinct: BTreeSet<Vec<u8>> = list.iter().map(|p| p.iter().map(|&v| v as u8).collect()).collect();
            let n = rows * cols;
            let oracle: BTreeSet<Vec<u8>> = (0..1u64 << n)
                .map(|bits| crate::eval::enumerate::decode_state(bits, n))
                .filter(|x| is_bars_or_stripes(x, rows, cols))
                .map(|x| x.iter().map(|&v| v as u8).collect())
                .collect();
            assert_eq!(distinct, oracle);
            assert_eq!(distinct.len(), list.len() - 2);
        }
        assert_eq!(bars_stripes_patterns(2, 2).len(), 8);
    }

    #[test]
    fn synthetic_data_is_seeded() {
        let kind = SyntheticKind::BarsStripes { rows: 3, cols: 4 };
        let a = synthetic_dataset(kind, 64, 5, 0, Split::Train).unwrap();
        assert_eq!(a, synthetic_dataset(kind, 64, 5, 0, Split::Train).unwrap());
        assert_ne!(a, synthetic_dataset(kind, 64, 6, 0, Split::Train).unwrap());
        assert!(a.rows.iter().all(|r| is_bars_or_stripes(r, 3, 4)));
        assert_eq!(a.n_visible, 12);
    }

    #[test]
    fn bernoulli_zero_is_all_zeros() {
        let d = synthetic_dataset(
            SyntheticKind::RandomBernoulli { n_visible: 5, p: 0.0 },
            10,
            1,
            0,
            Split::Test,
        )
        .unwrap();
        assert!(d.rows.iter().flatten().all(|&v| v == 0.0));
        assert!(synthetic_dataset(
            SyntheticKind::RandomBernoulli { n_visible: 5, p: 1.5 },
            10,
            1,
            0,
            Split::Test
        )
        .is_err());
        assert!(synthetic_dataset(
            SyntheticKind::RandomBernoulli { n_visible: 5, p: 0.5 },
            0,
            1,
            0,
            Split::Test
        )
        .is_err());
    }

    #[test]
    fn dataset_rejects_non_binary_rows() {
        assert!(Dataset::new(vec![vec![0.5]], 1, Split::Train).is_err());
        assert!(Dataset::new(vec![vec![1.0, 0.0]], 1, Split::Train).is_err());
    }
}
