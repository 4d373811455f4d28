//! Embedding storage, distance metrics and the exact brute-force search used
//! as ground truth everywhere else.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const VECTORS_MAGIC: &[u8; 4] = b"LAIV";
pub(crate) const FORMAT_VERSION: u32 = 1;

/// Similarity measure and its ranking orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Larger is better.
    InnerProduct,
    /// Squared Euclidean distance; smaller is better.
    L2,
}

impl Metric {
    /// Scores `a` against `b`. Accumulates in f64 and rounds once to f32 so
    /// that every code path produces bit-identical scores for the same pair.
    #[inline]
    pub fn score(self, a: &[f32], b: &[f32]) -> f32 {
        debug_assert_eq!(a.len(), b.len());
        let acc = match self {
            Metric::InnerProduct => a
                .iter()
                .zip(b)
                .fold(0.0f64, |s, (&x, &y)| s + x as f64 * y as f64),
            Metric::L2 => a.iter().zip(b).fold(0.0f64, |s, (&x, &y)| {
                let d = x as f64 - y as f64;
                s + d * d
            }),
        };
        acc as f32
    }

    /// Orders two scores best-first.
    #[inline]
    pub fn cmp_scores(self, a: f32, b: f32) -> Ordering {
        match self {
            Metric::InnerProduct => b.total_cmp(&a),
            Metric::L2 => a.total_cmp(&b),
        }
    }

    /// Total best-first order on neighbors: score orientation, then ascending id.
    #[inline]
    pub fn rank(self, a: &Neighbor, b: &Neighbor) -> Ordering {
        self.cmp_scores(a.score, b.score).then(a.id.cmp(&b.id))
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Metric::InnerProduct => 0,
            Metric::L2 => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Metric::InnerProduct),
            1 => Some(Metric::L2),
            _ => None,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ip" | "inner_product" | "innerproduct" | "dot" => Ok(Metric::InnerProduct),
            "l2" | "euclidean" => Ok(Metric::L2),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub score: f32,
}

/// Best-first list of at most `k` neighbors with distinct ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub entries: Vec<Neighbor>,
}

impl TopK {
    pub fn empty(k: usize) -> Self {
        TopK { k, entries: Vec::new() }
    }

    /// Selects the best `k` of `candidates` under `metric`. Candidates must
    /// carry distinct ids.
    pub fn from_candidates(k: usize, metric: Metric, mut candidates: Vec<Neighbor>) -> Self {
        let cmp = |a: &Neighbor, b: &Neighbor| metric.rank(a, b);
        if k == 0 {
            candidates.clear();
        } else if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, cmp);
            candidates.truncate(k);
        }
        candidates.sort_unstable_by(cmp);
        TopK { k, entries: candidates }
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dense row-major f32 vectors with stable u64 ids.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
    row_of: HashMap<u64, usize>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.ids == other.ids
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        let mut row_of = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if row_of.insert(id, row).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(EmbeddingMatrix { dim, ids, data, row_of })
    }

    /// Rows with ids `0..rows.len()`.
    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, (0..rows.len() as u64).collect(), data)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.row_of.get(&id).copied()
    }

    pub fn vector(&self, id: u64) -> Option<&[f32]> {
        self.row_of(id).map(|r| self.row(r))
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f32])> + '_ {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    pub(crate) fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        Ok(())
    }

    pub fn write_laiv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(VECTORS_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (id, v) in self.rows() {
            w.write_all(&id.to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `LAIV` binary format. Rejects truncated payloads and
    /// trailing bytes, reporting the byte offset of the inconsistency.
    pub fn read_laiv<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != VECTORS_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected LAIV".into() });
        }
        let version = r.read_u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let dim = r.read_u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::Format { offset: 8, msg: "zero dimension".into() });
        }
        let n = r.read_u64("count")?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for i in 0..n {
            ids.push(r.read_u64(&format!("id of record {i}"))?);
            for _ in 0..dim {
                data.push(r.read_f32(&format!("component of record {i}"))?);
            }
        }
        r.expect_eof()?;
        Self::new(dim, ids, data)
    }

    /// Loads whitespace- or comma-separated text, one `id v0 v1 ...` row per
    /// line. Blank lines and `#` comments are ignored.
    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut dim = None;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty());
            let bad = |msg: String| Error::Trace { line: lineno + 1, msg };
            let id: u64 = fields
                .next()
                .ok_or_else(|| bad("missing id".into()))?
                .parse()
                .map_err(|e| bad(format!("bad id: {e}")))?;
            let row: Vec<f32> = fields
                .map(|f| f.parse::<f32>().map_err(|e| bad(format!("bad component: {e}"))))
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(bad(format!("expected {d} components, found {}", row.len())))
                }
                _ => {}
            }
            ids.push(id);
            data.extend(row);
        }
        match dim {
            Some(d) => Self::new(d, ids, data),
            None => Err(Error::invalid("text input contains no rows")),
        }
    }
}

pub(crate) struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub(crate) fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + filled as u64,
                        msg: format!("unexpected end of file reading {what}"),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b, what)?;
        Ok(b[0])
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn read_f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => {
                    return Err(Error::Format {
                        offset: self.offset,
                        msg: "trailing bytes after last record; header dimension or count \
                              inconsistent with data"
                            .into(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Exact best-`k` search over every row of `db`.
pub fn exact_search(db: &EmbeddingMatrix, q: &[f32], k: usize, metric: Metric) -> Result<TopK> {
    db.check_query(q)?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let candidates = db
        .rows()
        .map(|(id, v)| Neighbor { id, score: metric.score(q, v) })
        .collect();
    Ok(TopK::from_candidates(k, metric, candidates))
}

/// Row-major matrix of Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }
}

/// Euclidean (not squared) distance between every row of `a` and every row of `b`.
pub fn pairwise_l2(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<DistanceMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for (_, x) in a.rows() {
        for (_, y) in b.rows() {
            data.push(euclidean(x, y));
        }
    }
    Ok(DistanceMatrix { rows: a.len(), cols: b.len(), data })
}

pub(crate) fn euclidean(x: &[f32], y: &[f32]) -> f32 {
    let s = x.iter().zip(y).fold(0.0f64, |s, (&a, &b)| {
        let d = a as f64 - b as f64;
        s + d * d
    });
    s.sqrt() as f32
}

/// Returns `v / |v|`, or `v` unchanged when its norm is zero.
pub fn normalized(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_db(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingMatrix::new(dim, (0..n as u64).collect(), data).unwrap()
    }

    #[test]
    fn orthonormal_inner_product() {
        let db = EmbeddingMatrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let top = exact_search(&db, &[1.0, 0.0], 1, Metric::InnerProduct).unwrap();
        assert_eq!(top.entries, vec![Neighbor { id: 0, score: 1.0 }]);
    }

    #[test]
    fn empty_db_gives_empty_topk() {
        let db = EmbeddingMatrix::empty(4).unwrap();
        let top = exact_search(&db, &[0.0; 4], 3, Metric::L2).unwrap();
        assert!(top.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let db = random_db(4, 3, 1);
        assert!(matches!(
            exact_search(&db, &[0.0; 2], 1, Metric::L2),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn matches_separate_scan() {
        // Written without Metric::score or TopK to stay independent.
        let db = random_db(64, 8, 42);
        let q: Vec<f32> = (0..8).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut oracle: Vec<(f64, u64)> = (0..64)
            .map(|r| {
                let row = &db.as_slice()[r * 8..(r + 1) * 8];
                let mut d = 0.0f64;
                for j in 0..8 {
                    let diff = q[j] as f64 - row[j] as f64;
                    d += diff * diff;
                }
                (d, r as u64)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let top = exact_search(&db, &q, 5, Metric::L2).unwrap();
        let want: Vec<u64> = oracle[..5].iter().map(|x| x.1).collect();
        assert_eq!(top.ids(), want);
        for (n, (d, _)) in top.entries.iter().zip(&oracle) {
            assert_eq!(n.score, *d as f32);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let ids = vec![9, 3, 5];
        let db = EmbeddingMatrix::new(1, ids, vec![1.0, 1.0, 1.0]).unwrap();
        let top = exact_search(&db, &[0.0], 3, Metric::L2).unwrap();
        assert_eq!(top.ids(), vec![3, 5, 9]);
    }

    #[test]
    fn constructor_validates() {
        assert!(matches!(
            EmbeddingMatrix::new(2, vec![1, 1], vec![0.0; 4]),
            Err(Error::DuplicateId(1))
        ));
        assert!(matches!(
            EmbeddingMatrix::new(2, vec![1, 2], vec![0.0, 0.0, f32::NAN, 0.0]),
            Err(Error::NonFinite { row: 1 })
        ));
        assert!(EmbeddingMatrix::new(2, vec![1], vec![0.0; 3]).is_err());
    }

    #[test]
    fn pairwise_triangle() {
        let a = EmbeddingMatrix::from_rows(2, &[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let m = pairwise_l2(&a, &a).unwrap();
        assert_eq!(m.data, vec![0.0, 5.0, 5.0, 0.0]);

        let single = EmbeddingMatrix::from_rows(2, &[vec![0.5, -2.0]]).unwrap();
        assert_eq!(pairwise_l2(&single, &single).unwrap().data, vec![0.0]);
    }

    #[test]
    fn pairwise_matches_scalar_loop() {
        let a = random_db(10, 6, 3);
        let b = random_db(10, 6, 4);
        let m = pairwise_l2(&a, &b).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let mut s = 0.0f64;
                for t in 0..6 {
                    let d = a.row(i)[t] as f64 - b.row(j)[t] as f64;
                    s += d * d;
                }
                assert_eq!(m.get(i, j), s.sqrt() as f32);
            }
        }
        let aa = pairwise_l2(&a, &a).unwrap();
        for i in 0..10 {
            assert_eq!(aa.get(i, i), 0.0);
            for j in 0..10 {
                assert_eq!(aa.get(i, j), aa.get(j, i));
            }
        }
        let other = random_db(2, 5, 1);
        assert!(pairwise_l2(&a, &other).is_err());
    }

    #[test]
    fn laiv_round_trip_and_corruption() {
        let db = random_db(17, 5, 9);
        let mut buf = Vec::new();
        db.write_laiv(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 17 * (8 + 5 * 4));
        let back = EmbeddingMatrix::read_laiv(&buf[..]).unwrap();
        assert_eq!(back, db);

        let truncated = &buf[..buf.len() - 3];
        match EmbeddingMatrix::read_laiv(truncated) {
            Err(Error::Format { offset, .. }) => assert!(offset > 20),
            other => panic!("expected format error, got {other:?}"),
        }

        // Header claims D=4 while records were written with D=5.
        let mut wrong_dim = buf.clone();
        wrong_dim[8..12].copy_from_slice(&4u32.to_le_bytes());
        match EmbeddingMatrix::read_laiv(&wrong_dim[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20 + 17 * (8 + 16)),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(EmbeddingMatrix::read_laiv(&bad_magic[..]).is_err());
    }

    #[test]
    fn text_loader() {
        let text = "# id, vec\n7, 1.0, 2.0\n\n3 0.5 -1\n";
        let db = EmbeddingMatrix::read_text(text.as_bytes()).unwrap();
        assert_eq!(db.ids(), &[7, 3]);
        assert_eq!(db.vector(3).unwrap(), &[0.5, -1.0]);
        let ragged = "1 1.0 2.0\n2 1.0\n";
        assert!(matches!(
            EmbeddingMatrix::read_text(ragged.as_bytes()),
            Err(Error::Trace { line: 2, .. })
        ));
    }
}
