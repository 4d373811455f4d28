//! Inverted-file index: k-means centroids, per-cluster flat inverted lists,
//! coarse probing and fine search over a chosen set of clusters.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::vectorstore::{EmbeddingMatrix, Metric, Neighbor, OffsetReader, TopK, FORMAT_VERSION};

const INDEX_MAGIC: &[u8; 4] = b"LAIX";

pub type ClusterId = u32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IvfParams {
    pub n_clusters: usize,
    pub metric: Metric,
    pub seed: u64,
    pub max_iters: usize,
    /// Train centroids on unit-normalized vectors (common for inner-product search).
    #[serde(default)]
    pub normalize: bool,
}

impl IvfParams {
    pub fn new(n_clusters: usize, metric: Metric, seed: u64) -> Self {
        IvfParams { n_clusters, metric, seed, max_iters: 50, normalize: false }
    }
}

/// One cluster's members, stored flat in the order they appear in the datastore.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedList {
    pub ids: Vec<u64>,
    pub vectors: Vec<f32>,
}

impl InvertedList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Clusters in best-first centroid order for one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub cluster_ids: Vec<ClusterId>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_ids.is_empty()
    }

    pub fn as_set(&self) -> HashSet<ClusterId> {
        self.cluster_ids.iter().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct IvfIndex {
    dim: usize,
    metric: Metric,
    centroids: EmbeddingMatrix,
    lists: Vec<InvertedList>,
}

impl PartialEq for IvfIndex {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.dim == other.dim
            && self.metric == other.metric
            && self.centroids == other.centroids
            && self.lists.len() == other.lists.len()
            && self.lists.iter().zip(&other.lists).all(|(a, b)| {
                a.ids == b.ids && bits(&a.vectors) == bits(&b.vectors)
            })
    }
}

impl IvfIndex {
    /// Trains centroids on `db` and distributes every row into its nearest cluster.
    pub fn build(db: &EmbeddingMatrix, params: &IvfParams) -> Result<Self> {
        if db.is_empty() {
            return Err(Error::invalid("cannot build an index over an empty datastore"));
        }
        if params.n_clusters > db.len() {
            return Err(Error::invalid(format!(
                "n_clusters ({}) exceeds datastore size ({})",
                params.n_clusters,
                db.len()
            )));
        }
        let km = kmeans(
            db.as_slice(),
            db.dim(),
            &KMeansParams {
                n_clusters: params.n_clusters,
                max_iters: params.max_iters,
                seed: params.seed,
                normalize: params.normalize,
            },
        )?;
        log::debug!(
            "k-means: {} iterations, converged={}",
            km.iterations,
            km.converged
        );
        let mut lists = vec![InvertedList::default(); params.n_clusters];
        for ((id, v), &c) in db.rows().zip(&km.assignment) {
            lists[c].ids.push(id);
            lists[c].vectors.extend_from_slice(v);
        }
        let centroids = EmbeddingMatrix::new(
            db.dim(),
            (0..params.n_clusters as u64).collect(),
            km.centroids,
        )?;
        Ok(IvfIndex { dim: db.dim(), metric: params.metric, centroids, lists })
    }

    /// Assembles an index from explicit parts. Every id must appear in exactly one list.
    pub fn from_parts(
        metric: Metric,
        centroids: EmbeddingMatrix,
        lists: Vec<InvertedList>,
    ) -> Result<Self> {
        let dim = centroids.dim();
        if centroids.len() != lists.len() || lists.is_empty() {
            return Err(Error::invalid("need one non-empty set of lists matching the centroids"));
        }
        let mut seen = HashSet::new();
        for list in &lists {
            if list.vectors.len() != list.ids.len() * dim {
                return Err(Error::DimensionMismatch {
                    expected: list.ids.len() * dim,
                    got: list.vectors.len(),
                });
            }
            if let Some(pos) = list.vectors.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row: pos / dim });
            }
            for &id in &list.ids {
                if !seen.insert(id) {
                    return Err(Error::DuplicateId(id));
                }
            }
        }
        Ok(IvfIndex { dim, metric, centroids, lists })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn num_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn num_vectors(&self) -> usize {
        self.lists.iter().map(InvertedList::len).sum()
    }

    pub fn centroids(&self) -> &EmbeddingMatrix {
        &self.centroids
    }

    pub fn list(&self, c: ClusterId) -> Option<&InvertedList> {
        self.lists.get(c as usize)
    }

    pub fn lists(&self) -> &[InvertedList] {
        &self.lists
    }

    /// Payload bytes for cluster `c`: 8 per id plus 4 per vector component.
    pub fn cluster_bytes(&self, c: ClusterId) -> u64 {
        self.lists[c as usize].len() as u64 * (8 + 4 * self.dim as u64)
    }

    pub fn total_bytes(&self) -> u64 {
        (0..self.lists.len() as ClusterId).map(|c| self.cluster_bytes(c)).sum()
    }

    fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        Ok(())
    }

    /// Every cluster, best-first by centroid score; ties by ascending cluster id.
    pub fn centroid_ranking(&self, q: &[f32]) -> Result<Vec<ClusterId>> {
        self.check_query(q)?;
        let scored: Vec<Neighbor> = self
            .centroids
            .rows()
            .map(|(id, c)| Neighbor { id, score: self.metric.score(q, c) })
            .collect();
        let all = TopK::from_candidates(scored.len(), self.metric, scored);
        Ok(all.entries.into_iter().map(|n| n.id as ClusterId).collect())
    }

    /// The `nprobe` best clusters for `q` (clamped to the number of clusters).
    pub fn coarse_probe(&self, q: &[f32], nprobe: usize) -> Result<ProbeSet> {
        self.check_query(q)?;
        let scored: Vec<Neighbor> = self
            .centroids
            .rows()
            .map(|(id, c)| Neighbor { id, score: self.metric.score(q, c) })
            .collect();
        let top = TopK::from_candidates(nprobe.min(scored.len()), self.metric, scored);
        Ok(ProbeSet { cluster_ids: top.entries.into_iter().map(|n| n.id as ClusterId).collect() })
    }

    /// Scores every member of cluster `c` against `q`, appending to `out`.
    pub fn scan_cluster(&self, q: &[f32], c: ClusterId, out: &mut Vec<Neighbor>) -> Result<()> {
        let list = self.list(c).ok_or(Error::UnknownCluster(c))?;
        out.extend(
            list.ids
                .iter()
                .zip(list.vectors.chunks_exact(self.dim))
                .map(|(&id, v)| Neighbor { id, score: self.metric.score(q, v) }),
        );
        Ok(())
    }

    /// Exact best-`k` among the members of `clusters`. Duplicate cluster ids are ignored.
    pub fn search_clusters(&self, q: &[f32], clusters: &[ClusterId], k: usize) -> Result<TopK> {
        self.check_query(q)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut uniq = clusters.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let mut candidates = Vec::new();
        for c in uniq {
            self.scan_cluster(q, c, &mut candidates)?;
        }
        Ok(TopK::from_candidates(k, self.metric, candidates))
    }

    /// Coarse probe followed by fine search: the monolithic IVF search.
    pub fn search(&self, q: &[f32], nprobe: usize, k: usize) -> Result<TopK> {
        let probe = self.coarse_probe(q, nprobe)?;
        self.search_clusters(q, &probe.cluster_ids, k)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.lists.len() as u32).to_le_bytes())?;
        w.write_all(&[self.metric.to_byte()])?;
        for x in self.centroids.as_slice() {
            w.write_all(&x.to_le_bytes())?;
        }
        for list in &self.lists {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for id in &list.ids {
                w.write_all(&id.to_le_bytes())?;
            }
            for x in &list.vectors {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected LAIX".into() });
        }
        let version = r.read_u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let dim = r.read_u32("dimension")? as usize;
        let n_c = r.read_u32("cluster count")? as usize;
        if dim == 0 || n_c == 0 {
            return Err(Error::Format { offset: 8, msg: "zero dimension or cluster count".into() });
        }
        let metric_offset = r.offset();
        let metric = Metric::from_byte(r.read_u8("metric")?).ok_or_else(|| Error::Format {
            offset: metric_offset,
            msg: "unknown metric tag".into(),
        })?;
        let mut cdata = Vec::with_capacity(n_c * dim);
        for _ in 0..n_c * dim {
            cdata.push(r.read_f32("centroid block")?);
        }
        let centroids = EmbeddingMatrix::new(dim, (0..n_c as u64).collect(), cdata)?;
        let mut lists = Vec::with_capacity(n_c);
        for c in 0..n_c {
            let len = r.read_u64(&format!("length of cluster {c}"))? as usize;
            let mut list = InvertedList::default();
            for _ in 0..len {
                list.ids.push(r.read_u64(&format!("ids of cluster {c}"))?);
            }
            for _ in 0..len * dim {
                list.vectors.push(r.read_f32(&format!("vectors of cluster {c}"))?);
            }
            lists.push(list);
        }
        r.expect_eof()?;
        Self::from_parts(metric, centroids, lists)
    }
}
