//! Embedding extraction, L2 normalization and CMC rank-k evaluation for
//! sketch-to-photo and photo-to-sketch retrieval.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, HeadKind, ModelParams};
use crate::synthdata::{Dataset, Domain};

/// Rows encoded per forward pass during evaluation.
const EVAL_CHUNK: usize = 128;
/// Default CMC depth (the tables report R1, R5, R10 and R20).
pub const DEFAULT_CMC_DEPTH: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Array2<f64>,
    pub identities: Vec<u32>,
    pub domains: Vec<Domain>,
    /// Thresholded attribute predictions per row, when available.
    pub attributes: Option<Vec<Vec<u8>>>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn normalize(mut self) -> Result<Self> {
        self.matrix = l2_normalize(self.matrix.view())?;
        self.normalized = true;
        Ok(self)
    }

    pub fn rows(&self, rows: &[usize]) -> EmbeddingSet {
        EmbeddingSet {
            matrix: self.matrix.select(Axis(0), rows),
            identities: rows.iter().map(|&r| self.identities[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            attributes: self.attributes.as_ref().map(|a| rows.iter().map(|&r| a[r].clone()).collect()),
            normalized: self.normalized,
        }
    }

    pub fn of_domain(&self, domain: Domain) -> EmbeddingSet {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| self.domains[r] == domain).collect();
        self.rows(&rows)
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical(format!("cannot normalize row {i}: norm is {norm}")));
        }
        row /= norm;
    }
    Ok(out)
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Query: sketch; gallery: photos.
    SketchToPhoto,
    /// Query: photo; gallery: sketches.
    PhotoToSketch,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcResult {
    pub protocol: Protocol,
    /// Number of ranks in `rank_accuracy` (capped at the gallery size).
    pub k: usize,
    /// `rank_accuracy[i]` is the fraction of matched queries whose first
    /// correct gallery item has rank at most `i + 1`.
    pub rank_accuracy: Vec<f64>,
    /// 1-based rank of the first correct match per query; `None` when the
    /// query identity is absent from the gallery.
    pub query_ranks: Vec<Option<usize>>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub n_unmatched: usize,
}

impl CmcResult {
    pub fn rank1(&self) -> f64 {
        self.rank_accuracy.first().copied().unwrap_or(0.0)
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.rank_accuracy.get(i)).copied()
    }
}

/// Ranks the gallery by ascending Euclidean distance per query; ties are
/// broken by gallery index.
pub fn cmc(query: &EmbeddingSet, gallery: &EmbeddingSet, k: usize, protocol: Protocol) -> Result<CmcResult> {
    if !query.normalized || !gallery.normalized {
        return Err(Error::Usage("cmc: query and gallery embeddings must be L2-normalized".into()));
    }
    if query.is_empty() || gallery.is_empty() || k == 0 {
        return Err(Error::Usage("cmc: empty query or gallery, or k = 0".into()));
    }
    if query.matrix.ncols() != gallery.matrix.ncols() {
        return Err(Error::Usage(format!(
            "cmc: query dimension {} differs from gallery dimension {}",
            query.matrix.ncols(),
            gallery.matrix.ncols()
        )));
    }
    let query_ranks: Vec<Option<usize>> = query
        .matrix
        .outer_iter()
        .zip(&query.identities)
        .map(|(q, qid)| {
            let d: Vec<f64> = gallery.matrix.outer_iter().map(|g| squared_distance(q, g)).collect();
            // first correct item in (distance, index) order
            let best = (0..d.len())
                .filter(|&j| gallery.identities[j] == *qid)
                .min_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)))?;
            let ahead = (0..d.len())
                .filter(|&j| d[j] < d[best] || (d[j] == d[best] && j < best))
                .count();
            Some(ahead + 1)
        })
        .collect();
    let matched: Vec<usize> = query_ranks.iter().flatten().copied().collect();
    if matched.is_empty() {
        return Err(Error::Usage("cmc: no query identity occurs in the gallery".into()));
    }
    let k = k.min(gallery.len());
    let rank_accuracy = (1..=k)
        .map(|r| matched.iter().filter(|&&q| q <= r).count() as f64 / matched.len() as f64)
        .collect();
    Ok(CmcResult {
        protocol,
        k,
        rank_accuracy,
        n_unmatched: query_ranks.len() - matched.len(),
        query_ranks,
        n_query: query.len(),
        n_gallery: gallery.len(),
    })
}

/// Embeds `images` in chunks with `encoder`.
pub fn encode_all(encoder: &Encoder, images: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.nrows(), encoder.embedding_dim()));
    let mut start = 0;
    while start < images.nrows() {
        let end = (start + EVAL_CHUNK).min(images.nrows());
        let emb = encoder.encode(images.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&emb);
        start = end;
    }
    Ok(out)
}

/// Embeds a dataset: photos through E1, sketches through E2 (E1 when the
/// model has no sketch encoder yet). Attribute predictions are attached
/// when the model has an attribute head.
pub fn extract_embeddings(params: &ModelParams, data: &Dataset) -> Result<EmbeddingSet> {
    if data.is_empty() {
        return Err(Error::Usage(format!("{} split is empty", data.split)));
    }
    let sketch_encoder = params.e2.as_ref().unwrap_or(&params.e1);
    let mut matrix = Array2::zeros((data.len(), params.embedding_dim()));
    for (encoder, want_sketch) in [(&params.e1, false), (sketch_encoder, true)] {
        let rows: Vec<usize> = (0..data.len())
            .filter(|&r| data.domains[r].is_sketch() == want_sketch)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let emb = encode_all(encoder, data.images.select(Axis(0), &rows).view())?;
        for (i, &r) in rows.iter().enumerate() {
            matrix.row_mut(r).assign(&emb.row(i));
        }
    }
    let attributes = match params.head(HeadKind::Attribute) {
        Ok(head) => Some(
            threshold_attributes(&head.predict(matrix.view())?)
                .outer_iter()
                .map(|r| r.to_vec())
                .collect(),
        ),
        Err(_) => None,
    };
    Ok(EmbeddingSet {
        matrix,
        identities: data.identities.clone(),
        domains: data.domains.clone(),
        attributes,
        normalized: false,
    })
}

/// Binarizes sigmoid outputs; 0.5 maps to 1.
pub fn threshold_attributes(probs: &Array2<f64>) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= 0.5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bidirectional {
    pub sketch_to_photo: CmcResult,
    pub photo_to_sketch: CmcResult,
    /// Normalized embeddings of the evaluated split.
    pub embeddings: EmbeddingSet,
}

/// Both retrieval directions from a single embedding pass.
pub fn evaluate_bidirectional(params: &ModelParams, test: &Dataset, k: usize) -> Result<Bidirectional> {
    let emb = extract_embeddings(params, test)?.normalize()?;
    let photos = emb.of_domain(Domain::TargetPhoto);
    let sketches = emb.of_domain(Domain::TargetSketch);
    if photos.is_empty() || sketches.is_empty() {
        return Err(Error::Usage(format!("{} split lacks photos or sketches", test.split)));
    }
    Ok(Bidirectional {
        sketch_to_photo: cmc(&sketches, &photos, k, Protocol::SketchToPhoto)?,
        photo_to_sketch: cmc(&photos, &sketches, k, Protocol::PhotoToSketch)?,
        embeddings: emb,
    })
}

const DOMAIN_COLUMN: [(Domain, &str); 3] = [
    (Domain::SourcePhoto, "s"),
    (Domain::TargetPhoto, "t1"),
    (Domain::TargetSketch, "t2"),
];

/// Tab-separated columns: identity, domain, attribute bits (`-` when
/// absent), normalized flag on the header, then one column per dimension.
pub fn format_embeddings(set: &EmbeddingSet) -> String {
    let mut out = format!(
        "# identity\tdomain\tattributes\tdim={}\tnormalized={}\n",
        set.matrix.ncols(),
        set.normalized
    );
    for (r, row) in set.matrix.outer_iter().enumerate() {
        let bits = set
            .attributes
            .as_ref()
            .map(|a| a[r].iter().map(|b| char::from(b'0' + b)).collect::<String>())
            .unwrap_or_else(|| "-".into());
        let _ = write!(out, "{}\t{}\t{bits}", set.identities[r], set.domains[r]);
        for v in row {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingSet> {
    let bad = |line: usize, m: &str| Error::Format(format!("embeddings line {line}: {m}"));
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let field = |key: &str| {
        header
            .split('\t')
            .find_map(|f| f.strip_prefix(key))
            .ok_or_else(|| bad(1, &format!("header lacks {key}")))
    };
    let dim: usize = field("dim=")?.parse().map_err(|_| bad(1, "bad dim"))?;
    let normalized: bool = field("normalized=")?.parse().map_err(|_| bad(1, "bad normalized flag"))?;
    let (mut identities, mut domains, mut bits, mut values) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 + dim {
            return Err(bad(i + 1, "wrong column count"));
        }
        identities.push(cols[0].parse().map_err(|_| bad(i + 1, "bad identity"))?);
        domains.push(
            DOMAIN_COLUMN
                .iter()
                .find(|(_, n)| *n == cols[1])
                .map(|(d, _)| *d)
                .ok_or_else(|| bad(i + 1, "bad domain"))?,
        );
        bits.push(match cols[2] {
            "-" => None,
            s => Some(
                s.bytes()
                    .map(|b| match b {
                        b'0' | b'1' => Ok(b - b'0'),
                        _ => Err(bad(i + 1, "bad attribute bits")),
                    })
                    .collect::<Result<Vec<u8>>>()?,
            ),
        });
        for c in &cols[3..] {
            values.push(c.parse::<f64>().map_err(|_| bad(i + 1, "bad value"))?);
        }
    }
    let attributes = if bits.iter().all(Option::is_some) && !bits.is_empty() {
        Some(bits.into_iter().flatten().collect())
    } else if bits.iter().all(Option::is_none) {
        None
    } else {
        return Err(Error::Format("embeddings: attribute column partially present".into()));
    };
    Ok(EmbeddingSet {
        matrix: Array2::from_shape_vec((identities.len(), dim), values).expect("row lengths checked"),
        identities,
        domains,
        attributes,
        normalized,
    })
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, format_embeddings(set).as_bytes())
}

pub fn import_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

/// Structured CMC record persisted per evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcReport {
    pub protocol: Protocol,
    #[serde(rename = "K")]
    pub k: usize,
    pub rank_accuracy: Vec<f64>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub seed: u64,
}

impl CmcReport {
    pub fn new(result: &CmcResult, seed: u64) -> Self {
        CmcReport {
            protocol: result.protocol,
            k: result.k,
            rank_accuracy: result.rank_accuracy.clone(),
            n_query: result.n_query,
            n_gallery: result.n_gallery,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn set(m: Array2<f64>, ids: Vec<u32>) -> EmbeddingSet {
        let n = ids.len();
        EmbeddingSet {
            matrix: m,
            identities: ids,
            domains: vec![Domain::TargetPhoto; n],
            attributes: None,
            normalized: true,
        }
    }

    /// Full distance matrix plus a stable argsort per query.
    fn oracle(q: &EmbeddingSet, g: &EmbeddingSet, k: usize) -> (Vec<Option<usize>>, Vec<f64>) {
        let ranks: Vec<Option<usize>> = (0..q.len())
            .map(|i| {
                let d: Vec<f64> = (0..g.len())
                    .map(|j| squared_distance(q.matrix.row(i), g.matrix.row(j)))
                    .collect();
                let mut order: Vec<usize> = (0..g.len()).collect();
                order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
                order.iter().position(|&j| g.identities[j] == q.identities[i]).map(|p| p + 1)
            })
            .collect();
        let m: Vec<usize> = ranks.iter().flatten().copied().collect();
        let k = k.min(g.len());
        let acc = (1..=k)
            .map(|r| m.iter().filter(|&&x| x <= r).count() as f64 / m.len() as f64)
            .collect();
        (ranks, acc)
    }

    #[test]
    fn normalizes_rows() {
        let n = l2_normalize(array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(n, array![[0.6, 0.8]]);
        let u = array![[1.0, 0.0]];
        assert_eq!(l2_normalize(u.view()).unwrap(), u);
        assert!(matches!(l2_normalize(array![[0.0, 0.0]].view()), Err(Error::Numerical(_))));
    }

    #[test]
    fn hand_built_two_by_three() {
        // query 0 matches gallery 0 first; query 1 has gallery 2 ahead of its match
        let g = set(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], vec![7, 8, 9]);
        let q = set(array![[1.0, 0.0], [-0.8, 0.6]], vec![7, 8]);
        let r = cmc(&q, &g, 3, Protocol::Generic).unwrap();
        assert_eq!(r.rank_accuracy, vec![0.5, 1.0, 1.0]);
        assert_eq!(r.query_ranks, vec![Some(1), Some(2)]);
    }

    #[test]
    fn copies_rank_first_and_unmatched_queries_are_excluded() {
        let g = set(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 2]);
        let q = set(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![1, 2, 3]);
        let r = cmc(&q, &g, 5, Protocol::Generic).unwrap();
        assert_eq!(r.rank1(), 1.0);
        assert_eq!(r.k, 2);
        assert_eq!(r.n_unmatched, 1);
        assert_eq!(r.query_ranks[2], None);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = set(array![[0.0, 1.0], [0.0, 1.0]], vec![5, 6]);
        let q = set(array![[1.0, 0.0]], vec![6]);
        assert_eq!(cmc(&q, &g, 2, Protocol::Generic).unwrap().query_ranks, vec![Some(2)]);
    }

    #[test]
    fn embeddings_round_trip_through_text() {
        let mut s = set(array![[0.1, -2.5e-7], [1.0 / 3.0, 4.0]], vec![3, 10_001]);
        s.domains[1] = Domain::TargetSketch;
        s.attributes = Some(vec![vec![1, 0, 1], vec![0, 0, 1]]);
        assert_eq!(parse_embeddings(&format_embeddings(&s)).unwrap(), s);
    }

    fn instance() -> impl Strategy<Value = (EmbeddingSet, EmbeddingSet)> {
        (1usize..12, 1usize..12, 1usize..5, 1u32..6).prop_flat_map(|(nq, ng, dim, ids)| {
            // coarse grid values make exact distance ties common
            let coords = proptest::collection::vec(-2i8..=2, (nq + ng) * dim);
            let labels = proptest::collection::vec(0..ids, nq + ng);
            (coords, labels).prop_map(move |(c, l)| {
                let mut m = Array2::from_shape_fn((nq + ng, dim), |(i, j)| f64::from(c[i * dim + j]));
                for mut row in m.axis_iter_mut(Axis(0)) {
                    if row.iter().all(|&v| v == 0.0) {
                        row[0] = 1.0;
                    }
                }
                let m = l2_normalize(m.view()).unwrap();
                (
                    set(m.slice(s![..nq, ..]).to_owned(), l[..nq].to_vec()),
                    set(m.slice(s![nq.., ..]).to_owned(), l[nq..].to_vec()),
                )
            })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((q, g) in instance(), k in 1usize..15) {
            match cmc(&q, &g, k, Protocol::Generic) {
                Ok(r) => {
                    let (ranks, acc) = oracle(&q, &g, k);
                    prop_assert_eq!(&r.query_ranks, &ranks);
                    prop_assert_eq!(&r.rank_accuracy, &acc);
                    prop_assert!(r.rank_accuracy.windows(2).all(|w| w[0] <= w[1]));
                }
                Err(_) => prop_assert!(oracle(&q, &g, k).0.iter().all(Option::is_none)),
            }
        }

        #[test]
        fn scale_then_normalize_is_normalize(v in proptest::collection::vec(0.1f64..3.0, 4), c in 0.5f64..20.0) {
            let m = Array2::from_shape_vec((2, 2), v).unwrap();
            let a = l2_normalize(m.view()).unwrap();
            let b = l2_normalize((&m * c).view()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
