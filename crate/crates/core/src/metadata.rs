//! KV blocks, their compact metadata, and metadata-based criticality scoring.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::dot;
use crate::error::{PsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Keys and values of a run of consecutive tokens for one layer.
///
/// Rows are stored flat in row-major order (`n_tokens x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct KVBlock {
    pub block_id: BlockId,
    pub request_id: u64,
    pub layer_id: u32,
    d: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KVBlock {
    pub fn new(
        block_id: BlockId,
        request_id: u64,
        layer_id: u32,
        d: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(PsaError::config("head dimension must be at least 1"));
        }
        if keys.len() % d != 0 {
            return Err(PsaError::DimensionMismatch {
                expected: d,
                got: keys.len() % d,
            });
        }
        if keys.len() != values.len() {
            return Err(PsaError::LengthMismatch {
                keys: keys.len() / d,
                values: values.len() / d,
            });
        }
        if keys.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(PsaError::NonFinite("kv block"));
        }
        Ok(KVBlock {
            block_id,
            request_id,
            layer_id,
            d,
            keys,
            values,
        })
    }

    pub fn from_rows(
        block_id: BlockId,
        request_id: u64,
        layer_id: u32,
        keys: &[Vec<f32>],
        values: &[Vec<f32>],
    ) -> Result<Self> {
        let d = keys.first().map_or(0, Vec::len);
        if let Some(bad) = keys.iter().chain(values).find(|r| r.len() != d) {
            return Err(PsaError::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        KVBlock::new(
            block_id,
            request_id,
            layer_id,
            d,
            keys.concat(),
            values.concat(),
        )
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_tokens(&self) -> usize {
        self.keys.len() / self.d
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn key_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.keys.chunks_exact(self.d)
    }

    pub fn value_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.d)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f32], &[f32])> {
        self.key_rows().zip(self.value_rows())
    }

    /// Bytes of K and V payload actually held by this block.
    pub fn payload_bytes(&self) -> u64 {
        ((self.keys.len() + self.values.len()) * std::mem::size_of::<f32>()) as u64
    }
}

/// Splits a token sequence into blocks of `block_size` tokens.
///
/// Only the last block may be shorter. Block ids are assigned consecutively
/// starting at `first_id`.
pub fn blocks_from_sequence(
    first_id: u64,
    request_id: u64,
    layer_id: u32,
    d: usize,
    block_size: usize,
    keys: &[f32],
    values: &[f32],
) -> Result<Vec<KVBlock>> {
    if block_size == 0 || d == 0 {
        return Err(PsaError::config("block size and head dimension must be positive"));
    }
    if keys.len() != values.len() {
        return Err(PsaError::LengthMismatch {
            keys: keys.len() / d,
            values: values.len() / d,
        });
    }
    let stride = block_size * d;
    keys.chunks(stride)
        .zip(values.chunks(stride))
        .enumerate()
        .map(|(i, (k, v))| {
            KVBlock::new(
                BlockId(first_id + i as u64),
                request_id,
                layer_id,
                d,
                k.to_vec(),
                v.to_vec(),
            )
        })
        .collect()
}

/// O(d) summary of a block: the mean key and the bounding cuboid of all keys.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMetadata {
    pub block_id: BlockId,
    pub layer_id: u32,
    pub mean_key: Vec<f32>,
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
    pub n_tokens: usize,
}

impl BlockMetadata {
    pub fn dim(&self) -> usize {
        self.mean_key.len()
    }

    /// Heap bytes of the three summary vectors; independent of block size.
    pub fn footprint_bytes(&self) -> usize {
        3 * self.dim() * std::mem::size_of::<f32>()
    }
}

pub fn build_metadata(block: &KVBlock) -> Result<BlockMetadata> {
    let n = block.n_tokens();
    if n == 0 {
        return Err(PsaError::EmptyBlock);
    }
    let d = block.dim();
    let mut lo = vec![f32::INFINITY; d];
    let mut hi = vec![f32::NEG_INFINITY; d];
    let mut sum = vec![0.0f64; d];
    for row in block.key_rows() {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
            sum[j] += f64::from(row[j]);
        }
    }
    let mean_key = sum
        .iter()
        .enumerate()
        .map(|(j, s)| ((s / n as f64) as f32).clamp(lo[j], hi[j]))
        .collect();
    Ok(BlockMetadata {
        block_id: block.block_id,
        layer_id: block.layer_id,
        mean_key,
        lo,
        hi,
        n_tokens: n,
    })
}

/// How a block's criticality is estimated from its metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Query dot mean key.
    Mean,
    /// Largest possible query-key score over the bounding cuboid.
    CuboidUpperBound,
    /// Average of the `Mean` and `CuboidUpperBound` scores.
    #[default]
    CuboidMean,
}

impl std::str::FromStr for Estimator {
    type Err = PsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Estimator::Mean),
            "cuboid_upper_bound" | "cuboid_ub" => Ok(Estimator::CuboidUpperBound),
            "cuboid_mean" => Ok(Estimator::CuboidMean),
            other => Err(PsaError::config(format!("unknown estimator '{other}'"))),
        }
    }
}

fn cuboid_upper_bound(q: &[f32], lo: &[f32], hi: &[f32]) -> f64 {
    q.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&qd, (&l, &h))| {
            let qd = f64::from(qd);
            (qd * f64::from(l)).max(qd * f64::from(h))
        })
        .sum()
}

pub fn criticality_score(
    q: &[f32],
    meta: &BlockMetadata,
    estimator: Estimator,
    scale: f64,
) -> Result<f64> {
    if q.len() != meta.dim() {
        return Err(PsaError::DimensionMismatch {
            expected: meta.dim(),
            got: q.len(),
        });
    }
    let score = match estimator {
        Estimator::Mean => dot(q, &meta.mean_key),
        Estimator::CuboidUpperBound => cuboid_upper_bound(q, &meta.lo, &meta.hi),
        Estimator::CuboidMean => {
            0.5 * (dot(q, &meta.mean_key) + cuboid_upper_bound(q, &meta.lo, &meta.hi))
        }
    };
    Ok(score * scale)
}

/// Indices sorted by descending score, ties by ascending block id.
pub(crate) fn rank_by_scores(scores: &[f64], ids: &[BlockId]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order
}

pub fn rank_blocks(
    q: &[f32],
    metas: &[BlockMetadata],
    estimator: Estimator,
    scale: f64,
) -> Result<Vec<usize>> {
    let scores = metas
        .iter()
        .map(|m| criticality_score(q, m, estimator, scale))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<BlockId> = metas.iter().map(|m| m.block_id).collect();
    Ok(rank_by_scores(&scores, &ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::block_log_as;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(id: u64, lo: &[f32], hi: &[f32]) -> BlockMetadata {
        BlockMetadata {
            block_id: BlockId(id),
            layer_id: 0,
            mean_key: lo.iter().zip(hi).map(|(a, b)| (a + b) / 2.0).collect(),
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            n_tokens: 1,
        }
    }

    fn random_block(rng: &mut ChaCha8Rng, id: u64, n: usize, d: usize) -> KVBlock {
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let values: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        KVBlock::new(BlockId(id), 0, 0, d, keys, values).unwrap()
    }

    #[test]
    fn single_key_metadata() {
        let b = KVBlock::from_rows(BlockId(1), 0, 0, &[vec![0.5, -1.25]], &[vec![0.0, 0.0]]).unwrap();
        let m = build_metadata(&b).unwrap();
        assert_eq!(m.mean_key, vec![0.5, -1.25]);
        assert_eq!(m.lo, m.mean_key);
        assert_eq!(m.hi, m.mean_key);
    }

    #[test]
    fn two_key_metadata() {
        let b = KVBlock::from_rows(
            BlockId(1),
            0,
            0,
            &[vec![1.0, -2.0], vec![3.0, 4.0]],
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
        )
        .unwrap();
        let m = build_metadata(&b).unwrap();
        assert_eq!(m.lo, vec![1.0, -2.0]);
        assert_eq!(m.hi, vec![3.0, 4.0]);
        assert_eq!(m.mean_key, vec![2.0, 1.0]);
    }

    #[test]
    fn cuboid_bounds_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_block(&mut rng, 0, 32, 64);
        let m = build_metadata(&b).unwrap();
        for row in b.key_rows() {
            for j in 0..64 {
                assert!(m.lo[j] <= row[j] && row[j] <= m.hi[j]);
                assert!(m.lo[j] <= m.mean_key[j] && m.mean_key[j] <= m.hi[j]);
            }
        }
        assert_eq!(m.footprint_bytes(), 3 * 64 * 4);
    }

    #[test]
    fn empty_block_metadata_errors() {
        let b = KVBlock::new(BlockId(0), 0, 0, 3, vec![], vec![]).unwrap();
        assert!(matches!(build_metadata(&b), Err(PsaError::EmptyBlock)));
    }

    #[test]
    fn upper_bound_examples() {
        let m = meta(0, &[0.0, 0.0], &[2.0, 3.0]);
        let ub = Estimator::CuboidUpperBound;
        assert_eq!(criticality_score(&[1.0, 1.0], &m, ub, 1.0).unwrap(), 5.0);
        assert_eq!(criticality_score(&[-1.0, 0.0], &m, ub, 1.0).unwrap(), 0.0);
        // mean key is (1, 1.5); cuboid-mean averages 2.5 and 5
        assert_eq!(
            criticality_score(&[1.0, 1.0], &m, Estimator::CuboidMean, 1.0).unwrap(),
            3.75
        );
        assert!(criticality_score(&[1.0], &m, ub, 1.0).is_err());
    }

    #[test]
    fn upper_bound_dominates_token_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = 16;
        for _ in 0..500 {
            let b = random_block(&mut rng, 0, 8, d);
            let m = build_metadata(&b).unwrap();
            let q: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let ub = criticality_score(&q, &m, Estimator::CuboidUpperBound, 0.25).unwrap();
            let best = b.key_rows().map(|k| dot(&q, k) * 0.25).fold(f64::MIN, f64::max);
            assert!(ub >= best - 1e-12 * ub.abs().max(1.0));
        }
    }

    #[test]
    fn rank_examples() {
        let ids = [BlockId(0), BlockId(1), BlockId(2)];
        assert_eq!(rank_by_scores(&[0.2, 0.9, 0.5], &ids), vec![1, 2, 0]);
        let ids = [BlockId(7), BlockId(3), BlockId(5)];
        assert_eq!(rank_by_scores(&[1.0, 1.0, 1.0], &ids), vec![1, 2, 0]);
    }

    #[test]
    fn rank_blocks_uses_estimator_and_ties() {
        let metas = [
            meta(2, &[0.0], &[1.0]),
            meta(0, &[0.0], &[1.0]),
            meta(1, &[0.0], &[4.0]),
        ];
        let order = rank_blocks(&[1.0], &metas, Estimator::CuboidUpperBound, 1.0).unwrap();
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn oracle_ranking_by_log_as_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 8;
        let blocks: Vec<KVBlock> = (0..20).map(|i| random_block(&mut rng, i, 4, d)).collect();
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let scores: Vec<f64> = blocks.iter().map(|b| block_log_as(&q, b, 0.5).unwrap()).collect();
        let ids: Vec<BlockId> = blocks.iter().map(|b| b.block_id).collect();
        let order = rank_by_scores(&scores, &ids);

        let mut brute: Vec<(f64, usize)> = blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.key_rows().map(|k| (dot(&q, k) * 0.5).exp()).sum::<f64>(), i))
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        assert_eq!(order, brute.iter().map(|x| x.1).collect::<Vec<_>>());
    }

    #[test]
    fn sequence_blocks_only_last_is_short() {
        let d = 2;
        let keys: Vec<f32> = (0..(10 * d)).map(|x| x as f32).collect();
        let blocks = blocks_from_sequence(100, 7, 1, d, 4, &keys, &keys).unwrap();
        let sizes: Vec<usize> = blocks.iter().map(KVBlock::n_tokens).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(blocks[2].block_id, BlockId(102));
        assert_eq!(blocks[1].key_rows().next().unwrap(), &[8.0, 9.0]);
    }
}
