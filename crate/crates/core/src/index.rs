//! Packed-code retrieval index with asymmetric distance computation.
//!
//! Each gallery item is stored as `B = M * log2(K)` bits. Sub-code `m`
//! occupies bits `[m * b, (m + 1) * b)` counted from the most significant
//! bit of the first byte, MSB-first within the sub-code; each item is padded
//! to a whole number of bytes. Queries stay real-valued: a per-query
//! `M x K` table of squared sub-distances turns each candidate distance into
//! `M` lookups.
//!
//! `SPQI` file layout (little-endian): magic, u16 version, u32 M, u32 K,
//! u32 D, u64 N, the f32 codebooks as an `SPQT` blob, `N` packed codes, and
//! an optional label block (u32 label count, then one u64 bitmask per item)
//! present when bytes remain after the codes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{read_tensor_from, write_tensor_to, Tensor};
use crate::pq_head::{hard_assign, CodebookSet};

pub const SPQI_MAGIC: &[u8; 4] = b"SPQI";
const SPQI_VERSION: u16 = 1;
const SEARCH_SHARD: usize = 4096;

/// Bytes per packed item for `m` sub-codes of `bits` bits.
pub fn code_bytes(m: usize, bits: u32) -> usize {
    (m * bits as usize).div_ceil(8)
}

/// Packs sub-code indices MSB-first into `code_bytes(len, bits)` bytes.
pub fn pack_code(indices: &[u32], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; code_bytes(indices.len(), bits)];
    let mut pos = 0usize;
    for &idx in indices {
        for b in (0..bits).rev() {
            if (idx >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_code`].
pub fn unpack_code(bytes: &[u8], m: usize, bits: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(m);
    let mut pos = 0usize;
    for _ in 0..m {
        let mut v = 0u32;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            pos += 1;
        }
        out.push(v);
    }
    out
}

/// Per-query squared distances to every codeword, `[M][K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    m: usize,
    k: usize,
    dists: Vec<f32>,
}

impl LookupTable {
    pub fn get(&self, m: usize, k: usize) -> f32 {
        self.dists[m * self.k + k]
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.dists[m * self.k..(m + 1) * self.k]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Smallest distance any code can reach: `Σ_m min_k dists[m][k]`.
    pub fn lower_bound(&self) -> f32 {
        (0..self.m)
            .map(|m| self.row(m).iter().copied().fold(f32::INFINITY, f32::min))
            .sum()
    }

    /// ADC distance of a list of sub-code indices.
    pub fn distance(&self, indices: &[u32]) -> f32 {
        indices
            .iter()
            .enumerate()
            .map(|(m, &k)| self.dists[m * self.k + k as usize])
            .sum()
    }
}

/// Optional per-item label bitmasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBlock {
    /// Number of label classes represented in the masks.
    pub label_count: u32,
    pub masks: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub distance: f32,
}

impl Hit {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl Eq for Hit {}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexFile {
    m: usize,
    k: usize,
    subdim: usize,
    bits: u32,
    /// `[M][K][subdim]` f32 codewords.
    codebooks: Vec<f32>,
    codes: Vec<u8>,
    len: usize,
    labels: Option<LabelBlock>,
}

impl IndexFile {
    /// Empty index over the given codebooks.
    pub fn empty(cb: &CodebookSet) -> Self {
        Self {
            m: cb.m(),
            k: cb.k(),
            subdim: cb.subdim(),
            bits: cb.code_bits(),
            codebooks: cb.codewords().iter().map(|&v| v as f32).collect(),
            codes: Vec::new(),
            len: 0,
            labels: None,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.m * self.subdim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Code length in bits.
    pub fn code_bits(&self) -> usize {
        self.m * self.bits as usize
    }

    pub fn bytes_per_item(&self) -> usize {
        code_bytes(self.m, self.bits)
    }

    pub fn codebooks(&self) -> &[f32] {
        &self.codebooks
    }

    pub fn codeword(&self, m: usize, k: usize) -> &[f32] {
        let o = (m * self.k + k) * self.subdim;
        &self.codebooks[o..o + self.subdim]
    }

    pub fn packed(&self, n: usize) -> &[u8] {
        let w = self.bytes_per_item();
        &self.codes[n * w..(n + 1) * w]
    }

    pub fn codes(&self, n: usize) -> Vec<u32> {
        unpack_code(self.packed(n), self.m, self.bits)
    }

    pub fn labels(&self) -> Option<&LabelBlock> {
        self.labels.as_ref()
    }

    pub fn set_labels(&mut self, labels: LabelBlock) -> Result<()> {
        if labels.masks.len() != self.len {
            return Err(Error::Dimension(format!(
                "{} label masks for {} items",
                labels.masks.len(),
                self.len
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Hard-encodes and appends gallery rows. Drops any label block.
    pub fn append(&mut self, cb: &CodebookSet, gallery: &Tensor<f64>) -> Result<()> {
        if cb.m() != self.m || cb.k() != self.k || cb.subdim() != self.subdim {
            return Err(Error::Config("codebooks do not match the index".into()));
        }
        gallery
            .expect_matrix(self.dim(), "gallery")
            .map_err(|e| Error::Config(e.to_string()))?;
        let assigned = hard_assign(cb, gallery)?;
        for n in 0..assigned.rows() {
            self.codes.extend(pack_code(assigned.row(n), self.bits));
        }
        self.len += assigned.rows();
        self.labels = None;
        Ok(())
    }

    /// Reconstructed (decoded) vector of item `n`.
    pub fn reconstruct(&self, n: usize) -> Vec<f32> {
        self.codes(n)
            .iter()
            .enumerate()
            .flat_map(|(m, &k)| self.codeword(m, k as usize).iter().copied())
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut head = Vec::with_capacity(26);
        head.extend_from_slice(SPQI_MAGIC);
        head.extend_from_slice(&SPQI_VERSION.to_le_bytes());
        for v in [self.m, self.k, self.dim()] {
            let v = u32::try_from(v).map_err(|_| Error::Config("header field exceeds u32".into()))?;
            head.extend_from_slice(&v.to_le_bytes());
        }
        head.extend_from_slice(&(self.len as u64).to_le_bytes());
        w.write_all(&head)?;
        let cb = Tensor::new_unchecked_values(vec![self.m, self.k, self.subdim], self.codebooks.clone())?;
        write_tensor_to(w, &cb)?;
        w.write_all(&self.codes)?;
        if let Some(labels) = &self.labels {
            let mut buf = Vec::with_capacity(4 + 8 * labels.masks.len());
            buf.extend_from_slice(&labels.label_count.to_le_bytes());
            for m in &labels.masks {
                buf.extend_from_slice(&m.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 26];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("SPQI header truncated".into()))?;
        if &head[..4] != SPQI_MAGIC {
            return Err(Error::Format("bad SPQI magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != SPQI_VERSION {
            return Err(Error::Format(format!("unsupported SPQI version {version}")));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap()) as usize;
        let (m, k, d) = (u32_at(6), u32_at(10), u32_at(14));
        let len = usize::try_from(u64::from_le_bytes(head[18..26].try_into().unwrap()))
            .map_err(|_| Error::Format("item count overflows".into()))?;
        if m == 0 || d % m != 0 || !k.is_power_of_two() {
            return Err(Error::Format(format!("inconsistent SPQI header M={m} K={k} D={d}")));
        }
        let cb: Tensor<f32> = read_tensor_from(r)?;
        if cb.shape() != [m, k, d / m] {
            return Err(Error::Format(format!(
                "codebook blob {:?} disagrees with header [{m}, {k}, {}]",
                cb.shape(),
                d / m
            )));
        }
        let bits = k.trailing_zeros();
        let total = len
            .checked_mul(code_bytes(m, bits))
            .ok_or_else(|| Error::Format("code payload size overflows".into()))?;
        let mut codes = Vec::new();
        r.take(total as u64).read_to_end(&mut codes)?;
        if codes.len() != total {
            return Err(Error::Format(format!(
                "code payload truncated: expected {total} bytes, got {}",
                codes.len()
            )));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let labels = if rest.is_empty() {
            None
        } else {
            if rest.len() != 4 + 8 * len {
                return Err(Error::Format(format!(
                    "label block has {} bytes, expected {}",
                    rest.len(),
                    4 + 8 * len
                )));
            }
            Some(LabelBlock {
                label_count: u32::from_le_bytes(rest[..4].try_into().unwrap()),
                masks: rest[4..]
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            })
        };
        let index = Self {
            m,
            k,
            subdim: d / m,
            bits,
            codebooks: cb.into_data(),
            codes,
            len,
            labels,
        };
        if index.codebooks.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt("non-finite codeword in index".into()));
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Hard-encodes every gallery row into a packed code.
pub fn build_index(cb: &CodebookSet, gallery: &Tensor<f64>) -> Result<IndexFile> {
    let mut index = IndexFile::empty(cb);
    index.append(cb, gallery)?;
    Ok(index)
}

/// `dists[m][k] = ‖q_m - c_mk‖²` in f32.
pub fn make_lut(index: &IndexFile, query: &[f32]) -> Result<LookupTable> {
    if query.len() != index.dim() {
        return Err(Error::Dimension(format!(
            "query has {} dims, index {}",
            query.len(),
            index.dim()
        )));
    }
    let s = index.subdim;
    let mut dists = Vec::with_capacity(index.m * index.k);
    for m in 0..index.m {
        let q = &query[m * s..(m + 1) * s];
        for k in 0..index.k {
            let c = index.codeword(m, k);
            dists.push(q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(LookupTable {
        m: index.m,
        k: index.k,
        dists,
    })
}

/// ADC distance of item `n`, decoding its packed code on the fly.
pub fn adc_distance(index: &IndexFile, lut: &LookupTable, n: usize) -> f32 {
    let bytes = index.packed(n);
    if index.bits == 4 {
        // Two nibbles per byte; an odd M leaves the low nibble of the last byte unused.
        let mut sum = 0.0f32;
        for m in 0..index.m {
            let b = bytes[m / 2];
            let code = if m % 2 == 0 { b >> 4 } else { b & 0x0F };
            sum += lut.dists[m * index.k + code as usize];
        }
        sum
    } else {
        lut.distance(&unpack_code(bytes, index.m, index.bits))
    }
}

/// ADC distances to every item, in id order.
pub fn adc_all(index: &IndexFile, lut: &LookupTable) -> Vec<f32> {
    (0..index.len()).map(|n| adc_distance(index, lut, n)).collect()
}

/// Top-`top_k` items by ADC distance, ascending; ties by ascending id.
pub fn adc_search(index: &IndexFile, query: &[f32], top_k: usize) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::Usage("search on an empty index".into()));
    }
    if top_k > index.len() {
        return Err(Error::Usage(format!(
            "top_k {top_k} exceeds index size {}",
            index.len()
        )));
    }
    let lut = make_lut(index, query)?;
    if top_k == 0 {
        return Ok(Vec::new());
    }
    let shards: Vec<usize> = (0..index.len()).step_by(SEARCH_SHARD).collect();
    let partials: Vec<Vec<Hit>> = shards
        .par_iter()
        .map(|&start| {
            let end = (start + SEARCH_SHARD).min(index.len());
            let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(top_k + 1);
            for id in start..end {
                let hit = Hit {
                    id,
                    distance: adc_distance(index, &lut, id),
                };
                if heap.len() < top_k {
                    heap.push(hit);
                } else if hit < *heap.peek().expect("non-empty") {
                    heap.pop();
                    heap.push(hit);
                }
            }
            heap.into_sorted_vec()
        })
        .collect();
    let mut merged: Vec<Hit> = partials.into_iter().flatten().collect();
    merged.sort();
    merged.truncate(top_k);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_cb(m: usize, k: usize, s: usize, seed: u64) -> CodebookSet {
        CodebookSet::random(m, k, s, &mut Rng::new(seed, 0)).unwrap()
    }

    #[test]
    fn nibble_layout() {
        assert_eq!(pack_code(&[3, 15, 0, 7], 4), vec![0x3F, 0x07]);
        assert_eq!(unpack_code(&[0x3F, 0x07], 4, 4), vec![3, 15, 0, 7]);
        // 3-bit sub-codes straddle bytes: 101 110 01|1 -> 0xB9, 0x80
        assert_eq!(pack_code(&[5, 6, 3], 3), vec![0b1011_1001, 0b1000_0000]);
    }

    #[test]
    fn exhaustive_bijection_16_bits() {
        for v in 0..=u16::MAX as u32 {
            let idx = [v >> 12, (v >> 8) & 15, (v >> 4) & 15, v & 15];
            let packed = pack_code(&idx, 4);
            assert_eq!(packed, (v as u16).to_be_bytes());
            assert_eq!(unpack_code(&packed, 4, 4), idx);
        }
    }

    #[test]
    fn gallery_of_codewords_encodes_their_indices() {
        let cb = random_cb(4, 16, 2, 1);
        let picks = [[3u32, 15, 0, 7], [1, 2, 3, 4]];
        let rows: Vec<Vec<f64>> = picks
            .iter()
            .map(|p| p.iter().enumerate().flat_map(|(m, &k)| cb.codeword(m, k as usize).to_vec()).collect())
            .collect();
        let index = build_index(&cb, &Tensor::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(index.packed(0), &[0x3F, 0x07]);
        assert_eq!(index.codes(1), vec![1, 2, 3, 4]);
        assert_eq!(index.bytes_per_item(), 2);
        assert_eq!(index.code_bits(), 16);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let cb = random_cb(2, 4, 2, 2);
        assert!(matches!(build_index(&cb, &Tensor::zeros(vec![3, 5])), Err(Error::Config(_))));
    }

    #[test]
    fn lut_examples() {
        let cb = CodebookSet::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let index = IndexFile::empty(&cb);
        let lut = make_lut(&index, &[0.25]).unwrap();
        assert_eq!(lut.row(0), &[0.0625, 0.5625]);
        let cb = random_cb(2, 8, 3, 3);
        let index = IndexFile::empty(&cb);
        let q: Vec<f32> = [cb.codeword(0, 6), cb.codeword(1, 2)].concat().iter().map(|&v| v as f32).collect();
        let lut = make_lut(&index, &q).unwrap();
        assert_eq!(lut.get(0, 6), 0.0);
        assert_eq!(lut.get(1, 2), 0.0);
        assert_eq!(lut, make_lut(&index, &q).unwrap());
    }

    #[test]
    fn search_ranks_and_ties() {
        let cb = random_cb(2, 4, 2, 4);
        let mut rng = Rng::new(5, 0);
        let g = Tensor::new(vec![30, 4], (0..120).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let index = build_index(&cb, &g).unwrap();
        let q: Vec<f32> = g.row(7).iter().map(|&v| v as f32).collect();
        let hits = adc_search(&index, &q, 30).unwrap();
        assert_eq!(hits.len(), 30);
        assert!(hits.windows(2).all(|w| w[0].key_cmp(&w[1]) == Ordering::Less));
        let lut = make_lut(&index, &q).unwrap();
        // Item 7's code is the per-subspace nearest codeword to q.
        assert_eq!(hits[0].distance, lut.lower_bound());
        // Identical codes land adjacent, lower id first.
        for w in hits.windows(2) {
            if index.packed(w[0].id) == index.packed(w[1].id) {
                assert!(w[0].id < w[1].id);
            }
        }
        let top3 = adc_search(&index, &q, 3).unwrap();
        assert_eq!(&hits[..3], &top3[..]);
    }

    #[test]
    fn search_errors() {
        let cb = random_cb(1, 2, 2, 6);
        let empty = IndexFile::empty(&cb);
        assert!(matches!(adc_search(&empty, &[0.0, 0.0], 1), Err(Error::Usage(_))));
        let index = build_index(&cb, &Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(adc_search(&index, &[0.0, 0.0], 3), Err(Error::Usage(_))));
        assert!(matches!(adc_search(&index, &[0.0], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn file_round_trip_with_labels() {
        let cb = random_cb(3, 8, 2, 7);
        let mut rng = Rng::new(8, 0);
        let g = Tensor::new(vec![5, 6], (0..30).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let mut index = build_index(&cb, &g).unwrap();
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        let back = IndexFile::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, index);

        index.set_labels(LabelBlock { label_count: 3, masks: vec![1, 2, 4, 1, 2] }).unwrap();
        let mut buf2 = Vec::new();
        index.write_to(&mut buf2).unwrap();
        assert_eq!(buf2.len(), buf.len() + 4 + 40);
        assert_eq!(&buf2[..buf.len()], &buf[..]);
        assert_eq!(IndexFile::read_from(&mut buf2.as_slice()).unwrap(), index);

        // Header: magic, version, M, K, D, N.
        assert_eq!(&buf[..4], b"SPQI");
        assert_eq!(&buf[4..6], &1u16.to_le_bytes());
        assert_eq!(&buf[6..10], &3u32.to_le_bytes());
        assert_eq!(&buf[10..14], &8u32.to_le_bytes());
        assert_eq!(&buf[14..18], &6u32.to_le_bytes());
        assert_eq!(&buf[18..26], &5u64.to_le_bytes());
        assert_eq!(&buf[26..30], b"SPQT");

        buf2.pop();
        assert!(matches!(IndexFile::read_from(&mut buf2.as_slice()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in 1u32..9, idx in prop::collection::vec(any::<u32>(), 1..40)) {
            let idx: Vec<u32> = idx.into_iter().map(|v| v & ((1 << bits) - 1)).collect();
            let packed = pack_code(&idx, bits);
            prop_assert_eq!(packed.len(), code_bytes(idx.len(), bits));
            prop_assert_eq!(unpack_code(&packed, idx.len(), bits), idx);
        }

        #[test]
        fn appending_preserves_relative_order(seed in any::<u64>()) {
            let cb = random_cb(2, 8, 2, seed);
            let mut rng = Rng::new(seed, 1);
            let mut mk = |n: usize| Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let (a, b, q) = (mk(20), mk(15), mk(1));
            let q: Vec<f32> = q.data().iter().map(|&v| v as f32).collect();
            let mut index = build_index(&cb, &a).unwrap();
            let before: Vec<usize> = adc_search(&index, &q, 20).unwrap().iter().map(|h| h.id).collect();
            index.append(&cb, &b).unwrap();
            let after: Vec<usize> = adc_search(&index, &q, 35).unwrap()
                .iter().map(|h| h.id).filter(|&id| id < 20).collect();
            prop_assert_eq!(before, after);
        }
    }
}
