//! Binary codes, a bit-packed Hamming index and AP / mAP evaluation.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// `k` bits packed little-endian into 64-bit words; bit set means `+1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    k: usize,
    words: Vec<u64>,
}

fn words_for(k: usize) -> usize {
    k.div_ceil(64)
}

impl BinaryCode {
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        let k = signs.len();
        let mut words = vec![0u64; words_for(k)];
        for (b, &s) in signs.iter().enumerate() {
            match s {
                1 => words[b / 64] |= 1 << (b % 64),
                -1 => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "code entry {s} at bit {b} is not +-1"
                    )))
                }
            }
        }
        Ok(BinaryCode { k, words })
    }

    pub fn from_words(k: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(k) {
            return Err(Error::dim(
                "BinaryCode::from_words",
                &[words_for(k)],
                &[words.len()],
            ));
        }
        let code = BinaryCode { k, words };
        if let Some(&last) = code.words.last() {
            if last & !code.last_mask() != 0 {
                return Err(Error::Validation(format!("bits beyond k={k} are set")));
            }
        }
        Ok(code)
    }

    fn last_mask(&self) -> u64 {
        match self.k % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, b: usize) -> bool {
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.k)
            .map(|b| if self.bit(b) { 1 } else { -1 })
            .collect()
    }
}

/// `sign(h)` with `sign(0) = +1`.
pub fn encode(h: &[f64]) -> BinaryCode {
    let signs: Vec<i8> = h.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    BinaryCode::from_signs(&signs).expect("signs are +-1")
}

/// Row-wise [`encode`] of an `n x k` buffer.
pub fn encode_rows(h: &[f64], k: usize) -> Vec<BinaryCode> {
    h.chunks_exact(k).map(encode).collect()
}

pub fn hamming_distance(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.k != b.k {
        return Err(Error::Usage(format!(
            "hamming distance between k={} and k={}",
            a.k, b.k
        )));
    }
    Ok(a.words
        .iter()
        .zip(&b.words)
        .map(|(x, y)| (x ^ y).count_ones())
        .sum())
}

/// Immutable database of codes with class labels; ids are insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashIndex {
    k: usize,
    codes: Vec<BinaryCode>,
    labels: Vec<usize>,
}

impl HashIndex {
    pub fn new(codes: Vec<BinaryCode>, labels: Vec<usize>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::dim("HashIndex", &[codes.len()], &[labels.len()]));
        }
        let k = codes.first().map_or(0, |c| c.k);
        if let Some(c) = codes.iter().find(|c| c.k != k) {
            return Err(Error::Validation(format!(
                "index mixes k={k} and k={}",
                c.k
            )));
        }
        Ok(HashIndex { k, codes, labels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[BinaryCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Database ids by ascending Hamming distance, ties by ascending id.
pub fn rank_database(query: &BinaryCode, index: &HashIndex) -> Result<Vec<(usize, u32)>> {
    if !index.is_empty() && query.k != index.k {
        return Err(Error::Usage(format!(
            "query has k={} but index has k={}",
            query.k, index.k
        )));
    }
    // Counting sort on distance keeps ids ascending within each bucket.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); query.k + 1];
    for (id, c) in index.codes.iter().enumerate() {
        let d: u32 = query
            .words
            .iter()
            .zip(&c.words)
            .map(|(x, y)| (x ^ y).count_ones())
            .sum();
        buckets[d as usize].push(id);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .flat_map(|(d, ids)| ids.into_iter().map(move |id| (id, d as u32)))
        .collect())
}

/// Mean over relevant ranks of precision at that rank; `None` with no relevant item.
///
/// Precisions are summed in double-double, so short lists come out correctly
/// rounded (e.g. exactly `5.0 / 6.0` for relevant, irrelevant, relevant).
pub fn average_precision(relevant: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut hi, mut lo) = (0usize, 0.0f64, 0.0f64);
    for (r, rel) in relevant.into_iter().enumerate() {
        if rel {
            hits += 1;
            let (h, rank) = (hits as f64, (r + 1) as f64);
            let q = h / rank;
            let q_err = (-q).mul_add(rank, h) / rank;
            let s = hi + q;
            let bb = s - hi;
            lo += (hi - (s - bb)) + (q - bb) + q_err;
            hi = s;
        }
    }
    (hits > 0).then(|| (hi + lo) / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// AP per query, `None` when the query had no relevant item.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    pub k: usize,
    pub n_queries: usize,
    pub n_database: usize,
    /// Queries excluded for lack of relevant items.
    pub skipped: usize,
    pub elapsed: Duration,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fghash-eval v1\nk={}\nqueries={}\ndatabase={}\nskipped={}\nmap={:.12}\nseconds={:.6}\n",
            self.k,
            self.n_queries,
            self.n_database,
            self.skipped,
            self.map,
            self.elapsed.as_secs_f64()
        );
        for (i, ap) in self.ap.iter().enumerate() {
            match ap {
                Some(v) => s.push_str(&format!("ap {i} {v:.12}\n")),
                None => s.push_str(&format!("ap {i} none\n")),
            }
        }
        s
    }
}

/// `Instant::now` panics on bare wasm32, so timing is skipped there.
fn clock() -> Option<Instant> {
    if cfg!(target_arch = "wasm32") {
        None
    } else {
        Some(Instant::now())
    }
}

/// mAP of `queries` against `index`; with `exclude_self` query `i` skips database id `i`.
pub fn mean_average_precision(
    queries: &[BinaryCode],
    query_labels: &[usize],
    index: &HashIndex,
    exclude_self: bool,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Usage("mAP over an empty query set".into()));
    }
    if queries.len() != query_labels.len() {
        return Err(Error::dim(
            "mean_average_precision",
            &[queries.len()],
            &[query_labels.len()],
        ));
    }
    let start = clock();
    let mut ap = Vec::with_capacity(queries.len());
    for (qi, (q, &ql)) in queries.iter().zip(query_labels).enumerate() {
        let ranking = rank_database(q, index)?;
        let rel = ranking
            .iter()
            .filter(|&&(id, _)| !(exclude_self && id == qi))
            .map(|&(id, _)| index.labels[id] == ql);
        ap.push(average_precision(rel));
    }
    let scored: Vec<f64> = ap.iter().flatten().copied().collect();
    let skipped = ap.len() - scored.len();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        ap,
        map,
        k: queries[0].k,
        n_queries: queries.len(),
        n_database: index.len(),
        skipped,
        elapsed: start.map_or(Duration::ZERO, |t| t.elapsed()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(k: usize, rng: &mut ChaCha8Rng) -> BinaryCode {
        let s: Vec<i8> = (0..k).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        BinaryCode::from_signs(&s).unwrap()
    }

    fn naive_hamming(a: &BinaryCode, b: &BinaryCode) -> u32 {
        a.to_signs()
            .iter()
            .zip(b.to_signs())
            .filter(|(x, y)| **x != *y)
            .count() as u32
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&[0.2, -3.0, 0.0]).to_signs(), vec![1, -1, 1]);
        let h = [0.5, -0.1, 2.0, -7.0];
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        let (a, b) = (encode(&h), encode(&neg));
        assert_eq!(hamming_distance(&a, &b).unwrap(), 4);
    }

    #[test]
    fn hamming_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_code(48, &mut rng);
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        let flipped: Vec<i8> = a.to_signs().iter().map(|s| -s).collect();
        let b = BinaryCode::from_signs(&flipped).unwrap();
        assert_eq!(hamming_distance(&a, &b).unwrap(), 48);
        assert!(matches!(
            hamming_distance(&a, &random_code(12, &mut rng)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn packed_hamming_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [12, 24, 32, 48, 64, 65, 130] {
            for _ in 0..1000 {
                let (a, b) = (random_code(k, &mut rng), random_code(k, &mut rng));
                assert_eq!(hamming_distance(&a, &b).unwrap(), naive_hamming(&a, &b));
            }
        }
    }

    #[test]
    fn from_words_rejects_high_bits() {
        assert!(BinaryCode::from_words(12, vec![1 << 12]).is_err());
        assert!(BinaryCode::from_words(12, vec![0xfff]).is_ok());
        assert!(BinaryCode::from_words(12, vec![0, 0]).is_err());
    }

    #[test]
    fn ranking_examples() {
        let q = BinaryCode::from_signs(&[1, 1, 1, 1]).unwrap();
        let far = BinaryCode::from_signs(&[-1, -1, -1, 1]).unwrap();
        let near = BinaryCode::from_signs(&[1, -1, 1, 1]).unwrap();
        let idx = HashIndex::new(vec![far, q.clone(), near, q.clone()], vec![0; 4]).unwrap();
        let r = rank_database(&q, &idx).unwrap();
        assert_eq!(r, vec![(1, 0), (3, 0), (2, 1), (0, 3)]);
    }

    #[test]
    fn ranking_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let k = [12, 24, 32, 48][rng.gen_range(0..4)];
            let n = rng.gen_range(1..60);
            let codes: Vec<BinaryCode> = (0..n).map(|_| random_code(k, &mut rng)).collect();
            let idx = HashIndex::new(codes.clone(), vec![0; n]).unwrap();
            let q = random_code(k, &mut rng);
            let mut oracle: Vec<(usize, u32)> = codes
                .iter()
                .enumerate()
                .map(|(i, c)| (i, naive_hamming(&q, c)))
                .collect();
            oracle.sort_by_key(|&(i, d)| (d, i));
            assert_eq!(rank_database(&q, &idx).unwrap(), oracle);
        }
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision([true, true, true]), Some(1.0));
        assert_eq!(average_precision([false, true]), Some(0.5));
        assert_eq!(average_precision([true, false, true]), Some(5.0 / 6.0));
        assert_eq!(average_precision([false, false]), None);
    }

    fn naive_map(q: &[BinaryCode], ql: &[usize], db: &[BinaryCode], dl: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (a, &la) in q.iter().zip(ql) {
            let mut d: Vec<(u32, usize)> = db
                .iter()
                .enumerate()
                .map(|(i, b)| (naive_hamming(a, b), i))
                .collect();
            d.sort();
            let r_total = dl.iter().filter(|&&l| l == la).count();
            if r_total == 0 {
                continue;
            }
            let mut ap = 0.0;
            for (pos, &(_, i)) in d.iter().enumerate() {
                if dl[i] == la {
                    let hits = d[..=pos].iter().filter(|&&(_, j)| dl[j] == la).count();
                    ap += hits as f64 / (pos + 1) as f64;
                }
            }
            total += ap / r_total as f64;
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn map_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 12;
        let db: Vec<BinaryCode> = (0..200).map(|_| random_code(k, &mut rng)).collect();
        let dl: Vec<usize> = (0..200).map(|_| rng.gen_range(0..5)).collect();
        let q: Vec<BinaryCode> = (0..50).map(|_| random_code(k, &mut rng)).collect();
        let ql: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
        let idx = HashIndex::new(db.clone(), dl.clone()).unwrap();
        let rep = mean_average_precision(&q, &ql, &idx, false).unwrap();
        assert!((rep.map - naive_map(&q, &ql, &db, &dl)).abs() < 1e-12);
        let mean = rep.ap.iter().flatten().sum::<f64>() / rep.ap.len() as f64;
        assert!((rep.map - mean).abs() < 1e-12);
    }

    #[test]
    fn map_single_and_duplicated_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let db: Vec<BinaryCode> = (0..30).map(|_| random_code(24, &mut rng)).collect();
        let dl: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let idx = HashIndex::new(db, dl).unwrap();
        let q = vec![random_code(24, &mut rng), random_code(24, &mut rng)];
        let one = mean_average_precision(&q[..1], &[1], &idx, false).unwrap();
        assert_eq!(one.map, one.ap[0].unwrap());
        let base = mean_average_precision(&q, &[1, 2], &idx, false).unwrap();
        let dup =
            mean_average_precision(&[q.clone(), q].concat(), &[1, 2, 1, 2], &idx, false).unwrap();
        assert!((base.map - dup.map).abs() < 1e-15);
        assert!(matches!(
            mean_average_precision(&[], &[], &idx, false),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn perfect_codes_give_map_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let class_codes: Vec<BinaryCode> = (0..6).map(|_| random_code(32, &mut rng)).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let codes: Vec<BinaryCode> = labels.iter().map(|&l| class_codes[l].clone()).collect();
        let idx = HashIndex::new(codes.clone(), labels.clone()).unwrap();
        assert_eq!(
            mean_average_precision(&codes, &labels, &idx, false)
                .unwrap()
                .map,
            1.0
        );
    }

    #[test]
    fn self_exclusion_drops_own_entry() {
        let a = BinaryCode::from_signs(&[1, 1]).unwrap();
        let b = BinaryCode::from_signs(&[-1, -1]).unwrap();
        let idx = HashIndex::new(vec![a.clone(), b.clone()], vec![0, 0]).unwrap();
        let with = mean_average_precision(&[a.clone()], &[0], &idx, false).unwrap();
        assert_eq!(with.map, 1.0);
        let idx = HashIndex::new(vec![a.clone(), b], vec![0, 1]).unwrap();
        let without = mean_average_precision(&[a], &[0], &idx, true).unwrap();
        assert_eq!(without.skipped, 1);
    }

    proptest! {
        #[test]
        fn pack_round_trip(signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..150)) {
            let c = BinaryCode::from_signs(&signs).unwrap();
            prop_assert_eq!(c.to_signs(), signs.clone());
            prop_assert!(BinaryCode::from_words(c.k(), c.words().to_vec()).is_ok());
        }

        #[test]
        fn ranking_is_permutation_and_ap_bounded(seed in any::<u64>(), n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<BinaryCode> = (0..n).map(|_| random_code(12, &mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let idx = HashIndex::new(codes, labels.clone()).unwrap();
            let q = random_code(12, &mut rng);
            let r = rank_database(&q, &idx).unwrap();
            let mut ids: Vec<usize> = r.iter().map(|p| p.0).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
            let rel: Vec<bool> = r.iter().map(|&(id, _)| labels[id] == 0).collect();
            if let Some(ap) = average_precision(rel.iter().copied()) {
                prop_assert!((0.0..=1.0).contains(&ap));
                let first_irrel = rel.iter().position(|&x| !x).unwrap_or(rel.len());
                let all_first = rel[first_irrel..].iter().all(|&x| !x);
                prop_assert_eq!(ap == 1.0, all_first);
            }
        }
    }
}
