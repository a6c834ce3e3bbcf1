//! MinHash signatures, LSH banding and corpus-level fuzzy deduplication.

use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use unicode_script::{Script, UnicodeScript};

use crate::corpus::Document;
use crate::hashing::{hash_str, mix64, SplitMix64};

#[derive(Debug, Error, PartialEq)]
pub enum DedupError {
    #[error("shingle size must be >= 1")]
    ZeroShingle,
    #[error("num_perm must be >= 1")]
    ZeroPerm,
    #[error("signature mismatch: num_perm {a_perm} vs {b_perm}, seed {a_seed} vs {b_seed}")]
    SignatureMismatch {
        a_perm: usize,
        b_perm: usize,
        a_seed: u64,
        b_seed: u64,
    },
    #[error("bands ({bands}) x rows ({rows}) != num_perm ({num_perm})")]
    BandShape {
        bands: usize,
        rows: usize,
        num_perm: usize,
    },
    #[error("threshold must be in (0, 1], got {0}")]
    Threshold(f64),
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShingleUnit {
    #[default]
    Char,
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShingleSet {
    /// Sorted, distinct shingle hashes.
    pub hashes: Vec<u64>,
    pub n: usize,
    pub unit: ShingleUnit,
}

impl ShingleSet {
    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    /// Exact Jaccard similarity; two empty sets are identical (1.0).
    pub fn jaccard(&self, other: &ShingleSet) -> f64 {
        exact_jaccard(&self.hashes, &other.hashes)
    }
}

/// Jaccard of two sorted, deduplicated slices.
pub fn exact_jaccard(a: &[u64], b: &[u64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// NFC, lowercase Latin letters, collapse whitespace runs to one space, trim.
pub fn normalize_for_shingling(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfc() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        if c.script() == Script::Latin {
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

pub fn shingle(text: &str, n: usize, unit: ShingleUnit) -> Result<ShingleSet, DedupError> {
    if n == 0 {
        return Err(DedupError::ZeroShingle);
    }
    let norm = normalize_for_shingling(text);
    let mut hashes = Vec::new();
    if !norm.is_empty() {
        match unit {
            ShingleUnit::Char => {
                let bounds: Vec<usize> = norm
                    .char_indices()
                    .map(|(i, _)| i)
                    .chain(std::iter::once(norm.len()))
                    .collect();
                let chars = bounds.len() - 1;
                if chars <= n {
                    hashes.push(hash_str(&norm, 0));
                } else {
                    for start in 0..=(chars - n) {
                        hashes.push(hash_str(&norm[bounds[start]..bounds[start + n]], 0));
                    }
                }
            }
            ShingleUnit::Word => {
                let words: Vec<&str> = norm.split(' ').collect();
                if words.len() <= n {
                    hashes.push(hash_str(&norm, 0));
                } else {
                    for w in words.windows(n) {
                        hashes.push(hash_str(&w.join(" "), 0));
                    }
                }
            }
        }
    }
    hashes.sort_unstable();
    hashes.dedup();
    Ok(ShingleSet { hashes, n, unit })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub mins: Vec<u64>,
    pub seed: u64,
}

impl MinHashSignature {
    pub fn num_perm(&self) -> usize {
        self.mins.len()
    }

    /// Signature assigned to an empty shingle set.
    pub fn sentinel(num_perm: usize, seed: u64) -> Self {
        MinHashSignature {
            mins: vec![u64::MAX; num_perm],
            seed,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.mins.iter().all(|&m| m == u64::MAX)
    }
}

/// Per-permutation keys; permutation `i` is `x -> mix64(x ^ keys[i])`.
fn permutation_keys(num_perm: usize, seed: u64) -> Vec<u64> {
    let mut g = SplitMix64::new(seed);
    (0..num_perm).map(|_| g.next_u64()).collect()
}

pub fn minhash(shingles: &ShingleSet, num_perm: usize, seed: u64) -> Result<MinHashSignature, DedupError> {
    minhash_hashes(&shingles.hashes, num_perm, seed)
}

/// MinHash over raw 64-bit element hashes.
pub fn minhash_hashes(hashes: &[u64], num_perm: usize, seed: u64) -> Result<MinHashSignature, DedupError> {
    if num_perm == 0 {
        return Err(DedupError::ZeroPerm);
    }
    let keys = permutation_keys(num_perm, seed);
    Ok(minhash_with_keys(hashes, &keys, seed))
}

fn minhash_with_keys(hashes: &[u64], keys: &[u64], seed: u64) -> MinHashSignature {
    let mut mins = vec![u64::MAX; keys.len()];
    for &h in hashes {
        for (m, &k) in mins.iter_mut().zip(keys) {
            let v = mix64(h ^ k);
            if v < *m {
                *m = v;
            }
        }
    }
    MinHashSignature { mins, seed }
}

fn check_compatible(a: &MinHashSignature, b: &MinHashSignature) -> Result<(), DedupError> {
    if a.num_perm() != b.num_perm() || a.seed != b.seed {
        return Err(DedupError::SignatureMismatch {
            a_perm: a.num_perm(),
            b_perm: b.num_perm(),
            a_seed: a.seed,
            b_seed: b.seed,
        });
    }
    Ok(())
}

pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<f64, DedupError> {
    check_compatible(a, b)?;
    if a.num_perm() == 0 {
        return Err(DedupError::ZeroPerm);
    }
    let matching = a.mins.iter().zip(&b.mins).filter(|(x, y)| x == y).count();
    Ok(matching as f64 / a.num_perm() as f64)
}

/// Index pairs `(i, j)`, `i < j`, whose signatures agree on every row of some band.
pub fn lsh_candidate_indices(
    sigs: &[&MinHashSignature],
    bands: usize,
    rows: usize,
) -> Result<BTreeSet<(usize, usize)>, DedupError> {
    let Some(first) = sigs.first() else {
        return Ok(BTreeSet::new());
    };
    let num_perm = first.num_perm();
    if bands * rows != num_perm || bands == 0 {
        return Err(DedupError::BandShape { bands, rows, num_perm });
    }
    for s in sigs {
        check_compatible(first, s)?;
    }
    let band_pairs: Vec<Vec<(usize, usize)>> = (0..bands)
        .into_par_iter()
        .map(|b| {
            let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
            for (i, s) in sigs.iter().enumerate() {
                buckets.entry(&s.mins[b * rows..(b + 1) * rows]).or_default().push(i);
            }
            let mut pairs = Vec::new();
            for members in buckets.values() {
                for (x, &i) in members.iter().enumerate() {
                    for &j in &members[x + 1..] {
                        pairs.push((i.min(j), i.max(j)));
                    }
                }
            }
            pairs
        })
        .collect();
    Ok(band_pairs.into_iter().flatten().collect())
}

/// Candidate id pairs; each pair is ordered lexicographically.
pub fn lsh_candidates(
    sigs: &[(String, MinHashSignature)],
    bands: usize,
    rows: usize,
) -> Result<BTreeSet<(String, String)>, DedupError> {
    let refs: Vec<&MinHashSignature> = sigs.iter().map(|(_, s)| s).collect();
    let idx = lsh_candidate_indices(&refs, bands, rows)?;
    Ok(idx
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&sigs[i].0, &sigs[j].0);
            if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub ngram: usize,
    pub unit: ShingleUnit,
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            ngram: 5,
            unit: ShingleUnit::Char,
            num_perm: 256,
            bands: 32,
            rows: 8,
            threshold: 0.7,
            seed: 0x7970_686f_6f6e_0002,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<(), DedupError> {
        if self.ngram == 0 {
            return Err(DedupError::ZeroShingle);
        }
        if self.num_perm == 0 {
            return Err(DedupError::ZeroPerm);
        }
        if self.bands == 0 || self.bands * self.rows != self.num_perm {
            return Err(DedupError::BandShape {
                bands: self.bands,
                rows: self.rows,
                num_perm: self.num_perm,
            });
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(DedupError::Threshold(self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub representative: String,
    pub duplicates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept_ids: Vec<String>,
    pub clusters: Vec<Cluster>,
    pub candidate_pairs: usize,
    pub verified_pairs: usize,
    pub params: DedupConfig,
}

impl DedupReport {
    pub fn duplicate_count(&self) -> usize {
        self.clusters.iter().map(|c| c.duplicates.len()).sum()
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    /// Roots at the smaller index so the earliest document represents its component.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Signatures for every document, computed in parallel; output order matches input.
pub fn signatures(docs: &[Document], cfg: &DedupConfig) -> Result<Vec<MinHashSignature>, DedupError> {
    cfg.validate()?;
    let keys = permutation_keys(cfg.num_perm, cfg.seed);
    docs.par_iter()
        .map(|d| {
            let set = shingle(&d.text, cfg.ngram, cfg.unit)?;
            Ok(minhash_with_keys(&set.hashes, &keys, cfg.seed))
        })
        .collect()
}

/// LSH candidates that pass the Jaccard-estimate threshold, as index pairs.
pub fn verified_pairs(
    sigs: &[MinHashSignature],
    cfg: &DedupConfig,
) -> Result<(usize, Vec<(usize, usize)>), DedupError> {
    let refs: Vec<&MinHashSignature> = sigs.iter().collect();
    let candidates = lsh_candidate_indices(&refs, cfg.bands, cfg.rows)?;
    let mut verified = Vec::new();
    for &(i, j) in &candidates {
        if estimate_jaccard(&sigs[i], &sigs[j])? >= cfg.threshold {
            verified.push((i, j));
        }
    }
    Ok((candidates.len(), verified))
}

/// Clusters near-duplicates and keeps the earliest document of each cluster.
/// Returns the report and the surviving documents in input order.
pub fn dedup_corpus(docs: Vec<Document>, cfg: &DedupConfig) -> Result<(DedupReport, Vec<Document>), DedupError> {
    cfg.validate()?;
    let mut ids = HashSet::new();
    for d in &docs {
        if !ids.insert(d.id.as_str()) {
            return Err(DedupError::DuplicateId(d.id.clone()));
        }
    }
    let sigs = signatures(&docs, cfg)?;
    let (candidate_pairs, verified) = verified_pairs(&sigs, cfg)?;

    let mut uf = UnionFind((0..docs.len()).collect());
    for &(i, j) in &verified {
        uf.union(i, j);
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); docs.len()];
    for i in 0..docs.len() {
        let r = uf.find(i);
        if r != i {
            members[r].push(i);
        }
    }
    let clusters = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(r, m)| Cluster {
            representative: docs[r].id.clone(),
            duplicates: m.iter().map(|&i| docs[i].id.clone()).collect(),
        })
        .collect();
    let kept: Vec<Document> = docs
        .into_iter()
        .enumerate()
        .filter(|(i, _)| uf.find(*i) == *i)
        .map(|(_, d)| d)
        .collect();
    let report = DedupReport {
        kept_ids: kept.iter().map(|d| d.id.clone()).collect(),
        clusters,
        candidate_pairs,
        verified_pairs: verified.len(),
        params: cfg.clone(),
    };
    Ok((report, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Lang;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text, "t", Lang::En)
    }

    fn random_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| (0..rng.random_range(3..9)).map(|_| rng.random_range(b'a'..=b'z') as char).collect())
            .collect()
    }

    #[test]
    fn shingle_examples() {
        let s = shingle("abab", 2, ShingleUnit::Char).unwrap();
        assert_eq!(s.len(), 2);
        let mut expected = vec![hash_str("ab", 0), hash_str("ba", 0)];
        expected.sort_unstable();
        assert_eq!(s.hashes, expected);
        assert_eq!(shingle("same text", 3, ShingleUnit::Char), shingle("same text", 3, ShingleUnit::Char));
        let short = shingle("a", 3, ShingleUnit::Char).unwrap();
        assert_eq!(short.hashes, vec![hash_str("a", 0)]);
        assert_eq!(shingle("x", 0, ShingleUnit::Char), Err(DedupError::ZeroShingle));
    }

    #[test]
    fn normalization_collapses_case_and_space() {
        assert_eq!(normalize_for_shingling("  Hello \n\t WORLD  "), "hello world");
        assert_eq!(normalize_for_shingling("ΑΒ กข"), "ΑΒ กข");
        let w = shingle("The quick  brown fox", 2, ShingleUnit::Word).unwrap();
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn minhash_determinism_and_sentinel() {
        let s = shingle("some document text here", 5, ShingleUnit::Char).unwrap();
        assert_eq!(minhash(&s, 64, 7).unwrap(), minhash(&s, 64, 7).unwrap());
        assert_ne!(minhash(&s, 64, 7).unwrap(), minhash(&s, 64, 8).unwrap());
        let empty = shingle("   ", 5, ShingleUnit::Char).unwrap();
        assert!(minhash(&empty, 16, 1).unwrap().is_sentinel());
        assert_eq!(minhash(&s, 0, 1), Err(DedupError::ZeroPerm));
    }

    #[test]
    fn disjoint_sets_rarely_share_positions() {
        // Monte Carlo: disjoint sets collide only through hash coincidences.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut matches = 0usize;
        for seed in 0..50 {
            let a: Vec<u64> = (0..200).map(|_| rng.random()).collect();
            let b: Vec<u64> = (0..200).map(|_| rng.random()).collect();
            let sa = minhash_hashes(&a, 128, seed).unwrap();
            let sb = minhash_hashes(&b, 128, seed).unwrap();
            matches += sa.mins.iter().zip(&sb.mins).filter(|(x, y)| x == y).count();
        }
        assert_eq!(matches, 0);
    }

    #[test]
    fn estimate_examples() {
        let a: Vec<u64> = (1..=100).map(|x| hash_str(&x.to_string(), 0)).collect();
        let mut a_sorted = a.clone();
        a_sorted.sort_unstable();
        let b: Vec<u64> = (1..=50).map(|x| hash_str(&x.to_string(), 0)).collect();
        let sa = minhash_hashes(&a, 256, 1).unwrap();
        assert_eq!(estimate_jaccard(&sa, &sa).unwrap(), 1.0);

        let mut within = 0;
        for seed in 0..100 {
            let sa = minhash_hashes(&a, 256, seed).unwrap();
            let sb = minhash_hashes(&b, 256, seed).unwrap();
            if (estimate_jaccard(&sa, &sb).unwrap() - 0.5).abs() <= 0.10 {
                within += 1;
            }
        }
        assert!(within >= 95, "{within}/100 within tolerance");

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<u64> = (0..1000).map(|_| rng.random()).collect();
        let y: Vec<u64> = (0..1000).map(|_| rng.random()).collect();
        let est = estimate_jaccard(&minhash_hashes(&x, 256, 5).unwrap(), &minhash_hashes(&y, 256, 5).unwrap()).unwrap();
        assert!(est <= 0.05);

        let other = minhash_hashes(&x, 128, 5).unwrap();
        assert!(matches!(
            estimate_jaccard(&sa, &other),
            Err(DedupError::SignatureMismatch { .. })
        ));
    }

    #[test]
    fn lsh_examples() {
        let set = shingle("identical text body for both", 5, ShingleUnit::Char).unwrap();
        let sig = minhash(&set, 256, 1).unwrap();
        let other = minhash(&shingle("completely unrelated words", 5, ShingleUnit::Char).unwrap(), 256, 1).unwrap();
        let sigs = vec![
            ("b".to_string(), sig.clone()),
            ("a".to_string(), sig.clone()),
            ("c".to_string(), other),
        ];
        let pairs = lsh_candidates(&sigs, 32, 8).unwrap();
        assert!(pairs.contains(&("a".to_string(), "b".to_string())));
        assert_eq!(pairs.len(), 1);
        assert!(matches!(lsh_candidates(&sigs, 30, 8), Err(DedupError::BandShape { .. })));
    }

    #[test]
    fn lsh_recalls_planted_near_duplicates() {
        // Oracle: brute-force exact Jaccard over all planted pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut sigs = Vec::new();
        let mut truth = Vec::new();
        for p in 0..100 {
            let base = random_words(&mut rng, 120);
            let mut copy = base.clone();
            for k in 0..3 {
                let pos = rng.random_range(0..copy.len());
                copy[pos] = format!("zz{p}x{k}");
            }
            let sa = shingle(&base.join(" "), 5, ShingleUnit::Char).unwrap();
            let sb = shingle(&copy.join(" "), 5, ShingleUnit::Char).unwrap();
            truth.push(sa.jaccard(&sb));
            sigs.push((format!("{p}a"), minhash(&sa, 256, 9).unwrap()));
            sigs.push((format!("{p}b"), minhash(&sb, 256, 9).unwrap()));
        }
        let pairs = lsh_candidates(&sigs, 32, 8).unwrap();
        let (mut eligible, mut hit) = (0, 0);
        for (p, j) in truth.iter().enumerate() {
            if *j >= 0.8 {
                eligible += 1;
                if pairs.contains(&(format!("{p}a"), format!("{p}b"))) {
                    hit += 1;
                }
            }
        }
        assert!(eligible > 50);
        assert!(hit as f64 >= 0.95 * eligible as f64, "{hit}/{eligible}");
    }

    #[test]
    fn dedup_examples() {
        let text = "the same paragraph repeated across three crawled pages verbatim";
        let docs = vec![doc("a", text), doc("b", text), doc("c", text)];
        let (report, kept) = dedup_corpus(docs, &DedupConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.kept_ids, vec!["a"]);
        assert_eq!(report.clusters.len(), 1);
        assert_eq!(report.clusters[0].duplicates, vec!["b", "c"]);
    }

    #[test]
    fn dedup_distinct_docs_all_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<_> = (0..200).map(|i| doc(&i.to_string(), &random_words(&mut rng, 60).join(" "))).collect();
        let cfg = DedupConfig::default();
        // Brute-force oracle: no pair reaches the threshold.
        let sets: Vec<_> = docs.iter().map(|d| shingle(&d.text, 5, ShingleUnit::Char).unwrap()).collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].jaccard(&sets[j]) < cfg.threshold);
            }
        }
        let (report, kept) = dedup_corpus(docs, &cfg).unwrap();
        assert_eq!(kept.len(), 200);
        assert!(report.clusters.is_empty());
    }

    #[test]
    fn one_word_edit_is_deduplicated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let words = random_words(&mut rng, 200);
        let mut edited = words.clone();
        edited[100] = "replacement".to_string();
        let exact = shingle(&words.join(" "), 5, ShingleUnit::Char)
            .unwrap()
            .jaccard(&shingle(&edited.join(" "), 5, ShingleUnit::Char).unwrap());
        assert!(exact > 0.95, "exact jaccard {exact}");
        let docs = vec![doc("orig", &words.join(" ")), doc("edit", &edited.join(" "))];
        let (report, kept) = dedup_corpus(docs, &DedupConfig::default()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.clusters[0].representative, "orig");
    }

    #[test]
    fn dedup_rejects_bad_config_and_dup_ids() {
        let cfg = DedupConfig {
            threshold: 0.0,
            ..Default::default()
        };
        assert_eq!(dedup_corpus(vec![], &cfg).unwrap_err(), DedupError::Threshold(0.0));
        let docs = vec![doc("a", "x"), doc("a", "y")];
        assert!(matches!(
            dedup_corpus(docs, &DedupConfig::default()),
            Err(DedupError::DuplicateId(_))
        ));
    }

    #[test]
    fn dedup_is_deterministic_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut docs = Vec::new();
        for i in 0..60 {
            let w = random_words(&mut rng, 80).join(" ");
            docs.push(doc(&format!("{i}"), &w));
            if i % 3 == 0 {
                docs.push(doc(&format!("{i}-copy"), &w));
            }
        }
        let n = docs.len();
        let (r1, _) = dedup_corpus(docs.clone(), &DedupConfig::default()).unwrap();
        let (r2, _) = dedup_corpus(docs, &DedupConfig::default()).unwrap();
        assert_eq!(serde_json::to_vec(&r1).unwrap(), serde_json::to_vec(&r2).unwrap());
        assert_eq!(r1.kept_ids.len() + r1.duplicate_count(), n);
        assert!(r1.clusters.iter().all(|c| !c.duplicates.is_empty()));
    }
}
