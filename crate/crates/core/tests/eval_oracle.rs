//! Metrics against recursive, tabulated and Monte Carlo references.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgcb_core::align::{Provenance, TargetEntry, TargetSet};
use sgcb_core::eval::{cluster_metrics, corpus_error_rate, edit_distance, frame_accuracy};

fn recursive_distance(a: &[u16], b: &[u16], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let (ha, ta) = (a[0], &a[1..]);
    let (hb, tb) = (b[0], &b[1..]);
    let d = (recursive_distance(ta, tb, memo) + usize::from(ha != hb))
        .min(recursive_distance(ta, b, memo) + 1)
        .min(recursive_distance(a, tb, memo) + 1);
    memo.insert((a.len(), b.len()), d);
    d
}

#[test]
fn edit_distance_matches_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let a: Vec<u16> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u16> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..4)).collect();
        let want = recursive_distance(&a, &b, &mut HashMap::new());
        let got = edit_distance(&a, &b);
        assert_eq!(got.errors(), want, "{a:?} vs {b:?}");
        assert_eq!(got.reference_length, a.len());
        // Insertions minus deletions is fixed by the lengths.
        assert_eq!(got.insertions as i64 - got.deletions as i64, b.len() as i64 - a.len() as i64);
        assert_eq!(edit_distance(&b, &a).errors(), want);
    }
}

#[test]
fn corpus_rate_pools_counts() {
    let refs: [&[u16]; 3] = [&[1, 2, 3], &[4, 5], &[6]];
    let hyps: [&[u16]; 3] = [&[1, 3], &[4, 5, 7], &[6]];
    let total = corpus_error_rate(refs.iter().copied().zip(hyps.iter().copied()));
    assert_eq!(total.errors(), 2);
    assert_eq!(total.reference_length, 6);
    assert!((total.rate - 2.0 / 6.0).abs() < 1e-15);
}

#[test]
fn cluster_metrics_match_contingency_tables() {
    // Purity and arithmetic-normalised NMI computed separately from the
    // contingency tables (and cross-checked against scikit-learn's
    // normalized_mutual_info_score).
    let cases: [(&[u16], &[u16], f64, f64); 3] = [
        (&[0, 0, 0, 1], &[0, 0, 1, 1], 0.75, 0.3437110184854508),
        (&[0, 0, 1, 1, 2, 2, 2, 3], &[5, 5, 5, 6, 6, 7, 7, 7], 0.75, 0.5577965290899926),
        (&[1, 1, 1, 2, 2, 2, 3, 3, 3], &[1, 1, 2, 2, 2, 3, 3, 3, 1], 2.0 / 3.0, 0.420619835714305),
    ];
    for (labels, truth, purity, nmi) in cases {
        let m = cluster_metrics(labels, truth).unwrap();
        assert!((m.purity - purity).abs() < 1e-12);
        assert!((m.nmi - nmi).abs() < 1e-12, "{} vs {nmi}", m.nmi);
    }
    let single = cluster_metrics(&[4; 6], &[0, 1, 2, 0, 1, 2]).unwrap();
    assert_eq!(single.nmi, 0.0);
    let same = cluster_metrics(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap();
    assert_eq!((same.purity, same.nmi), (1.0, 1.0));
}

fn random_set(provenance: Provenance, seed: u64) -> (TargetSet, BTreeMap<String, Vec<u16>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut truth = BTreeMap::new();
    for u in 0..100 {
        let id = format!("utt{u:03}");
        let labels: Vec<u16> = (0..100).map(|_| rng.gen_range(0..12)).collect();
        truth.insert(id.clone(), (0..100).map(|_| rng.gen_range(0..12)).collect());
        entries.push(TargetEntry { id, labels });
    }
    let mut set = TargetSet::new(12, provenance);
    set.entries = entries;
    (set, truth)
}

#[test]
fn random_phoneme_labels_score_chance() {
    let (set, truth) = random_set(Provenance::PhonemeAlign, 3);
    let acc = frame_accuracy(&set, &truth).unwrap();
    let p: f64 = 1.0 / 12.0;
    let se = (p * (1.0 - p) / 10_000.0).sqrt();
    assert!((acc - p).abs() < 3.0 * se, "accuracy {acc}");
}

#[test]
fn relabelled_clusters_score_one() {
    let (_, truth) = random_set(Provenance::RawKmeans, 4);
    let perm = [7u16, 3, 11, 0, 5, 9, 1, 2, 10, 4, 8, 6];
    let entries = truth
        .iter()
        .map(|(id, t)| TargetEntry {
            id: id.clone(),
            labels: t.iter().map(|&l| perm[l as usize]).collect(),
        })
        .collect();
    let mut set = TargetSet::new(12, Provenance::CtcKmeans);
    set.entries = entries;
    assert_eq!(frame_accuracy(&set, &truth).unwrap(), 1.0);
}
