use std::collections::HashSet;
use std::f64::consts::PI;

use dapperfl_core::data::{partition_clients, synth_domains, ShiftSpec, SynthSpec};

fn spec() -> SynthSpec {
    SynthSpec::shifted(4, 3, 6, 200, 1.0, 9)
}

#[test]
fn partition_is_disjoint_and_domain_exclusive() {
    let domains = synth_domains(&spec(), 5).unwrap();
    let pools: Vec<_> = domains.iter().map(|d| d.train.clone()).collect();
    let clients = partition_clients(&pools, 10, 0.2, 3).unwrap();
    assert_eq!(clients.len(), 10);
    let covered: HashSet<usize> = clients.iter().map(|c| c.domain_id).collect();
    assert_eq!(covered.len(), 4, "every domain has a client");
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for c in &clients {
        let pool = &pools[c.domain_id];
        assert_eq!(c.len(), (0.2 * pool.len() as f64).round() as usize);
        for (r, &i) in c.indices.iter().enumerate() {
            assert!(seen.insert((c.domain_id, i)), "sample {i} of domain {} reused", c.domain_id);
            let at = pool.indices.iter().position(|&p| p == i).unwrap();
            assert_eq!(c.labels[r], pool.labels[at]);
            assert_eq!(c.features.row(r), pool.features.row(at));
        }
    }
}

#[test]
fn oversubscribed_partition_is_rejected() {
    let domains = synth_domains(&spec(), 5).unwrap();
    let pools: Vec<_> = domains.iter().map(|d| d.train.clone()).collect();
    assert!(partition_clients(&pools, 30, 0.2, 3).is_err());
    assert!(partition_clients(&pools, 3, 0.2, 3).is_err());
}

#[test]
fn train_and_test_pools_split_each_domain() {
    for d in synth_domains(&spec(), 1).unwrap() {
        let train: HashSet<usize> = d.train.indices.iter().copied().collect();
        let test: HashSet<usize> = d.test.indices.iter().copied().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 200);
        // Stratified: each class contributes round(0.2 * its size) test samples.
        let counts = d.test.class_counts();
        let full: Vec<usize> = d
            .train
            .class_counts()
            .iter()
            .zip(&counts)
            .map(|(a, b)| a + b)
            .collect();
        for (t, f) in counts.iter().zip(full) {
            assert_eq!(*t, (0.2 * f as f64).round() as usize);
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = synth_domains(&spec(), 42).unwrap();
    let b = synth_domains(&spec(), 42).unwrap();
    let c = synth_domains(&spec(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn rotation_by_pi_negates_the_features() {
    let base = SynthSpec::unshifted(2, 3, 4, 50);
    let mut rotated = base.clone();
    rotated.shifts[1].rotation = PI;
    let a = synth_domains(&base, 7).unwrap();
    let b = synth_domains(&rotated, 7).unwrap();
    assert_eq!(a[0], b[0]);
    for (x, y) in a[1].train.features.data().iter().zip(b[1].train.features.data()) {
        assert!((x + y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn identity_shifts_share_one_distribution() {
    let spec = SynthSpec::unshifted(2, 2, 3, 4000);
    let d = synth_domains(&spec, 3).unwrap();
    let mean = |ds: &dapperfl_core::DomainDataset, class: usize| {
        let rows: Vec<usize> = (0..ds.len()).filter(|&r| ds.labels[r] == class).collect();
        let mut m = vec![0.0; 3];
        for &r in &rows {
            for (a, v) in m.iter_mut().zip(ds.features.row(r)) {
                *a += v / rows.len() as f64;
            }
        }
        m
    };
    for class in 0..2 {
        let (m0, m1) = (mean(&d[0].train, class), mean(&d[1].train, class));
        for (a, b) in m0.iter().zip(&m1) {
            // Standard error of a difference of two means over ~1600 draws.
            assert!((a - b).abs() < 0.15, "class {class}: {a} vs {b}");
        }
    }
}

#[test]
fn shifted_domains_differ_in_distribution() {
    let d = synth_domains(&SynthSpec::shifted(2, 2, 4, 2000, 1.5, 4), 3).unwrap();
    let col_mean = |ds: &dapperfl_core::DomainDataset| {
        let n = ds.len() as f64;
        (0..4)
            .map(|j| (0..ds.len()).map(|r| ds.features.row(r)[j]).sum::<f64>() / n)
            .collect::<Vec<_>>()
    };
    let gap: f64 = col_mean(&d[0].train)
        .iter()
        .zip(col_mean(&d[1].train))
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(gap > 0.5, "{gap}");
}

#[test]
fn standardization_centers_pooled_train_features() {
    let mut s = spec();
    s.standardize = true;
    let d = synth_domains(&s, 8).unwrap();
    let dims = 6;
    let mut sum = vec![0.0; dims];
    let mut sq = vec![0.0; dims];
    let mut n = 0.0;
    for dom in &d {
        for r in 0..dom.train.len() {
            for (j, v) in dom.train.features.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    for j in 0..dims {
        let m = sum[j] / n;
        assert!(m.abs() < 1e-9);
        assert!((sq[j] / n - m * m - 1.0).abs() < 1e-9);
    }
}

#[test]
fn invalid_shift_is_rejected() {
    let mut s = spec();
    s.shifts[0] = ShiftSpec::identity(5, 3);
    assert!(synth_domains(&s, 0).is_err());
}
