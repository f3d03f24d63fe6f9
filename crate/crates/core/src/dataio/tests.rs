use std::io::Write;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    let mut f = std::fs::File::create(&p).unwrap();
    f.write_all(body.as_bytes()).unwrap();
    p
}

fn embedding_csv(rows: &[(&str, Vec<f64>)]) -> String {
    let mut s = String::from("label");
    for i in 0..SEMANTIC_DIM {
        s.push_str(&format!(",e{i}"));
    }
    s.push('\n');
    for (label, v) in rows {
        s.push_str(label);
        for x in v {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

#[test]
fn minimal_feature_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "f.csv",
        "id,label,domain,rows,cols,channels,f0,f1,f2,f3\n\
         a,cat,sketch,1,1,4,1,2,3,4\n\
         b,dog,photo,1,1,4,0.5,-1,2e-3,7\n",
    );
    let s = load_feature_table(&p).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].features, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s[1].domain, Domain::Photo);
    assert_eq!(s[1].features[2], 2e-3);
}

#[test]
fn short_row_is_parse_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "f.csv",
        "id,label,domain,rows,cols,channels,f0,f1,f2,f3\n\
         a,cat,sketch,1,1,4,1,2,3,4\n\
         b,dog,photo,1,1,4,1,2,3\n",
    );
    match load_feature_table(&p) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn grid_mismatch_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "f.csv",
        "id,label,domain,rows,cols,channels,f0,f1,f2,f3\na,cat,sketch,1,1,3,1,2,3,4\n",
    );
    assert!(matches!(load_feature_table(&p), Err(Error::Schema(_))));
}

#[test]
fn non_finite_feature_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(
        &dir,
        "f.csv",
        "id,label,domain,rows,cols,channels,f0,f1\na,cat,sketch,1,1,2,1,NaN\n",
    );
    assert!(matches!(load_feature_table(&p), Err(Error::Data(_))));
}

#[test]
fn missing_file_is_missing_input() {
    let r = load_feature_table(std::path::Path::new("/nonexistent/features.csv"));
    assert!(matches!(r, Err(Error::MissingInput(_))));
}

#[test]
fn feature_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<FeatureSample> = (0..100)
        .map(|i| FeatureSample {
            id: format!("s{i:03}"),
            label: format!("c{}", i % 7),
            domain: if i % 2 == 0 { Domain::Sketch } else { Domain::Photo },
            rows: 2,
            cols: 1,
            channels: 3,
            features: (0..6).map(|_| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-12..12)) - 0.5).collect(),
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.csv");
    write_feature_table(&p, &samples).unwrap();
    let back = load_feature_table(&p).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        let bits_a: Vec<u64> = a.features.iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u64> = b.features.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn class_embeddings_load_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = |k: usize| (0..SEMANTIC_DIM).map(|i| ((i + k) % 5) as f64).collect::<Vec<_>>();
    let ok = write_file(&dir, "ok.csv", &embedding_csv(&[("a", v(0)), ("b", v(1)), ("c", v(2))]));
    assert_eq!(load_class_embeddings(&ok).unwrap().len(), 3);

    let dup = write_file(&dir, "dup.csv", &embedding_csv(&[("a", v(0)), ("a", v(1))]));
    assert!(matches!(load_class_embeddings(&dup), Err(Error::Data(_))));

    let zero = write_file(&dir, "zero.csv", &embedding_csv(&[("a", vec![0.0; SEMANTIC_DIM])]));
    assert!(matches!(load_class_embeddings(&zero), Err(Error::Data(_))));

    let narrow = write_file(&dir, "narrow.csv", "label,e0,e1\na,1,2\n");
    assert!(matches!(load_class_embeddings(&narrow), Err(Error::Schema(_))));
}

#[test]
fn embeddings_round_trip() {
    let ds = generate_synthetic(&SyntheticConfig::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.csv");
    write_class_embeddings(&p, ds.embeddings()).unwrap();
    assert_eq!(&load_class_embeddings(&p).unwrap(), ds.embeddings());
}

#[test]
fn synthetic_is_deterministic() {
    let cfg = SyntheticConfig::default();
    let a = generate_synthetic(&cfg, 7).unwrap();
    let b = generate_synthetic(&cfg, 7).unwrap();
    assert_eq!(a.samples(), b.samples());
    assert_eq!(a.embeddings(), b.embeddings());
    assert_eq!(a.split(), b.split());
    let c = generate_synthetic(&cfg, 8).unwrap();
    assert_ne!(a.samples()[0].features, c.samples()[0].features);
}

#[test]
fn zero_noise_makes_class_samples_identical() {
    let cfg = SyntheticConfig {
        sigma_within: 0.0,
        sigma_mod: 0.0,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg, 1).unwrap();
    for label in ds.classes() {
        let mut feats = ds.samples().iter().filter(|s| s.label == label).map(|s| &s.features);
        let first = feats.next().unwrap();
        assert!(feats.all(|f| f == first));
    }
}

#[test]
fn synthetic_counts_and_config_errors() {
    let cfg = SyntheticConfig::default();
    let ds = generate_synthetic(&cfg, 0).unwrap();
    assert_eq!(ds.samples().len(), 16 * 20 * 2);
    assert_eq!(ds.classes().len(), 16);
    assert_eq!(ds.grid(), (2, 2, 16));
    for bad in [
        SyntheticConfig { n_classes: 3, ..cfg.clone() },
        SyntheticConfig { per_class: 0, ..cfg.clone() },
        SyntheticConfig { channels: 0, ..cfg.clone() },
    ] {
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::Config(_))));
    }
}

/// Leave-one-out 1-NN accuracy over photos, by brute force on raw features.
fn photo_1nn_accuracy(ds: &Dataset) -> f64 {
    let photos: Vec<&FeatureSample> = ds.samples().iter().filter(|s| s.domain == Domain::Photo).collect();
    let mut correct = 0;
    for (i, q) in photos.iter().enumerate() {
        let mut best = (f64::INFINITY, "");
        for (j, g) in photos.iter().enumerate() {
            if i == j {
                continue;
            }
            let d: f64 = q.features.iter().zip(&g.features).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, &g.label);
            }
        }
        if best.1 == q.label {
            correct += 1;
        }
    }
    correct as f64 / photos.len() as f64
}

#[test]
fn default_data_is_photo_separable() {
    let ds = generate_synthetic(&SyntheticConfig::default(), 0).unwrap();
    let acc = photo_1nn_accuracy(&ds);
    assert!(acc >= 0.95, "1-NN accuracy {acc}");
}

#[test]
fn more_within_noise_never_helps_1nn() {
    let mean_acc = |sw: f64| {
        (0..5)
            .map(|seed| {
                let cfg = SyntheticConfig {
                    sigma_within: sw,
                    ..SyntheticConfig::default()
                };
                photo_1nn_accuracy(&generate_synthetic(&cfg, seed).unwrap())
            })
            .sum::<f64>()
            / 5.0
    };
    let accs: Vec<f64> = [0.25, 0.75, 1.5, 3.0].iter().map(|&s| mean_acc(s)).collect();
    for w in accs.windows(2) {
        assert!(w[1] <= w[0], "{accs:?}");
    }
}

#[test]
fn split_counts_and_bounds() {
    let classes: Vec<String> = (0..16).map(|k| format!("c{k:02}")).collect();
    let s = build_split(&classes, 4, 3, Protocol::Zs).unwrap();
    assert_eq!(s.seen_classes.len(), 12);
    assert_eq!(s.unseen_classes.len(), 4);
    assert!(s.seen_classes.is_disjoint(&s.unseen_classes));
    assert!(matches!(build_split(&classes, 16, 3, Protocol::Zs), Err(Error::Config(_))));
    assert!(matches!(build_split(&classes, 15, 3, Protocol::Zs), Err(Error::Config(_))));
    assert!(matches!(build_split(&classes, 0, 3, Protocol::Zs), Err(Error::Config(_))));
}

#[test]
fn gzs_test_pool_adds_held_out_seen_samples() {
    let ds = generate_synthetic(&SyntheticConfig::default(), 2).unwrap();
    let zs = ds.test_samples(Domain::Photo, Protocol::Zs);
    let gzs = ds.test_samples(Domain::Photo, Protocol::Gzs);
    assert!(zs.iter().all(|s| ds.split().unseen_classes.contains(&s.label)));
    assert_eq!(zs.len(), 4 * 20);
    // floor(0.2 * 20) = 4 held out per seen class
    assert_eq!(gzs.len(), zs.len() + 12 * 4);
    let train = ds.train_samples(Domain::Photo);
    assert_eq!(train.len(), 12 * 16);
    assert!(train.iter().all(|s| !gzs.iter().any(|g| g.id == s.id)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn split_is_a_partition(k in 4usize..40, seed in any::<u64>(), frac in 0.0f64..1.0) {
        let classes: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let n_unseen = 1 + ((frac * (k - 2) as f64) as usize).min(k - 3);
        let s = build_split(&classes, n_unseen, seed, Protocol::Gzs).unwrap();
        prop_assert!(s.seen_classes.is_disjoint(&s.unseen_classes));
        let union: Vec<String> = s.seen_classes.union(&s.unseen_classes).cloned().collect();
        let mut all = classes.clone();
        all.sort();
        prop_assert_eq!(union, all);
        prop_assert_eq!(s.unseen_classes.len(), n_unseen);
    }
}
