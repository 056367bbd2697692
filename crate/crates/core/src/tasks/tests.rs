use super::*;

fn small() -> SuiteConfig {
    SuiteConfig {
        seed: 3,
        train: 60,
        val: 10,
        test: 40,
        ..SuiteConfig::default()
    }
}

#[test]
fn same_seed_same_suite() {
    let a = generate_suite(&small()).unwrap();
    let b = generate_suite(&small()).unwrap();
    assert_eq!(a.iter().map(checksum).collect::<Vec<_>>(), b.iter().map(checksum).collect::<Vec<_>>());
    let c = generate_suite(&SuiteConfig { seed: 4, ..small() }).unwrap();
    assert_ne!(checksum(&a[0]), checksum(&c[0]));
}

#[test]
fn protocol_order_and_shapes() {
    let suite = generate_suite(&small()).unwrap();
    let families: Vec<Family> = suite.iter().map(|d| d.spec.family).collect();
    assert_eq!(&families[..3], &[Family::Perception; 3]);
    assert_eq!(&families[3..6], &[Family::Motor; 3]);
    assert_eq!(&families[6..], &[Family::Interaction; 3]);
    for (i, d) in suite.iter().enumerate() {
        assert_eq!(d.spec.task_id, i + 1);
        for s in [&d.train, &d.val, &d.test] {
            assert!(s.images.iter().all(|v| (0.0..=1.0).contains(v)));
            if let Targets::Values { data, dim } = &s.targets {
                assert_eq!(*dim, d.spec.output.len());
                assert!(data.iter().all(|v| v.is_finite()));
            }
        }
        assert_eq!(d.train.len(), 60);
    }
    assert_eq!(suite[3].spec.output, OutputKind::Action(2));
    assert_eq!(suite[5].spec.output, OutputKind::Action(4));
    assert_eq!(suite[8].spec.state_dim, 2);
}

#[test]
fn invalid_sizes_rejected() {
    assert!(matches!(generate_suite(&SuiteConfig { train: 0, ..small() }), Err(Error::InvalidConfig(_))));
    assert!(generate_suite(&SuiteConfig { overlap: 1.5, ..small() }).is_err());
}

#[test]
fn zero_overlap_has_no_declared_sharing() {
    let cfg = SuiteConfig { overlap: 0.0, ..small() };
    assert!(generate_suite(&cfg).unwrap().iter().all(|d| d.spec.overlap.is_empty()));
    assert_eq!(task_spec(5, &small()).overlap.len(), 4);
}

fn forward_kinematics(angles: [f64; 2]) -> [f64; 2] {
    let t1 = SHOULDER.0 + angles[0] * (SHOULDER.1 - SHOULDER.0);
    let t2 = ELBOW.0 + angles[1] * (ELBOW.1 - ELBOW.0);
    [ARM_BASE.0 + LINK * (t1.cos() + (t1 + t2).cos()), ARM_BASE.1 + LINK * (t1.sin() + (t1 + t2).sin())]
}

#[test]
fn inverse_kinematics_reaches_goal() {
    for goal in [[0.0, 0.0], [1.0, 1.0], [0.3, 0.7], [0.5, 0.5], [1.0, 0.0]] {
        let p = forward_kinematics(inverse_kinematics(goal));
        assert!((p[0] - goal[0]).abs() < 1e-9 && (p[1] - goal[1]).abs() < 1e-9, "{goal:?} -> {p:?}");
        let a = inverse_kinematics(goal);
        assert!(a.iter().all(|v| (-0.01..=1.01).contains(v)), "{a:?}");
    }
}

#[test]
fn success_rate_cases() {
    let suite = generate_suite(&small()).unwrap();
    for d in &suite[6..] {
        let Targets::Values { dim, data } = &d.test.targets else { panic!() };
        let truth: Vec<Vec<f32>> = data.chunks_exact(*dim).map(<[f32]>::to_vec).collect();
        assert_eq!(d.spec.evaluate(&truth, &d.test), 1.0);
        assert_eq!(success_rate(&vec![0.0; data.len()], data, *dim, 0.1), 0.0);
    }
    let t = [0.5f32, 0.5, 0.9, 0.9];
    assert_eq!(success_rate(&[0.5, 0.5, 0.0, 0.0], &t, 2, 0.1), 0.5);
}

#[test]
fn classification_metric_and_chance() {
    let d = generate_task(&small(), 1).unwrap();
    assert_eq!(d.chance_level(), 0.2);
    let Targets::Classes(c) = &d.test.targets else { panic!() };
    let perfect: Vec<Vec<f32>> = c
        .iter()
        .map(|&c| {
            let mut v = vec![0.0; CLASSES];
            v[c as usize] = 1.0;
            v
        })
        .collect();
    assert_eq!(d.spec.evaluate(&perfect, &d.test), 1.0);
    let m = generate_task(&small(), 4).unwrap();
    assert!(m.chance_level() < 0.0);
}

/// Angular radius profile around the intensity centroid, scale-normalized.
fn profile(img: &[f32]) -> Vec<f64> {
    const BINS: usize = 16;
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let v = img[y * SIDE + x] as f64;
            m += v;
            sx += v * (x as f64 + 0.5);
            sy += v * (y as f64 + 0.5);
        }
    }
    let (cx, cy) = (sx / m.max(1e-9), sy / m.max(1e-9));
    let mut prof = vec![0f64; BINS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            if img[y * SIDE + x] < 0.4 {
                continue;
            }
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let a = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let b = ((a / std::f64::consts::TAU) * BINS as f64) as usize % BINS;
            prof[b] = prof[b].max((dx * dx + dy * dy).sqrt());
        }
    }
    let mean = prof.iter().sum::<f64>() / BINS as f64;
    prof.iter().map(|v| v / mean.max(1e-9)).collect()
}

fn nearest_centroid_accuracy(train: &Split, test: &Split) -> f64 {
    let (Targets::Classes(tc), Targets::Classes(sc)) = (&train.targets, &test.targets) else { panic!() };
    let mut cent: Vec<Vec<f64>> = vec![Vec::new(); CLASSES];
    let mut counts = [0usize; CLASSES];
    for i in 0..train.len() {
        let f = profile(train.image(i));
        let c = &mut cent[tc[i] as usize];
        if c.is_empty() {
            c.resize(f.len(), 0.0);
        }
        counts[tc[i] as usize] += 1;
        c.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    for (c, n) in cent.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let hits = (0..test.len())
        .filter(|&i| {
            let x = profile(test.image(i));
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..CLASSES).min_by(|&a, &b| dist(&cent[a]).total_cmp(&dist(&cent[b]))).unwrap();
            best == sc[i] as usize
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn styles_share_class_geometry() {
    // A classifier fitted on outlines transfers above chance to filled shapes.
    let cfg = SuiteConfig { train: 600, test: 400, ..small() };
    let outline = generate_task(&cfg, 1).unwrap();
    let filled = generate_task(&cfg, 2).unwrap();
    let within = nearest_centroid_accuracy(&outline.train, &outline.test);
    let across = nearest_centroid_accuracy(&outline.train, &filled.test);
    assert!(within > 0.3, "within-style {within}");
    eprintln!("nearest-centroid accuracy: within {within:.3}, across {across:.3}");
    assert!(across > 0.2 + 0.05, "cross-style {across}");
}

#[test]
fn dataset_file_round_trip_and_damage() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_task(&small(), 8).unwrap();
    let p = dir.path().join("t.tdmd");
    write_dataset(&p, &d).unwrap();
    assert_eq!(read_dataset(&p).unwrap(), d);

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(read_dataset(&p), Err(Error::Corrupt { .. })));

    let mut foreign = bytes.clone();
    foreign[..5].copy_from_slice(b"XXXX1");
    std::fs::write(&p, &foreign).unwrap();
    match read_dataset(&p) {
        Err(Error::Format { expected, .. }) => assert_eq!(expected, "TDMD1"),
        other => panic!("{other:?}"),
    }

    let suite = generate_suite(&small()).unwrap();
    write_suite(dir.path(), &suite).unwrap();
    assert_eq!(read_suite(dir.path()).unwrap(), suite);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
}
