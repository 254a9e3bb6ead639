use super::*;

fn cube_at(lat: f64, dist: f64, half: f64) -> Scene {
    let d = direction(0.0, lat);
    let c = [d[0] * dist, CAMERA_HEIGHT + d[1] * dist, d[2] * dist];
    Scene {
        objects: vec![Object {
            solid: Solid::Box {
                min: [c[0] - half, c[1] - half, c[2] - half],
                max: [c[0] + half, c[1] + half, c[2] + half],
            },
            class: BUILDING,
            color: [1.0, 0.0, 0.0],
        }],
        ground: false,
        ground_offset: [0.0; 2],
    }
}

fn count(labels: &LabelMap, class: u8) -> usize {
    labels.data.iter().filter(|&&l| l == class).count()
}

fn render_flat(scene: &Scene, camera: CameraModel, w: usize, h: usize) -> (Image, LabelMap) {
    let spec = SceneSpec::new(0, w, h, TextureMode::FlatSynthetic, camera);
    render(scene, &spec, &mut ChaCha8Rng::seed_from_u64(0))
}

#[test]
fn erp_over_pinhole_area_follows_inverse_cosine() {
    let area = |lat: f64| {
        let scene = cube_at(lat, 6.0, 0.5);
        let (_, erp) = render_flat(&scene, CameraModel::Equirectangular, 1024, 512);
        let pin = CameraModel::Pinhole {
            hfov_deg: 40.0,
            yaw: 0.0,
            pitch: lat,
        };
        let (_, p) = render_flat(&scene, pin, 256, 256);
        count(&erp, BUILDING) as f64 / count(&p, BUILDING) as f64
    };
    let base = area(0.0);
    for deg in [20.0f64, 40.0, 60.0] {
        let lat = deg.to_radians();
        let ratio = area(lat) / base;
        let expected = 1.0 / lat.cos();
        assert!(ratio > 1.0, "ratio must grow away from the equator");
        assert!((ratio / expected - 1.0).abs() < 0.10, "lat {deg}: ratio {ratio} expected {expected}");
    }
}

#[test]
fn empty_erp_splits_into_sky_and_ground_halves() {
    let scene = Scene {
        objects: vec![],
        ground: true,
        ground_offset: [0.0; 2],
    };
    let (_, l) = render_flat(&scene, CameraModel::Equirectangular, 64, 32);
    for r in 0..32 {
        let want = if r < 16 { SKY } else { GROUND };
        assert!(l.data[r * 64..(r + 1) * 64].iter().all(|&v| v == want), "row {r}");
    }
}

#[test]
fn ground_is_stretched_toward_the_nadir() {
    // Ground pixels per square meter grow toward the nadir rows.
    let scene = Scene {
        objects: vec![],
        ground: true,
        ground_offset: [0.0; 2],
    };
    let spec = SceneSpec::new(0, 64, 32, TextureMode::FlatSynthetic, CameraModel::Equirectangular);
    let footprint = |r: usize| {
        let (_, lat0) = erp_pixel_angles(32, 64, r, 0);
        CAMERA_HEIGHT / (-lat0).tan()
    };
    let (_, l) = render(&scene, &spec, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(l.data[31 * 64], GROUND);
    let step_far = footprint(17) - footprint(18);
    let step_near = footprint(29) - footprint(30);
    assert!(step_near < step_far);
}

#[test]
fn generator_is_deterministic() {
    let cfg = BenchmarkConfig::default();
    for domain in Domain::ALL {
        let spec = domain_spec(domain, 42, &cfg);
        assert_eq!(gen_scene(&spec), gen_scene(&spec), "{}", domain.name());
    }
    let a = gen_scene(&domain_spec(Domain::TargetPanoramic, 1, &cfg));
    let b = gen_scene(&domain_spec(Domain::TargetPanoramic, 2, &cfg));
    assert_ne!(a.1, b.1);
}

#[test]
fn every_class_covers_one_percent_of_target_train() {
    let cfg = BenchmarkConfig::default();
    let maps: Vec<LabelMap> = (0..cfg.train_per_domain)
        .map(|i| gen_scene(&domain_spec(Domain::TargetPanoramic, split_seed(cfg.seed, i as u64), &cfg)).1)
        .collect();
    let refs: Vec<&LabelMap> = maps.iter().collect();
    let hist = class_histogram(&refs, CLASS_NAMES.len());
    for (c, frac) in hist.iter().enumerate() {
        assert!(*frac >= 0.01, "class {} covers {frac}", CLASS_NAMES[c]);
    }
}

#[test]
fn silhouettes_match_labels() {
    // flat textures: every pixel's color is a function of its label
    let cfg = BenchmarkConfig::default();
    let (img, lbl) = gen_scene(&domain_spec(Domain::SourceSynthetic, 3, &cfg));
    let mut seen: std::collections::HashMap<[u8; 3], u8> = Default::default();
    for (i, &l) in lbl.data.iter().enumerate() {
        let px = [img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]];
        let prev = *seen.entry(px).or_insert(l);
        assert_eq!(prev, l, "color {px:?} used by two classes");
    }
}

#[test]
fn ppm_pgm_roundtrip() {
    let (img, lbl) = gen_scene(&domain_spec(Domain::SourcePinhole, 5, &BenchmarkConfig::default()));
    assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    assert_eq!(decode_pgm(&encode_pgm(&lbl)).unwrap(), lbl);
}

#[test]
fn header_comments_are_skipped() {
    let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
    let l = decode_pgm(bytes).unwrap();
    assert_eq!((l.width, l.height, l.data), (2, 1, vec![1, 2]));
}

#[test]
fn malformed_headers_report_byte_offsets() {
    let cases: [(&[u8], usize); 4] = [
        (b"P3\n1 1\n255\n", 0),
        (b"P5\nx 1\n255\n\x00", 3),
        (b"P5\n1 1\n65535\n\x00", 12),
        (b"P5\n2 2\n255\n\x00", 12),
    ];
    for (bytes, offset) in cases {
        match decode_pgm(bytes) {
            Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset, "{:?}", String::from_utf8_lossy(bytes)),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}

#[test]
fn benchmark_writes_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BenchmarkConfig {
        train_per_domain: 2,
        val_per_domain: 1,
        width: 32,
        height: 16,
        ..Default::default()
    };
    let m = gen_benchmark(dir.path(), &cfg).unwrap();
    assert_eq!(m.samples.len(), 9);
    assert_eq!(m.classes, CLASS_NAMES);
    let target = load_samples(dir.path().join("target-panoramic.json"), Some(Split::Train)).unwrap();
    assert_eq!(target.len(), 2);
    assert!(target.iter().all(|s| s.domain == Domain::TargetPanoramic && s.image.width == 32));
    let t = images_to_tensor(&target.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    assert_eq!(t.shape(), &[2, 16, 32, 3]);
}

#[test]
fn crops_keep_images_and_labels_aligned() {
    let (img, lbl) = gen_scene(&domain_spec(Domain::TargetPanoramic, 9, &BenchmarkConfig::default()));
    let (ci, cl) = (img.crop_columns(32, 64), lbl.crop_columns(32, 64));
    assert_eq!((ci.width, cl.width), (64, 64));
    for y in [0, 31, 63] {
        for x in [0, 40, 63] {
            assert_eq!(cl.data[y * 64 + x], lbl.data[y * 128 + x + 32]);
            assert_eq!(ci.data[(y * 64 + x) * 3], img.data[(y * 128 + x + 32) * 3]);
        }
    }
}
