use std::fs;
use std::path::Path;

use damage_cot::dataset::{
    augment, corpus_dir_files, corpus_to_string, evaluate_categories, generate_synthetic, load_corpus, mentions_class,
    parse_corpus, prompt_stages, read_synthetic, render_sample, save_corpus, write_synthetic, DamageClass,
    DamageRecord, Dihedral, Split, SyntheticSpec, CORPUS_FILE,
};
use damage_cot::{Error, RngStream, Tensor};

const REFERENCE: &str = include_str!("data/reference_records.json");

#[test]
fn reference_records_parse_verbatim() {
    let records = parse_corpus(REFERENCE).unwrap();
    assert_eq!(records.len(), 7);
    assert_eq!(records[0].img, "traindata/00392.jpg");
    assert_eq!(records[0].label, "There are holes in the concrete surface.");
    assert_eq!(records[1].label, "There is no obvious damage");
}

#[test]
fn reference_answers_name_their_categories() {
    let records = parse_corpus(REFERENCE).unwrap();
    // single-turn records carry the category in the label
    assert!(mentions_class(&records[0].label, DamageClass::ConcreteHole));
    assert!(mentions_class(&records[1].label, DamageClass::Undamaged));
    let expect = [
        DamageClass::ConcreteSpalling,
        DamageClass::SteelCorrosion,
        DamageClass::ConcreteCrack,
        DamageClass::RoadPothole,
        DamageClass::SteelCrack,
    ];
    for (r, class) in records[2..].iter().zip(expect) {
        let (_, rationale, _) = prompt_stages(&r.prompt).unwrap();
        assert!(mentions_class(&rationale, class), "{rationale:?} should name {class:?}");
    }
    let (q1, r, q2) = prompt_stages(&records[2].prompt).unwrap();
    assert_eq!(q1, "Determine whether there is damage to the structure in the picture.");
    assert_eq!(r, "There are concrete spalling and exposed steel bars.");
    assert_eq!(q2, "Please describe the characteristics of the damage in detail.");
}

fn touch_images(root: &Path, records: &[DamageRecord]) {
    for r in records {
        let p = root.join(&r.img);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"").unwrap();
    }
}

#[test]
fn normalized_corpus_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let records = parse_corpus(REFERENCE).unwrap();
    touch_images(dir.path(), &records);
    let path = dir.path().join(CORPUS_FILE);
    fs::write(&path, corpus_to_string(&records).unwrap()).unwrap();
    let before = fs::read(&path).unwrap();

    let loaded = load_corpus(&path).unwrap();
    assert_eq!(loaded, records);
    save_corpus(&loaded, &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn unresolvable_images_are_rejected_with_index() {
    let dir = tempfile::tempdir().unwrap();
    let records = parse_corpus(REFERENCE).unwrap();
    touch_images(dir.path(), &records[..3]);
    let path = dir.path().join(CORPUS_FILE);
    save_corpus(&records, &path).unwrap();
    match load_corpus(&path) {
        Err(Error::InvalidRecord { index, reason }) => {
            assert_eq!(index, 3);
            assert!(reason.contains("03049"), "{reason}");
        }
        other => panic!("expected rejection, got {other:?}"),
    }

    let escaping = vec![DamageRecord {
        img: "../outside.ppm".into(),
        prompt: "p".into(),
        label: "l".into(),
    }];
    save_corpus(&escaping, &path).unwrap();
    assert!(matches!(load_corpus(&path), Err(Error::InvalidRecord { index: 0, .. })));
}

#[test]
fn missing_label_names_the_field() {
    let text = r#"[{"img": "a.ppm", "prompt": "Judge it."}]"#;
    match parse_corpus(text) {
        Err(Error::InvalidRecord { index: 0, reason }) => assert!(reason.contains("label"), "{reason}"),
        other => panic!("{other:?}"),
    }
}

/// Image whose channels encode each pixel's source coordinates, so any
/// transformed pixel can be traced back.
fn coordinate_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        match c {
            0 => (p / w) as f64,
            1 => (p % w) as f64,
            _ => 7.0,
        }
    })
}

#[test]
fn mask_transforms_commute_with_image_transforms() {
    let (h, w) = (5, 7);
    let image = coordinate_image(h, w);
    let mut rng = RngStream::new(3);
    let mask = Tensor::from_fn(&[h, w], |_| (rng.uniform() < 0.4) as u8 as f64);
    let record = DamageRecord {
        img: "images/00001.ppm".into(),
        prompt: "Q: a A: b Q: c".into(),
        label: "d".into(),
    };
    let derived = augment(&record, &image, Some(&mask)).unwrap();
    assert_eq!(derived.len(), 5);
    for (rec, img, m) in &derived {
        assert_eq!(rec.prompt, record.prompt);
        assert_eq!(rec.label, record.label);
        assert!(
            rec.img.starts_with("images/00001_") && rec.img.ends_with(".ppm"),
            "{}",
            rec.img
        );
        let m = m.as_ref().unwrap();
        let (oh, ow, _) = img.dims3().unwrap();
        assert_eq!(m.shape(), &[oh, ow]);
        for p in 0..oh * ow {
            let (sy, sx) = (img.data()[p * 3] as usize, img.data()[p * 3 + 1] as usize);
            assert_eq!(m.data()[p], mask.data()[sy * w + sx], "{} pixel {p}", rec.img);
        }
    }
}

#[test]
fn dihedral_actions_on_images_and_masks_compose() {
    let mut rng = RngStream::new(8);
    let (image, mask) = render_sample(DamageClass::ConcreteHole, 16, 0.7, &mut rng);
    for a in Dihedral::ALL {
        for b in Dihedral::ALL {
            let ab = a.then(b);
            assert!(b
                .apply(&a.apply(&image).unwrap())
                .unwrap()
                .bit_eq(&ab.apply(&image).unwrap()));
            assert!(b
                .apply(&a.apply(&mask).unwrap())
                .unwrap()
                .bit_eq(&ab.apply(&mask).unwrap()));
        }
    }
    let twice = |d: Dihedral, t: &Tensor| d.apply(&d.apply(t).unwrap()).unwrap();
    assert!(twice(Dihedral::Rot180, &image).bit_eq(&image));
    assert!(twice(Dihedral::FlipH, &image).bit_eq(&image));
}

#[test]
fn synthetic_corpus_is_deterministic_balanced_and_disjoint() {
    let spec = SyntheticSpec {
        per_class: 10,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec).unwrap();
    assert_eq!(records.len(), 70);
    for class in DamageClass::ALL {
        let of: Vec<_> = records.iter().filter(|r| r.class() == class).collect();
        assert_eq!(of.len(), 10);
        assert_eq!(of.iter().filter(|r| r.meta.split == Split::Eval).count(), 2);
        for r in of {
            let damage = r.mask.data().iter().filter(|&&v| v == 1.0).count();
            if class == DamageClass::Undamaged {
                assert_eq!(damage, 0);
            } else {
                assert!(damage >= 1, "{} has an empty mask", r.meta.img);
            }
            let (_, rationale, _) = r.stages().unwrap();
            assert!(mentions_class(&rationale, class));
        }
    }
    let train: std::collections::HashSet<_> = records
        .iter()
        .filter(|r| r.meta.split == Split::Train)
        .map(|r| &r.meta.img)
        .collect();
    assert!(records
        .iter()
        .filter(|r| r.meta.split == Split::Eval)
        .all(|r| !train.contains(&r.meta.img)));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_synthetic(&a, &records).unwrap();
    write_synthetic(&b, &generate_synthetic(&spec).unwrap()).unwrap();
    let files = corpus_dir_files(&a);
    assert_eq!(files.len(), 2 + 2 * 70);
    for f in &files {
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(
            fs::read(f).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
    assert_eq!(read_synthetic(&a).unwrap(), records);

    let other = generate_synthetic(&SyntheticSpec { seed: 5, ..spec }).unwrap();
    assert_ne!(other[0].image, records[0].image);
}

#[test]
fn zero_counts_are_rejected() {
    let spec = SyntheticSpec {
        per_class: 0,
        ..SyntheticSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Contract(_))));
}

#[test]
fn evaluation_examples() {
    let oracle: Vec<_> = DamageClass::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat((c, c.rationale())).take(3))
        .collect();
    let report = evaluate_categories(&oracle).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert!(report.rows.iter().all(|r| r.correct == r.total && r.total == 3));

    let constant: Vec<_> = DamageClass::ALL
        .iter()
        .map(|&c| (c, DamageClass::Undamaged.rationale()))
        .collect();
    assert_eq!(evaluate_categories(&constant).unwrap().accuracy, 1.0 / 7.0);
    assert!(evaluate_categories::<&str>(&[]).is_err());

    let names: Vec<_> = report.rows.iter().map(|r| r.category.as_str()).collect();
    assert_eq!(
        names,
        [
            "Road potholes",
            "Concrete cracks",
            "Concrete holes",
            "Concrete spalling and rebar exposure",
            "Steel elements cracks",
            "Steel elements spalling and corrosion",
            "undamaged",
        ]
    );
}
