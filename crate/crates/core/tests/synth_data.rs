use std::collections::{BTreeMap, BTreeSet};

use micfer::codec::decode_frame;
use micfer::synth::{
    generate_dataset, load_manifest, load_split, render_sequence, Canvas, DatasetConfig, ExpressionTemplate,
    LoadedSequence, Profile, Split, SubjectSpec,
};

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        n_identities: 5,
        n_classes: 3,
        per_cell: 2,
        seed,
        length: 6,
        ..DatasetConfig::default()
    }
}

#[test]
fn first_frame_is_base_image_up_to_noise() {
    let subject = SubjectSpec::new(2);
    let base = subject.base_image(Canvas::default());
    for profile in [Profile::Ramp, Profile::Peak] {
        let s = render_sequence(&subject, &ExpressionTemplate::new(4, 7).unwrap(), profile, 16, Canvas::default(), 11)
            .unwrap();
        assert_eq!(s.frames.len(), 16);
        let worst = s.frames[0]
            .pixels
            .iter()
            .zip(&base)
            .map(|(&p, &b)| (p as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 2.0, "{worst}");
        assert_eq!(s.apex_idx, profile.apex_idx(16));
        assert_eq!(s.expression_label, 4);
        assert_eq!(s.identity_label, 2);
    }
}

#[test]
fn every_class_moves_the_apex_frame() {
    let canvas = Canvas::default();
    let subject = SubjectSpec::new(0);
    for class in 0..7 {
        let t = ExpressionTemplate::new(class, 7).unwrap();
        let s = render_sequence(&subject, &t, Profile::Ramp, 16, canvas, 1).unwrap();
        let diff: Vec<f64> = s.frames[15]
            .pixels
            .iter()
            .zip(&s.frames[0].pixels)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .collect();
        assert!(diff.iter().cloned().fold(0.0, f64::max) > 6.0, "class {class} invisible");
    }
}

#[test]
fn different_subjects_differ_more_than_noise() {
    let t = ExpressionTemplate::new(1, 7).unwrap();
    let a = render_sequence(&SubjectSpec::new(0), &t, Profile::Ramp, 4, Canvas::default(), 9).unwrap();
    let b = render_sequence(&SubjectSpec::new(1), &t, Profile::Ramp, 4, Canvas::default(), 9).unwrap();
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let mad = fa
            .pixels
            .iter()
            .zip(&fb.pixels)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / fa.pixels.len() as f64;
        assert!(mad > 10.0, "{mad}");
    }
}

#[test]
fn rgb_canvas_renders() {
    let canvas = Canvas {
        height: 16,
        width: 24,
        channels: 3,
    };
    let s = render_sequence(&SubjectSpec::new(3), &ExpressionTemplate::new(0, 4).unwrap(), Profile::Peak, 5, canvas, 0)
        .unwrap();
    assert_eq!(s.frames[2].dims(), (16, 24, 3));
}

#[test]
fn dataset_generation_is_deterministic_and_identity_disjoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&small_config(4), a.path()).unwrap();
    let mb = generate_dataset(&small_config(4), b.path()).unwrap();
    assert_eq!(ma, mb);
    for split in [Split::Train, Split::Test] {
        let name = split.file_name();
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
    for e in &ma.train {
        assert_eq!(
            std::fs::read(a.path().join(&e.path)).unwrap(),
            std::fs::read(b.path().join(&e.path)).unwrap()
        );
    }
    assert_eq!(load_manifest(a.path()).unwrap(), ma);
    let train: BTreeSet<u32> = ma.train.iter().map(|e| e.identity_label).collect();
    let test: BTreeSet<u32> = ma.test.iter().map(|e| e.identity_label).collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(ma.train.len() + ma.test.len(), 5 * 3 * 2);

    let header = std::fs::read_to_string(a.path().join("train.csv")).unwrap();
    assert!(header.starts_with("path,expression_label,identity_label,apex_idx,profile\n"));
    assert!(header.lines().nth(1).unwrap().ends_with(",5,ramp"));
}

fn default_dataset() -> (tempfile::TempDir, Vec<LoadedSequence>, Vec<LoadedSequence>) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&DatasetConfig::default(), dir.path()).unwrap();
    let train = load_split(dir.path(), Split::Train).unwrap();
    let test = load_split(dir.path(), Split::Test).unwrap();
    (dir, train, test)
}

/// |apex − first| of the decoded frames above the two-frame noise floor,
/// summed over 4×4 cells and normalized to unit length.
fn motion_energy(seq: &LoadedSequence) -> Vec<f64> {
    let first = decode_frame(&seq.gop, 0).unwrap();
    let apex = decode_frame(&seq.gop, seq.entry.apex_idx).unwrap();
    let (h, w, _) = first.dims();
    let mut f = vec![0.0; (h / 4) * (w / 4)];
    for y in 0..h {
        for x in 0..w {
            f[(y / 4) * (w / 4) + x / 4] += ((apex.at(y, x, 0) as f64 - first.at(y, x, 0) as f64).abs() - 4.0).max(0.0);
        }
    }
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    f.iter().map(|v| v / norm).collect()
}

#[test]
fn default_dataset_counts_and_label_recoverability() {
    let (_dir, train, test) = default_dataset();
    assert_eq!((train.len(), test.len()), (448, 112));
    for split in [&train, &test] {
        let mut hist = BTreeMap::new();
        for s in split.iter() {
            *hist.entry(s.entry.expression_label).or_insert(0) += 1;
        }
        let counts: BTreeSet<usize> = hist.values().copied().collect();
        assert_eq!(hist.len(), 7);
        assert_eq!(counts.len(), 1, "class histogram not uniform: {hist:?}");
    }

    // Nearest-centroid classifier on motion energy.
    let dim = motion_energy(&train[0]).len();
    let mut centroids = vec![vec![0.0; dim]; 7];
    for s in &train {
        for (c, v) in centroids[s.entry.expression_label].iter_mut().zip(motion_energy(s)) {
            *c += v;
        }
    }
    let correct = test
        .iter()
        .filter(|s| {
            let f = motion_energy(s);
            let best = (0..7)
                .max_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&f).map(|(c, v)| c * v).sum();
                    let db: f64 = centroids[b].iter().zip(&f).map(|(c, v)| c * v).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == s.entry.expression_label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "label recoverability {acc}");
}
