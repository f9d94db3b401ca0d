use std::fs;
use std::io::Write;
use std::path::Path;

use gudn_core::corpus::{LABELS_FILE, TEST_FILE, TRAIN_FILE};
use gudn_core::{gen_synthetic, load_jsonl, DatasetBundle, GudnError, SynthConfig};

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) {
    let mut f = std::io::BufWriter::new(fs::File::create(path).unwrap());
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
}

fn load(dir: &Path) -> gudn_core::Result<DatasetBundle> {
    load_jsonl(&dir.join(TRAIN_FILE), &dir.join(TEST_FILE), &dir.join(LABELS_FILE), 16)
}

#[test]
fn eurlex_shaped_fixture_stats() {
    let dir = tempfile::tempdir().unwrap();
    let (trn, tst, lbl) = (15539usize, 3809usize, 3993usize);
    write_lines(&dir.path().join(LABELS_FILE), (0..lbl).map(|i| format!("{i}\tlabel {i}")));
    let sample = |i: usize| format!(r#"{{"id":{i},"text":"doc {i} words","labels":[{},{}]}}"#, i % lbl, (i * 7 + 1) % lbl);
    write_lines(&dir.path().join(TRAIN_FILE), (0..trn).map(sample));
    write_lines(&dir.path().join(TEST_FILE), (trn..trn + tst).map(sample));
    let b = load(dir.path()).unwrap();
    assert_eq!((b.stats.trn, b.stats.tst, b.stats.lbl), (trn, tst, lbl));
    let total: usize = b.train.iter().map(|s| s.positive_labels.len()).sum();
    assert!((b.stats.lps * trn as f64 - total as f64).abs() < 1e-6);
    assert!((b.stats.spl * lbl as f64 - total as f64).abs() < 1e-6);
}

#[test]
fn two_sample_hand_counts_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    write_lines(&dir.path().join(LABELS_FILE), ["0\tsports", "1\tpolitics", "2\tscience fiction"].map(String::from).into_iter());
    write_lines(
        &dir.path().join(TRAIN_FILE),
        [r#"{"id":1,"text":"goal scored","labels":[0,0,2]}"#, r#"{"id":2,"text":"vote","labels":[1]}"#]
            .map(String::from)
            .into_iter(),
    );
    write_lines(&dir.path().join(TEST_FILE), std::iter::once(r#"{"id":3,"text":"goal","labels":[0]}"#.to_string()));
    let b = load(dir.path()).unwrap();
    assert_eq!(b.train[0].positive_labels, vec![0, 2]);
    // 3 unique (sample, label) pairs over 2 samples and 3 labels.
    assert_eq!(b.stats.lps, 1.5);
    assert_eq!(b.stats.spl, 1.0);
    assert_eq!(b.label_group(2).len(), 2);
    assert!(b.test[0].label_tokens.is_none());
}

#[test]
fn loader_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    write_lines(&dir.path().join(LABELS_FILE), std::iter::once("0\ta".to_string()));
    write_lines(&dir.path().join(TEST_FILE), std::iter::empty());
    write_lines(&dir.path().join(TRAIN_FILE), std::iter::once(r#"{"id":42,"text":"x","labels":[5]}"#.to_string()));
    let err = load(dir.path()).unwrap_err();
    assert!(matches!(err, GudnError::Data(_)));
    assert!(err.to_string().contains("42"), "{err}");

    write_lines(
        &dir.path().join(TRAIN_FILE),
        [r#"{"id":1,"text":"x","labels":[0]}"#, "{oops"].map(String::from).into_iter(),
    );
    let err = load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn bundle_round_trip_through_files() {
    let b = gen_synthetic(&SynthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save_dir(dir.path()).unwrap();
    let back = DatasetBundle::load_dir(dir.path(), b.max_input_len).unwrap();
    assert_eq!(back, b);
}

#[test]
fn synthetic_generator_contract() {
    let cfg = SynthConfig::default();
    let b = gen_synthetic(&cfg).unwrap();
    assert_eq!((b.stats.trn, b.stats.tst, b.stats.lbl), (200, 50, 16));
    for s in b.train.iter().chain(&b.test) {
        let words: Vec<&str> = s.text.split_whitespace().collect();
        for &l in &s.positive_labels {
            for j in 0..cfg.signature_words {
                assert!(words.contains(&gudn_core::corpus::signature_word(l, j).as_str()));
            }
        }
    }
    assert_eq!(gen_synthetic(&cfg).unwrap(), b);

    let symbolic = gen_synthetic(&SynthConfig {
        semantic_strength: 0.0,
        ..cfg.clone()
    })
    .unwrap();
    for (l, text) in symbolic.labels.iter() {
        assert!(!text.contains(&format!("l{l}w")), "{text}");
        assert!(symbolic.train.iter().all(|s| !s.text.contains(text)));
    }
    assert!(gen_synthetic(&SynthConfig {
        labels_per_sample: 17,
        ..cfg
    })
    .is_err());
}
