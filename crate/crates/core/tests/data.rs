//! Vocabulary, tokenization, MLM masking and the synthetic corpus.

use std::collections::HashSet;
use std::fs;

use tbvlm_core::corpus::{generate_case, load_dataset, render_case, write_dataset, MANIFEST_NAME};
use tbvlm_core::text::{apply_mlm_mask, normalize, BOS, EOS, N_RESERVED, PAD};
use tbvlm_core::trainer::build_vocabulary;
use tbvlm_core::{Case, CorpusConfig, Vocabulary, N_PATHOLOGIES};

fn cases(range: std::ops::Range<u64>) -> Vec<Case> {
    let cfg = CorpusConfig::default();
    range.map(|s| generate_case(s, &cfg).unwrap()).collect()
}

#[test]
fn vocabulary_order_is_frequency_then_order_free() {
    let v = Vocabulary::build(&["fever fever cough"]).unwrap();
    assert_eq!(v.id("fever"), Some(N_RESERVED));
    assert_eq!(v.id("cough"), Some(N_RESERVED + 1));

    let notes: Vec<String> = cases(0..200).into_iter().map(|c| c.note).collect();
    let mut reversed = notes.clone();
    reversed.reverse();
    assert_eq!(Vocabulary::build(&notes).unwrap(), Vocabulary::build(&reversed).unwrap());
}

#[test]
fn corpus_vocabulary_stays_small() {
    let v = build_vocabulary(&cases(0..2000)).unwrap();
    assert!(v.len() <= 512, "{} tokens", v.len());
}

#[test]
fn tokenization_edge_cases_and_round_trip() {
    let all = cases(0..1000);
    let v = build_vocabulary(&all).unwrap();
    let empty = v.tokenize("", 8);
    assert_eq!(empty.ids, vec![BOS, EOS, PAD, PAD, PAD, PAD, PAD, PAD]);
    let s = v.tokenize("Fever, cough.", 8);
    assert_eq!(&s.ids[..4], &[BOS, v.id("fever").unwrap(), v.id("cough").unwrap(), EOS]);

    for c in &all {
        let seq = v.tokenize(&c.note, 64);
        assert_eq!(v.detokenize(&seq.ids[1..]), normalize(&c.note).join(" "));
    }
}

#[test]
fn mlm_masking_distribution() {
    let v = build_vocabulary(&cases(0..50)).unwrap();
    let note = "patient presents with fever and cough consolidation in right upper zone";
    let seq = v.tokenize(note, 24);
    let maskable: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] >= N_RESERVED).collect();

    let none = apply_mlm_mask(&seq, 1e-9, 3, v.len()).unwrap();
    assert_eq!(none.masked, seq);
    assert!(none.labels.iter().all(Option::is_none));

    let trials = 10_000;
    let mut selected = 0usize;
    for seed in 0..trials {
        let ex = apply_mlm_mask(&seq, 0.15, seed, v.len()).unwrap();
        for (i, l) in ex.labels.iter().enumerate() {
            if l.is_some() {
                assert!(seq.ids[i] >= N_RESERVED, "special token at {i} selected");
                selected += 1;
            }
        }
    }
    let freq = selected as f64 / (trials as usize * maskable.len()) as f64;
    assert!((freq - 0.15).abs() < 0.01, "selection frequency {freq}");
}

#[test]
fn cases_are_deterministic_and_degenerate_config_is_healthy() {
    let cfg = CorpusConfig::default();
    assert_eq!(generate_case(77, &cfg).unwrap(), generate_case(77, &cfg).unwrap());

    let none = CorpusConfig {
        prevalence: [0.0; N_PATHOLOGIES],
        ..CorpusConfig::default()
    };
    for seed in 0..20 {
        let c = generate_case(seed, &none).unwrap();
        assert_eq!(c.labels, [0; N_PATHOLOGIES]);
        assert!(c.annotations.is_empty());
        assert!(c.note.to_lowercase().contains("no acute findings"));
    }
}

#[test]
fn prevalence_matches_binomial_bounds() {
    let cfg = CorpusConfig {
        prevalence: [0.5; N_PATHOLOGIES],
        ..CorpusConfig::default()
    };
    let mut counts = [0usize; N_PATHOLOGIES];
    for seed in 0..10_000 {
        let c = generate_case(seed, &cfg).unwrap();
        for p in 0..N_PATHOLOGIES {
            counts[p] += c.labels[p] as usize;
        }
    }
    for (p, &n) in counts.iter().enumerate() {
        assert!((4850..=5150).contains(&n), "pathology {p}: {n}");
    }
}

#[test]
fn boxes_contain_their_bright_pixels() {
    let cfg = CorpusConfig::default();
    for seed in 0..300 {
        let r = render_case(seed, &cfg).unwrap();
        let n = cfg.image_size;
        for (a, mask) in r.case.annotations.iter().zip(&r.masks) {
            let [x0, y0, x1, y1] = a.bbox.map(|v| v as usize);
            assert!(x0 < x1 && x1 <= n && y0 < y1 && y1 <= n);
            for y in 0..n {
                for x in 0..n {
                    if mask[y * n + x] {
                        assert!((x0..x1).contains(&x) && (y0..y1).contains(&y));
                        let lift = r.case.image.at(y, x) - r.background[y * n + x];
                        assert!(lift > 0.2 - 1e-12 || r.case.image.at(y, x) >= 1.0, "seed {seed}");
                    }
                }
            }
            // Tight: every edge of the box touches the mask.
            let on = |x: usize, y: usize| mask[y * n + x];
            assert!((y0..y1).any(|y| on(x0, y)) && (y0..y1).any(|y| on(x1 - 1, y)));
            assert!((x0..x1).any(|x| on(x, y0)) && (x0..x1).any(|x| on(x, y1 - 1)));
        }
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let all = cases(0..500);
    write_dataset(&all, dir.path()).unwrap();
    let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.lines().count(), 500);
    let files: HashSet<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 5);
        for k in ["case_id", "image", "annotations", "note", "labels"] {
            assert!(keys.contains(&k));
        }
        assert!(files.contains(v["image"].as_str().unwrap()));
    }

    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), all.len());
    for (a, b) in all.iter().zip(&back) {
        assert_eq!((&a.annotations, &a.note, a.labels), (&b.annotations, &b.note, b.labels));
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-9);
    }

    let empty = tempfile::tempdir().unwrap();
    write_dataset(&[], empty.path()).unwrap();
    assert!(load_dataset(empty.path()).unwrap().is_empty());
}
