use std::collections::HashSet;

use gemtrans_core::model::{Task, AS_CLASSES};
use gemtrans_core::synth::{
    export_dataset, gen_as_sample, gen_sample, import_dataset, make_splits, ring_style, Split, SynthConfig,
};

fn small(task: Task) -> SynthConfig {
    SynthConfig {
        train: 12,
        val: 4,
        test: 4,
        ..SynthConfig::new(task)
    }
}

/// Mean intensity over ring pixels of view 0. Without noise the background
/// stays below 0.12 and every ring pixel above 0.3, so a 0.2 cut separates them.
fn ring_mean(cfg: &SynthConfig, class: usize) -> f64 {
    let s = gen_as_sample(cfg, Split::Train, class).unwrap();
    assert_eq!(s.as_label, Some(class));
    let ring: Vec<f64> = (0..s.t)
        .flat_map(|t| s.frame(0, t).iter().copied())
        .filter(|&v| v > 0.2)
        .map(f64::from)
        .collect();
    assert!(!ring.is_empty());
    ring.iter().sum::<f64>() / ring.len() as f64
}

#[test]
fn as_intensity_margin_between_extreme_classes() {
    let cfg = SynthConfig {
        noise: 0.0,
        ..SynthConfig::new(Task::As)
    };
    let (healthy, severe) = (ring_mean(&cfg, 0), ring_mean(&cfg, 3));
    assert!(severe - healthy >= 0.3, "healthy {healthy:.3} severe {severe:.3}");
}

#[test]
fn as_classes_are_monotone_in_brightness_and_gap() {
    for c in 1..AS_CLASSES {
        let (a, b) = (ring_style(c - 1, 32), ring_style(c, 32));
        assert!(b.brightness > a.brightness);
        assert!(b.gap_radius < a.gap_radius);
    }
}

#[test]
fn same_seed_and_index_is_bitwise_identical() {
    for task in [Task::Ef, Task::As] {
        let cfg = SynthConfig::new(task);
        let a = gen_sample(&cfg, Split::Val, 7).unwrap();
        let b = gen_sample(&cfg, Split::Val, 7).unwrap();
        assert_eq!(a, b);
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(a.videos, gen_sample(&other, Split::Val, 7).unwrap().videos);
    }
}

#[test]
fn splits_are_disjoint_and_sized() {
    let cfg = small(Task::Ef);
    let s = make_splits(&cfg).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12, 4, 4));
    let mut ids = HashSet::new();
    let mut videos = HashSet::new();
    for split in Split::ALL {
        for x in s.get(split) {
            assert!(ids.insert(x.sample_id.clone()), "{} repeated", x.sample_id);
            let bits: Vec<u32> = x.videos.iter().map(|v| v.to_bits()).collect();
            assert!(videos.insert(bits), "{} duplicates another sample", x.sample_id);
        }
    }
}

#[test]
fn regeneration_reproduces_labels() {
    let cfg = small(Task::Ef);
    let labels = |s: &gemtrans_core::synth::Splits| s.train.iter().map(|x| x.ef_label.unwrap()).collect::<Vec<_>>();
    assert_eq!(labels(&make_splits(&cfg).unwrap()), labels(&make_splits(&cfg).unwrap()));
}

#[test]
fn as_labels_balanced() {
    let cfg = SynthConfig {
        train: 23,
        ..small(Task::As)
    };
    let s = make_splits(&cfg).unwrap();
    let mut counts = [0usize; AS_CLASSES];
    for x in &s.train {
        counts[x.as_label.unwrap()] += 1;
    }
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    assert!(hi - lo <= 1, "{counts:?}");
}

#[test]
fn ef_labels_spread_over_range() {
    let cfg = SynthConfig {
        train: 200,
        val: 0,
        test: 0,
        ..SynthConfig::new(Task::Ef)
    };
    let s = make_splits(&cfg).unwrap();
    let mut quarters = [0usize; 4];
    for x in &s.train {
        let y = x.ef_label.unwrap();
        assert!((0.05..=0.95).contains(&y), "label {y}");
        quarters[(((y - 0.05) / 0.9 * 4.0) as usize).min(3)] += 1;
    }
    assert!(quarters.iter().all(|&q| q >= 30), "{quarters:?}");
}

#[test]
fn masks_ignore_noise() {
    let quiet = SynthConfig {
        noise: 0.0,
        ..SynthConfig::new(Task::Ef)
    };
    let loud = SynthConfig {
        noise: 0.2,
        ..quiet.clone()
    };
    let a = gen_sample(&quiet, Split::Train, 3).unwrap();
    let b = gen_sample(&loud, Split::Train, 3).unwrap();
    assert_eq!(a.supervision, b.supervision);
    assert_ne!(a.videos, b.videos);
    assert!(b.videos.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn two_view_ef_shares_label_with_distinct_views() {
    let cfg = SynthConfig {
        k: 2,
        ..SynthConfig::new(Task::Ef)
    };
    let s = gen_sample(&cfg, Split::Test, 0).unwrap();
    assert_eq!(s.k, 2);
    assert_eq!(s.supervision.as_ref().unwrap().len(), 2);
    assert_ne!(s.frame(0, 0), s.frame(1, 0));
}

#[test]
fn export_import_round_trip() {
    for task in [Task::Ef, Task::As] {
        let cfg = small(task);
        let splits = make_splits(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), task, &splits).unwrap();
        let (t, back) = import_dataset(dir.path()).unwrap();
        assert_eq!(t, task);
        assert_eq!(back, splits);
    }
}

#[test]
fn oversized_geometry_rejected() {
    let cfg = SynthConfig {
        h: 8,
        w: 8,
        ..SynthConfig::new(Task::Ef)
    };
    assert!(make_splits(&cfg).is_err());
}
