//! Acceptance criteria 1–8. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail. The training criteria run the default configurations
//! and take several minutes on one core.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use gemtrans_core::harness::commands::{load_model, CHECKPOINT_FILE};
use gemtrans_core::harness::{cmd_gradcheck, cmd_train, evaluate, train, GradcheckOptions, RunConfig, TrainOutcome};
use gemtrans_core::model::{infer, EncoderConfig, GemTransModel, Level, Task, VideoSample};
use gemtrans_core::proto::{branch_accuracy, collect_tokens, cosine, train_prototype_branch};
use gemtrans_core::supervision::{spatial_attention_loss, temporal_attention_loss, CoarseMask, TemporalMode};
use gemtrans_core::synth::{make_splits, Splits};
use gemtrans_core::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_SECONDS: f64 = 120.0;
const SUM_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-6;
const RUN_SECONDS: f64 = 20.0 * 60.0;
const MAE_RATIO: f64 = 0.5;
const MIN_R2: f64 = 0.3;
const MIN_AS_ACCURACY: f64 = 0.5;
const MIN_DETECTION: f64 = 0.75;
const PROTO_GAP: f64 = 0.15;
const RANDOM_TOKENS: usize = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let opts = GradcheckOptions {
        h: GRAD_H,
        tol: GRAD_TOL,
        ..GradcheckOptions::default()
    };
    let s = cmd_gradcheck(&opts).expect("gradcheck runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = s.tasks.iter().map(|t| t.report.max_rel_error).fold(0.0, f64::max);
    let tasks: Vec<String> = s
        .tasks
        .iter()
        .map(|t| format!("{} {:.2e}", t.task.name(), t.report.max_rel_error))
        .collect();
    outcome(
        s.passed && worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "max rel error {} (tol {GRAD_TOL:e}), {secs:.1}s (limit {GRAD_SECONDS}s)",
            tasks.join(", ")
        ),
    )
}

/// Random pixels for one sample of the given geometry.
fn random_sample(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> VideoSample {
    let n = cfg.k * cfg.t * cfg.h * cfg.w;
    VideoSample {
        sample_id: "random".into(),
        k: cfg.k,
        t: cfg.t,
        h: cfg.h,
        w: cfg.w,
        videos: (0..n).map(|_| rng.gen::<f32>()).collect(),
        ef_label: None,
        as_label: None,
        supervision: None,
    }
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut vectors, mut worst, mut negative) = (0usize, 0.0f64, 0usize);
    let mut check = |v: &[f64]| {
        vectors += 1;
        worst = worst.max((v.iter().sum::<f64>() - 1.0).abs());
        negative += v.iter().filter(|&&a| a < 0.0).count();
    };
    for pass in 0..100 {
        let side = [16, 24, 32][rng.gen_range(0..3)];
        let cfg = EncoderConfig {
            k: rng.gen_range(1..=3),
            t: rng.gen_range(1..=8),
            h: side,
            w: side,
            layers: rng.gen_range(1..=2),
            ..EncoderConfig::tiny()
        };
        let mut model = GemTransModel::<f64>::init(cfg.clone(), pass).unwrap();
        // wide weights give peaked attention, not the near-uniform rows of a fresh init
        let gain = rng.gen_range(1.0..50.0);
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= gain);
        }
        let samples: Vec<VideoSample> = (0..2).map(|_| random_sample(&mut rng, &cfg)).collect();
        let refs: Vec<&VideoSample> = samples.iter().collect();
        let task = if pass % 2 == 0 { Task::Ef } else { Task::As };
        for rec in infer(&model, &refs, task, 2).unwrap().attention {
            rec.spatial.iter().flatten().for_each(|v| check(v));
            rec.temporal.iter().for_each(|v| check(v));
            check(&rec.video);
        }
    }
    outcome(
        worst <= SUM_TOL && negative == 0,
        format!("{vectors} vectors over 100 passes, max |sum - 1| {worst:.2e} (tol {SUM_TOL:e}), {negative} negative entries"),
    )
}

fn loss_exactness() -> Outcome {
    let value = |attn: &[f64], f: &dyn Fn(&mut Tape<f64>, gemtrans_core::tensor::Var) -> gemtrans_core::tensor::Var| {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_f64(&[attn.len()], attn).unwrap());
        let l = f(&mut t, a);
        t.value(l).item()
    };
    let mode = TemporalMode::Frames;
    let got = [
        value(&[0.25; 4], &|t, a| {
            spatial_attention_loss(t, a, &CoarseMask(vec![1, 0, 0, 1])).unwrap()
        }),
        value(&[0.25; 4], &|t, a| temporal_attention_loss(t, a, 0, 2, mode).unwrap()),
        value(&[0.5, 0.0, 0.5, 0.0], &|t, a| {
            temporal_attention_loss(t, a, 0, 2, mode).unwrap()
        }),
    ];
    let want = [0.125, 1.125, 0.5];
    let pass = got.iter().zip(&want).all(|(g, w)| (g - w).abs() <= LOSS_TOL);
    outcome(
        pass,
        format!(
            "spatial {:.9}, temporal {:.9} and {:.9} (tol {LOSS_TOL:e})",
            got[0], got[1], got[2]
        ),
    )
}

struct EfRun {
    name: &'static str,
    outcome: TrainOutcome,
    seconds: f64,
}

/// Default EF run for the full 2000 steps, no early stopping.
fn ef_runs(splits: &Splits) -> Vec<EfRun> {
    let base = {
        let mut c = RunConfig::new(Task::Ef);
        c.train.patience = 0;
        c
    };
    [("full", 1.0, 1.0), ("no-spatial", 0.0, 1.0), ("no-temporal", 1.0, 0.0)]
        .into_iter()
        .map(|(name, ls, lt)| {
            let mut cfg = base.clone();
            cfg.attn.lambda_spatial = ls;
            cfg.attn.lambda_temporal = lt;
            let start = Instant::now();
            let outcome = train(&cfg, splits).expect("EF training");
            let seconds = start.elapsed().as_secs_f64();
            eprintln!("  ef {name}: {seconds:.0}s, best step {}", outcome.history.best_step);
            EfRun { name, outcome, seconds }
        })
        .collect()
}

fn supervision_effect(runs: &[EfRun], splits: &Splits) -> Outcome {
    let val: Vec<&VideoSample> = splits.val.iter().collect();
    let stats: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let m = evaluate(&r.outcome.last, &val, Task::Ef, 32).unwrap();
            (m.in_mask_fraction.unwrap(), m.ed_es_mass.unwrap())
        })
        .collect();
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let (full, no_s, no_t) = (stats[0], stats[1], stats[2]);
    outcome(
        full.0 > no_s.0 && full.1 > no_t.1 && slowest <= RUN_SECONDS,
        format!(
            "in-mask {:.4} vs {:.4} without spatial, ED/ES mass {:.4} vs {:.4} without temporal, slowest run {slowest:.0}s",
            full.0, no_s.0, full.1, no_t.1
        ),
    )
}

fn ef_skill(full: &EfRun, splits: &Splits) -> Outcome {
    assert_eq!(full.name, "full");
    let test: Vec<&VideoSample> = splits.test.iter().collect();
    let m = evaluate(&full.outcome.best, &test, Task::Ef, 32).unwrap();
    let (mae, base, r2) = (m.mae.unwrap(), m.baseline_mae.unwrap(), m.r2.unwrap());
    outcome(
        mae <= MAE_RATIO * base && r2 > MIN_R2,
        format!(
            "test MAE {mae:.4} vs baseline {base:.4} (limit {:.4}), R² {r2:.3} (min {MIN_R2})",
            MAE_RATIO * base
        ),
    )
}

fn as_skill(cfg: &RunConfig, splits: &Splits) -> (Outcome, GemTransModel<f32>) {
    let start = Instant::now();
    let run = train(cfg, splits).expect("AS training");
    let secs = start.elapsed().as_secs_f64();
    let test: Vec<&VideoSample> = splits.test.iter().collect();
    let m = evaluate(&run.best, &test, Task::As, 32).unwrap();
    let (acc, det) = (m.accuracy.unwrap(), m.detection_accuracy.unwrap());
    let o = outcome(
        acc >= MIN_AS_ACCURACY && det >= MIN_DETECTION && secs <= RUN_SECONDS,
        format!(
            "accuracy {acc:.3} (min {MIN_AS_ACCURACY}), detection {det:.3} (min {MIN_DETECTION}), {secs:.0}s over {} steps",
            run.history.steps_run
        ),
    );
    (o, run.best)
}

fn prototype_contract(cfg: &RunConfig, model: &GemTransModel<f32>, splits: &Splits) -> Outcome {
    let train_set: Vec<&VideoSample> = splits.train.iter().collect();
    let test: Vec<&VideoSample> = splits.test.iter().collect();
    let backbone = evaluate(model, &test, Task::As, 32).unwrap().accuracy.unwrap();
    let before = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut unchanged, mut projected, mut close) = (true, true, true);
    let mut parts = vec![];
    for level in [Level::Spatial, Level::Temporal] {
        let fit = train_prototype_branch(model, &train_set, Task::As, level, &cfg.proto).unwrap();
        unchanged &= model.params == before;

        let caches = collect_tokens(model, &train_set, Task::As, level, &cfg.proto, 32).unwrap();
        let pool: Vec<&[f32]> = caches
            .iter()
            .flat_map(|c| (0..c.tokens.shape()[0]).map(move |i| c.tokens.row(i)))
            .collect();
        let mut beaten = 0;
        for e in &fit.bank.projection {
            let proto = fit.bank.prototype(e.prototype);
            let cache = caches.iter().find(|c| c.sample_id == e.sample_id).unwrap();
            let at = cache
                .refs
                .iter()
                .position(|r| (r.k, r.t, r.s) == (e.k, e.t, e.s))
                .unwrap();
            let own = cosine(cache.tokens.row(at), proto);
            beaten += pool
                .choose_multiple(&mut rng, RANDOM_TOKENS)
                .filter(|tok| cosine(tok, proto) > own)
                .count();
        }
        projected &= beaten == 0;

        let acc = branch_accuracy(model, &fit.bank, &test, Task::As, &cfg.proto).unwrap();
        close &= (acc - backbone).abs() <= PROTO_GAP;
        parts.push(format!(
            "{} accuracy {acc:.3}, {beaten} random tokens closer",
            level.name()
        ));
    }
    outcome(
        unchanged && projected && close,
        format!(
            "backbone {} with accuracy {backbone:.3}; {} (gap limit {PROTO_GAP})",
            if unchanged { "bitwise unchanged" } else { "CHANGED" },
            parts.join("; ")
        ),
    )
}

fn reproducibility() -> Outcome {
    let mut cfg = RunConfig::new(Task::Ef);
    cfg.train.steps = 150;
    cfg.train.eval_every = 50;
    cfg.data.train = 64;
    cfg.proto_train = true;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&cfg, a.path()).unwrap();
    cmd_train(&cfg, b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).ok() != fs::read(b.path().join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();

    let splits = make_splits(&cfg.data).unwrap();
    let test: Vec<&VideoSample> = splits.test.iter().collect();
    let mut plain = cfg.clone();
    plain.proto_train = false;
    let c = tempfile::tempdir().unwrap();
    cmd_train(&plain, c.path()).unwrap();
    let loaded = load_model(&c.path().join(CHECKPOINT_FILE), &cfg.model).unwrap();
    let memory = train(&plain, &splits).unwrap().best;
    let same = infer(&loaded, &test, Task::Ef, 32).unwrap().predictions
        == infer(&memory, &test, Task::Ef, 32).unwrap().predictions;
    outcome(
        differing.is_empty() && same,
        format!(
            "{} files compared, differing {:?}; round-trip predictions {}",
            names.len(),
            differing,
            if same { "bitwise equal" } else { "DIFFER" }
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = vec![];
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        println!(
            "criterion {n} {name}: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "gradient oracle", gradient_oracle());
    report(2, "attention normalization", attention_normalization());
    report(3, "loss exactness", loss_exactness());

    let ef_splits = make_splits(&RunConfig::new(Task::Ef).data).unwrap();
    let runs = ef_runs(&ef_splits);
    report(4, "supervision effect", supervision_effect(&runs, &ef_splits));
    report(5, "EF skill", ef_skill(&runs[0], &ef_splits));
    drop(runs);

    let as_cfg = RunConfig::new(Task::As);
    let as_splits = make_splits(&as_cfg.data).unwrap();
    let (o, model) = as_skill(&as_cfg, &as_splits);
    report(6, "AS skill", o);
    report(7, "prototype contract", prototype_contract(&as_cfg, &model, &as_splits));
    report(8, "reproducibility", reproducibility());

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
