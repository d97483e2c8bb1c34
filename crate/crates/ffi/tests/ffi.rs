use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use gemtrans_core::harness::commands::{load_model, CHECKPOINT_FILE};
use gemtrans_core::harness::{cmd_train, RunConfig};
use gemtrans_core::model::{infer, Task};
use gemtrans_core::synth::make_splits;
use gemtrans_ffi::*;

fn trained(task: Task) -> (tempfile::TempDir, RunConfig) {
    let mut cfg = RunConfig::new(task);
    for (k, v) in [
        ("model.embed_dim", "8"),
        ("model.heads", "2"),
        ("model.layers", "1"),
        ("data.train", "8"),
        ("data.val", "4"),
        ("data.test", "4"),
        ("data.t", "4"),
        ("data.h", "16"),
        ("data.w", "16"),
        ("train.steps", "3"),
        ("train.batch_size", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    (dir, cfg)
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = gemt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(dir: &Path) -> *mut GemtModel {
    let mut m = ptr::null_mut();
    let ck = c_path(&dir.join(CHECKPOINT_FILE));
    assert_eq!(
        unsafe { gemt_model_load(ck.as_ptr(), ptr::null(), &mut m) },
        GemtStatus::Ok
    );
    assert!(!m.is_null());
    m
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(gemt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn predictions_match_the_core_bitwise() {
    for task in [Task::Ef, Task::As] {
        let (dir, cfg) = trained(task);
        let m = load(dir.path());
        let mut dims = GemtDims::default();
        let mut t = GemtTask::Ef;
        unsafe {
            assert_eq!(gemt_model_dims(m, &mut dims), GemtStatus::Ok);
            assert_eq!(gemt_model_task(m, &mut t), GemtStatus::Ok);
        }
        assert_eq!(
            (dims.k, dims.t, dims.h, dims.w, dims.patches),
            (cfg.data.k, 4, 16, 16, 4)
        );
        assert_eq!(t == GemtTask::As, task == Task::As);

        let splits = make_splits(&cfg.data).unwrap();
        let s = &splits.test[1];
        let core = load_model(&dir.path().join(CHECKPOINT_FILE), &cfg.model).unwrap();
        let expect = infer(&core, &[s], task, 1).unwrap();

        let mut out = vec![f64::NAN; dims.outputs];
        let st = unsafe { gemt_predict(m, s.videos.as_ptr(), s.videos.len(), out.as_mut_ptr(), out.len()) };
        assert_eq!(st, GemtStatus::Ok);
        assert!(gemt_last_error().is_null());
        assert_eq!(out, expect.predictions[0]);

        let (np, nt) = (dims.k * dims.t * dims.patches, dims.k * dims.t);
        let (mut sp, mut tp, mut vd) = (vec![0.0; np], vec![0.0; nt], vec![0.0; dims.k]);
        let st = unsafe {
            gemt_attention(
                m,
                s.videos.as_ptr(),
                s.videos.len(),
                sp.as_mut_ptr(),
                np,
                tp.as_mut_ptr(),
                nt,
                vd.as_mut_ptr(),
                dims.k,
            )
        };
        assert_eq!(st, GemtStatus::Ok);
        let rec = &expect.attention[0];
        assert_eq!(sp, rec.spatial.iter().flatten().flatten().copied().collect::<Vec<_>>());
        assert_eq!(tp, rec.temporal.iter().flatten().copied().collect::<Vec<_>>());
        assert_eq!(vd, rec.video);
        for row in sp.chunks(dims.patches) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        unsafe { gemt_model_free(m) };
    }
}

#[test]
fn errors_map_to_status_codes() {
    let (dir, _) = trained(Task::Ef);
    let m = load(dir.path());
    let pixels = vec![0.5f32; 4 * 16 * 16];
    let mut out = [0.0f64; 4];
    unsafe {
        assert_eq!(
            gemt_predict(ptr::null(), pixels.as_ptr(), pixels.len(), out.as_mut_ptr(), 4),
            GemtStatus::NullArgument
        );
        assert_eq!(
            gemt_predict(m, ptr::null(), 0, out.as_mut_ptr(), 4),
            GemtStatus::NullArgument
        );
        assert_eq!(
            gemt_predict(m, pixels.as_ptr(), 10, out.as_mut_ptr(), 4),
            GemtStatus::Shape
        );
        assert!(last_error().contains("1024"));
        assert_eq!(
            gemt_predict(m, pixels.as_ptr(), pixels.len(), out.as_mut_ptr(), 0),
            GemtStatus::BufferTooSmall
        );
        assert!(last_error().contains("needs 1"));

        let bright = vec![2.0f32; pixels.len()];
        assert_eq!(
            gemt_predict(m, bright.as_ptr(), bright.len(), out.as_mut_ptr(), 4),
            GemtStatus::InvalidArgument
        );

        let mut h = ptr::null_mut();
        let missing = c_path(&dir.path().join("nope.gemt"));
        assert_eq!(gemt_model_load(missing.as_ptr(), ptr::null(), &mut h), GemtStatus::Io);
        assert!(h.is_null());
        assert_eq!(
            gemt_model_load(ptr::null(), ptr::null(), &mut h),
            GemtStatus::NullArgument
        );

        let bad_cfg = dir.path().join("bad.txt");
        std::fs::write(&bad_cfg, "model.nonsense = 1\n").unwrap();
        let ck = c_path(&dir.path().join(CHECKPOINT_FILE));
        assert_eq!(
            gemt_model_load(ck.as_ptr(), c_path(&bad_cfg).as_ptr(), &mut h),
            GemtStatus::Config
        );

        let other = dir.path().join("other.txt");
        std::fs::write(&other, "model.embed_dim = 16\n").unwrap();
        assert_eq!(
            gemt_model_load(ck.as_ptr(), c_path(&other).as_ptr(), &mut h),
            GemtStatus::Checkpoint
        );

        gemt_model_free(m);
        gemt_model_free(ptr::null_mut());
    }
}

fn lib_dir() -> PathBuf {
    // target/<profile>/deps/<test-binary>
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib = lib_dir();
    if !lib.join("libgemtrans_ffi.a").exists() {
        eprintln!("static library not built at {}; skipping C link test", lib.display());
        return;
    }
    let (dir, _) = trained(Task::As);
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let cc = Command::new("cc")
        .arg(here.join("tests/smoke.c"))
        .arg("-I")
        .arg(here.join("include"))
        .arg(lib.join("libgemtrans_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output();
    let Ok(cc) = cc else {
        eprintln!("no C compiler; skipping C link test");
        return;
    };
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&exe)
        .arg(dir.path().join(CHECKPOINT_FILE))
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8(run.stdout).unwrap();
    let mut lines = text.lines();
    let first: Vec<&str> = lines.next().unwrap().split(' ').collect();
    assert_eq!(&first[..4], ["version", env!("CARGO_PKG_VERSION"), "outputs", "4"]);
    let probs: f64 = first[4..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-6);
    assert_eq!(lines.next(), Some("small 3"));
}
