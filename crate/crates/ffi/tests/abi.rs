use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use micronas::data::{DataSource, DatasetSpec, SplitFractions, SyntheticRecipe};
use micronas::deploy::{export_model, RetrainConfig, Storage, TrainedModel};
use micronas::hwcost::{characterize, enumerate_signatures, DeviceProfile, LatencyTable};
use micronas::pipeline::retrain_quantized;
use micronas::space::{SearchSpaceConfig, SuperNet};
use micronas::tensor::Tensor3;
use micronas_ffi::*;

struct Fixture {
    dir: tempfile::TempDir,
    model: TrainedModel,
    window: Tensor3,
}

fn fixture() -> Fixture {
    let mut space = SearchSpaceConfig::new(32, 10, 4);
    space.sf_s = 1;
    space.f_max_tr = 8;
    space.g_tr = 4;
    space.f_max_sf = 8;
    space.g_sf = 4;
    let data = DatasetSpec {
        source: DataSource::Synthetic(SyntheticRecipe::new(4, 32, 10, 10, 5)),
        ts_l: 32,
        window_stride: None,
        split: SplitFractions::default(),
        seed: 5,
    }
    .build()
    .unwrap();
    let net = SuperNet::new(&space, 0).unwrap();
    let layout = net.layout();
    let choices: Vec<usize> = layout.groups().iter().map(|g| g.len() - 1).collect();
    let desc = layout.descriptor(&choices);
    let rc = RetrainConfig {
        epochs: 2,
        ..RetrainConfig::default()
    };
    let model = retrain_quantized(&desc, &data, &rc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_model(&model, &dir.path().join("float.json"), Storage::Float).unwrap();
    export_model(&model, &dir.path().join("int8.json"), Storage::Int8).unwrap();
    let mut bare = model.clone();
    bare.quant = None;
    export_model(&bare, &dir.path().join("bare.json"), Storage::Float).unwrap();
    let table = characterize(&DeviceProfile::default(), &enumerate_signatures(layout)).unwrap();
    table.save(&dir.path().join("table.json")).unwrap();
    LatencyTable::new("empty".into(), Default::default()).save(&dir.path().join("empty.json")).unwrap();
    let window = data.val()[0].0.clone();
    Fixture { dir, model, window }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mn_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn load(f: &Fixture, name: &str) -> *mut MnModel {
    let mut m = ptr::null_mut();
    let p = cpath(&f.dir.path().join(name));
    assert_eq!(mn_model_load(p.as_ptr(), &mut m), MN_OK, "{}", last_error());
    m
}

unsafe fn table(f: &Fixture, name: &str) -> *mut MnTable {
    let mut t = ptr::null_mut();
    let p = cpath(&f.dir.path().join(name));
    assert_eq!(mn_table_load(p.as_ptr(), &mut t), MN_OK, "{}", last_error());
    t
}

/// Undoes the stored normalization so the ABI sees a raw window.
fn raw(f: &Fixture) -> Vec<f64> {
    let n = f.model.normalization.as_ref().unwrap();
    let s = f.window.shape().s;
    f.window.data().iter().enumerate().map(|(i, v)| v * n.std[i % s] + n.mean[i % s]).collect()
}

#[test]
fn predictions_match_the_library() {
    let f = fixture();
    let x = raw(&f);
    unsafe {
        assert!(!CStr::from_ptr(mn_version()).to_str().unwrap().is_empty());
        for (name, int8) in [("float.json", 0), ("float.json", 1), ("int8.json", 1)] {
            let m = load(&f, name);
            let (mut t, mut s, mut c) = (0, 0, 0);
            assert_eq!(mn_model_shape(m, &mut t, &mut s, &mut c), MN_OK);
            assert_eq!((t, s, c), (32, 10, 4));
            assert_eq!(mn_model_has_int8(m), 1);
            let mut probs = [0.0; 4];
            assert_eq!(mn_model_predict(m, x.as_ptr(), x.len(), int8, probs.as_mut_ptr(), 4), MN_OK, "{}", last_error());
            let want = f.model.predict(&f.window, int8 != 0).unwrap();
            for (a, b) in probs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{name} int8={int8}: {a} vs {b}");
            }
            mn_model_free(m);
        }
    }
}

#[test]
fn replay_agrees_with_estimate() {
    let f = fixture();
    unsafe {
        let m = load(&f, "float.json");
        let t = table(&f, "table.json");
        let (mut lat, mut mem) = (0.0, 0u64);
        let (mut est_lat, mut est_mem) = (0.0, 0.0);
        assert_eq!(mn_model_replay(m, t, &mut lat, &mut mem), MN_OK, "{}", last_error());
        assert_eq!(mn_model_estimate(m, t, &mut est_lat, &mut est_mem), MN_OK, "{}", last_error());
        assert!(lat > 0.0 && mem > 0);
        assert!((lat - est_lat).abs() <= 1e-9 * lat, "{lat} vs {est_lat}");
        assert_eq!(mem as f64, est_mem);
        mn_table_free(t);
        mn_model_free(m);
    }
}

#[test]
fn failures_return_codes_and_messages() {
    let f = fixture();
    let x = raw(&f);
    unsafe {
        let mut m = ptr::null_mut();
        let missing = cpath(&f.dir.path().join("absent.json"));
        assert_eq!(mn_model_load(missing.as_ptr(), &mut m), MN_ERR_IO);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(mn_model_load(ptr::null(), &mut m), MN_ERR_NULL);

        std::fs::write(f.dir.path().join("junk.json"), "{\"format\":").unwrap();
        let junk = cpath(&f.dir.path().join("junk.json"));
        assert_eq!(mn_model_load(junk.as_ptr(), &mut m), MN_ERR_FORMAT);

        let m = load(&f, "float.json");
        let mut probs = [0.0; 4];
        assert_eq!(mn_model_predict(m, x.as_ptr(), x.len() - 1, 0, probs.as_mut_ptr(), 4), MN_ERR_INPUT);
        assert!(last_error().contains("expects"));
        assert_eq!(mn_model_predict(m, x.as_ptr(), x.len(), 0, probs.as_mut_ptr(), 3), MN_ERR_BUFFER);
        assert_eq!(mn_model_predict(ptr::null(), x.as_ptr(), x.len(), 0, probs.as_mut_ptr(), 4), MN_ERR_NULL);

        let empty = table(&f, "empty.json");
        let (mut lat, mut mem) = (0.0, 0u64);
        assert_eq!(mn_model_replay(m, empty, &mut lat, &mut mem), MN_ERR_MISSING_ENTRY);
        mn_table_free(empty);
        mn_model_free(m);

        let bare = load(&f, "bare.json");
        assert_eq!(mn_model_has_int8(bare), 0);
        assert_eq!(mn_model_predict(bare, x.as_ptr(), x.len(), 1, probs.as_mut_ptr(), 4), MN_ERR_INPUT);
        mn_model_free(bare);

        mn_model_free(ptr::null_mut());
        mn_table_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/micronas.h")).unwrap();
    for name in [
        "mn_version", "mn_last_error", "mn_model_load", "mn_model_free", "mn_model_shape", "mn_model_has_int8",
        "mn_model_predict", "mn_table_load", "mn_table_free", "mn_model_replay", "mn_model_estimate",
        "typedef struct MnModel MnModel", "#define MN_ERR_MISSING_ENTRY 5",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn c_program_links_against_the_shared_library() {
    let f = fixture();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    assert!(lib_dir.join("libmicronas_ffi.so").exists(), "no shared library in {}", lib_dir.display());
    let exe = f.dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lmicronas_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe)
        .arg(f.dir.path().join("int8.json"))
        .arg(f.dir.path().join("table.json"))
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert!(text.starts_with("classes=4 sum=1.000000 latency_ms="), "{text}");
}
