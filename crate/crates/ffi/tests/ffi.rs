use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use arpg_ffi::*;

const TINY: &str = r#"{"hidden":16,"heads":2,"pass1_layers":1,"pass2_layers":1,"grid_height":3,"grid_width":3}"#;

fn init(seed: u64) -> *mut ArpgHandle {
    let cfg = CString::new(TINY).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { arpg_model_init(cfg.as_ptr(), seed, &mut h) }, ArpgStatus::Ok);
    assert!(!h.is_null());
    h
}

fn options() -> ArpgDecodeOptions {
    let mut o = std::mem::MaybeUninit::<ArpgDecodeOptions>::uninit();
    assert_eq!(unsafe { arpg_decode_options_default(o.as_mut_ptr()) }, ArpgStatus::Ok);
    unsafe { o.assume_init() }
}

fn last_error() -> String {
    let p = arpg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generate_is_deterministic_and_in_vocab() {
    let h = init(1);
    let mut info = ArpgModelInfo::default();
    assert_eq!(unsafe { arpg_model_info(h, &mut info) }, ArpgStatus::Ok);
    assert_eq!((info.grid_height, info.grid_width, info.vocab_size), (3, 3, 16));
    let classes = [0u32, 3, 4];
    let opts = ArpgDecodeOptions { steps: 3, seed: 7, ..options() };
    let run = || {
        let mut out = vec![0u32; 27];
        let s = unsafe { arpg_generate(h, classes.as_ptr(), 3, &opts, out.as_mut_ptr(), out.len()) };
        assert_eq!(s, ArpgStatus::Ok);
        out
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|&t| t < 16));
    unsafe { arpg_model_free(h) };
}

#[test]
fn errors_set_status_and_message() {
    let h = init(2);
    let opts = options();
    let mut out = vec![0u32; 4];
    let s = unsafe { arpg_generate(h, [0u32].as_ptr(), 1, &opts, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ArpgStatus::BufferTooSmall);
    assert!(last_error().contains("9 needed"));
    let mut out = vec![0u32; 9];
    let s = unsafe { arpg_generate(h, [9u32].as_ptr(), 1, &opts, out.as_mut_ptr(), 9) };
    assert_eq!(s, ArpgStatus::Config);
    let s = unsafe { arpg_generate(ptr::null(), [0u32].as_ptr(), 1, &opts, out.as_mut_ptr(), 9) };
    assert_eq!(s, ArpgStatus::NullPointer);
    let bad = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { arpg_model_load(bad.as_ptr(), &mut m) }, ArpgStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    unsafe { arpg_model_free(h) };
    unsafe { arpg_model_free(ptr::null_mut()) };
}

#[test]
fn inpaint_keeps_known_cells_after_save_load() {
    let h = init(3);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { arpg_model_save(h, path.as_ptr()) }, ArpgStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { arpg_model_load(path.as_ptr(), &mut loaded) }, ArpgStatus::Ok);
    let tokens: Vec<u32> = (0..9).map(|i| (i * 5 % 16) as u32).collect();
    let known: Vec<u8> = (0..9).map(|i| u8::from(i % 2 == 0)).collect();
    let mut out = vec![0u32; 9];
    let opts = ArpgDecodeOptions { steps: 2, ..options() };
    let s = unsafe { arpg_inpaint(loaded, tokens.as_ptr(), known.as_ptr(), 9, 1, &opts, out.as_mut_ptr()) };
    assert_eq!(s, ArpgStatus::Ok);
    for i in (0..9).step_by(2) {
        assert_eq!(out[i], tokens[i]);
    }
    unsafe {
        arpg_model_free(loaded);
        arpg_model_free(h);
    }
}

#[test]
fn schedule_and_param_count() {
    let mut counts = [0usize; 4];
    let s = unsafe { arpg_schedule_counts(ArpgSchedule::Arccos, 4, 16, counts.as_mut_ptr(), 4) };
    assert_eq!(s, ArpgStatus::Ok);
    assert_eq!(counts, [3, 2, 4, 7]);
    let s = unsafe { arpg_schedule_counts(ArpgSchedule::Arccos, 4, 16, counts.as_mut_ptr(), 3) };
    assert_eq!(s, ArpgStatus::BufferTooSmall);

    let three = CString::new(r#"{"hidden":16,"heads":2,"pass2_layers":3}"#).unwrap();
    let (mut shared, mut split) = (0u64, 0u64);
    assert_eq!(unsafe { arpg_param_count(three.as_ptr(), 1, &mut shared) }, ArpgStatus::Ok);
    assert_eq!(unsafe { arpg_param_count(three.as_ptr(), 0, &mut split) }, ArpgStatus::Ok);
    // Three per-layer wk/wv pairs replace one shared d×2d projection.
    assert_eq!(split - shared, 3 * 2 * 16 * 16 - 2 * 16 * 16);
    let cfg = CString::new(TINY).unwrap();
    assert_eq!(unsafe { arpg_param_count(cfg.as_ptr(), 1, &mut shared) }, ArpgStatus::Ok);
    let h = init(0);
    let mut info = ArpgModelInfo::default();
    unsafe { arpg_model_info(h, &mut info) };
    assert_eq!(info.num_parameters as u64, shared);
    unsafe { arpg_model_free(h) };
    let bad = CString::new("{\"hidden\":15}").unwrap();
    assert_eq!(unsafe { arpg_param_count(bad.as_ptr(), 1, &mut shared) }, ArpgStatus::Config);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/arpg.h");
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
