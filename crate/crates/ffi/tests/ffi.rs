use std::ffi::{CStr, CString};
use std::ptr;

use multipose_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mp_last_error()) }.to_string_lossy().into_owned()
}

const POSES: &str = r#"{
  "width": 16, "height": 16, "fps": 8,
  "skeleton": [[0, 1], [1, 2]],
  "characters": [
    {"id": 1, "frames": [{"keypoints": [[2, 2, 1], [3, 6, 1], [3, 12, 1]]},
                         {"keypoints": [[2, 3, 1], [3, 7, 1], [3, 13, 1]]}]},
    {"id": 2, "frames": [{"keypoints": [[12, 2, 1], [12, 6, 1], [13, 12, 1]]},
                         {"keypoints": [[12, 2, 1], [11, 6, 1], [12, 12, 1]]}]}
  ]
}"#;

fn tiny_model() -> *mut MpModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mp_model_init(3, true, &mut m) }, MpStatus::Ok);
    assert!(!m.is_null());
    m
}

fn generate_frames(model: *const MpModel, seed: u64) -> Vec<f32> {
    let prompt = CString::new("red<1>, blue<2>, on gray background").unwrap();
    let poses = CString::new(POSES).unwrap();
    let mut opts = unsafe { std::mem::zeroed() };
    assert_eq!(unsafe { mp_generate_options_default(&mut opts) }, MpStatus::Ok);
    opts.steps = 2;
    opts.seed = seed;
    let mut t = ptr::null_mut();
    let st = unsafe { mp_generate(model, prompt.as_ptr(), poses.as_ptr(), &opts, &mut t) };
    assert_eq!(st, MpStatus::Ok, "{}", last_error());
    let mut dims = [0usize; 4];
    assert_eq!(unsafe { mp_tensor_ndim(t) }, 4);
    assert_eq!(unsafe { mp_tensor_dims(t, dims.as_mut_ptr(), 4) }, MpStatus::Ok);
    assert_eq!(dims, [2, 3, 16, 16]);
    let n = unsafe { mp_tensor_len(t) };
    let mut buf = vec![0.0f32; n];
    assert_eq!(unsafe { mp_tensor_copy(t, buf.as_mut_ptr(), n) }, MpStatus::Ok);
    unsafe { mp_tensor_free(t) };
    buf
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let m = tiny_model();
    let a = generate_frames(m, 5);
    let b = generate_frames(m, 5);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    unsafe { mp_model_free(m) };
}

#[test]
fn null_arguments_are_reported() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mp_model_load(ptr::null(), &mut m) }, MpStatus::NullArgument);
    assert!(last_error().contains("path"));
    assert_eq!(unsafe { mp_model_init(0, true, ptr::null_mut()) }, MpStatus::NullArgument);
    let mut t = ptr::null_mut();
    let p = CString::new("x").unwrap();
    assert_eq!(unsafe { mp_generate(ptr::null(), p.as_ptr(), p.as_ptr(), ptr::null(), &mut t) }, MpStatus::NullArgument);
    assert_eq!(unsafe { mp_tensor_len(ptr::null()) }, 0);
    unsafe {
        mp_model_free(ptr::null_mut());
        mp_tensor_free(ptr::null_mut());
        mp_string_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let mut m = ptr::null_mut();
    let p = CString::new("/nonexistent/weights.fymw").unwrap();
    assert_eq!(unsafe { mp_model_load(p.as_ptr(), &mut m) }, MpStatus::Io);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn weights_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.fymw").to_str().unwrap()).unwrap();
    let m = tiny_model();
    assert_eq!(unsafe { mp_model_save(m, path.as_ptr()) }, MpStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { mp_model_load(path.as_ptr(), &mut back) }, MpStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mp_model_parameter_count(m) }, unsafe { mp_model_parameter_count(back) });
    assert_eq!(generate_frames(m, 1), generate_frames(back, 1));
    unsafe {
        mp_model_free(m);
        mp_model_free(back);
    }
}

#[test]
fn bad_inputs_are_validation_errors() {
    let m = tiny_model();
    let mut t = ptr::null_mut();
    let poses = CString::new(POSES).unwrap();
    let bad_prompt = CString::new("red<1>, blue<1>").unwrap();
    assert_eq!(unsafe { mp_generate(m, bad_prompt.as_ptr(), poses.as_ptr(), ptr::null(), &mut t) }, MpStatus::Invalid);
    assert!(last_error().contains("prompt"), "{}", last_error());
    let prompt = CString::new("red<1>, blue<2>").unwrap();
    let bad_json = CString::new("{ nope").unwrap();
    assert_eq!(unsafe { mp_generate(m, prompt.as_ptr(), bad_json.as_ptr(), ptr::null(), &mut t) }, MpStatus::Invalid);
    let unknown = CString::new("red<1>, blue<3>").unwrap();
    assert_eq!(unsafe { mp_generate(m, unknown.as_ptr(), poses.as_ptr(), ptr::null(), &mut t) }, MpStatus::Invalid);
    assert!(t.is_null());
    let invalid_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { mp_generate(m, invalid_utf8.as_ptr().cast(), poses.as_ptr(), ptr::null(), &mut t) },
        MpStatus::Utf8
    );
    unsafe { mp_model_free(m) };
}

#[test]
fn region_masks_partition_unity() {
    let poses = CString::new(POSES).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mp_region_masks(poses.as_ptr(), 4.0, &mut t) }, MpStatus::Ok, "{}", last_error());
    let mut dims = [0usize; 4];
    assert_eq!(unsafe { mp_tensor_dims(t, dims.as_mut_ptr(), 4) }, MpStatus::Ok);
    assert_eq!(dims, [2, 2, 16, 16]);
    let mut small = [0usize; 2];
    assert_eq!(unsafe { mp_tensor_dims(t, small.as_mut_ptr(), 2) }, MpStatus::Invalid);
    let mut buf = vec![0.0f32; unsafe { mp_tensor_len(t) }];
    assert_eq!(unsafe { mp_tensor_copy(t, buf.as_mut_ptr(), buf.len()) }, MpStatus::Ok);
    let plane = 2 * 16 * 16;
    for p in 0..plane {
        assert!((buf[p] + buf[plane + p] - 1.0).abs() < 1e-5);
    }
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { mp_region_masks(poses.as_ptr(), 0.5, &mut none) }, MpStatus::Invalid);
    unsafe { mp_tensor_free(t) };
}

#[test]
fn prompt_split_over_c_strings() {
    let p = CString::new("a cat<1>, a dog<2>, in a park").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mp_split_prompt(p.as_ptr(), 2, &mut out) }, MpStatus::Ok);
    let s = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { mp_string_free(out) };
    assert_eq!(s, "a cat, in a park\na dog, in a park");
}

#[test]
fn frames_write_as_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model();
    let prompt = CString::new("red<1>, blue<2>").unwrap();
    let poses = CString::new(POSES).unwrap();
    let mut opts = unsafe { std::mem::zeroed() };
    unsafe { mp_generate_options_default(&mut opts) };
    opts.steps = 1;
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { mp_generate(m, prompt.as_ptr(), poses.as_ptr(), &opts, &mut t) }, MpStatus::Ok);
    let d = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mp_tensor_write_frames(t, d.as_ptr()) }, MpStatus::Ok);
    assert!(dir.path().join("frame_000.ppm").exists() && dir.path().join("frame_001.ppm").exists());
    unsafe {
        mp_tensor_free(t);
        mp_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/multipose.h")).unwrap();
    for name in [
        "mp_last_error",
        "mp_model_load",
        "mp_model_init",
        "mp_model_free",
        "mp_generate",
        "mp_region_masks",
        "mp_tensor_copy",
        "mp_tensor_free",
        "mp_split_prompt",
        "typedef struct MpModel MpModel",
        "MP_STATUS_OK",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"multipose.h\"\nint main(void) { MpModel *m = 0; MpStatus s = mp_model_init(1, true, &m); mp_model_free(m); return s == MP_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
