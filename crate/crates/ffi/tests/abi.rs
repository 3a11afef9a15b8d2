use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ismp_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ismp_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn simulate(benchmark: u32, paths: usize, steps: usize) -> (IsmpStatus, *mut IsmpEnsemble) {
    let sigma = [1.0];
    let mut h = ptr::null_mut();
    let s = unsafe {
        ismp_simulate_benchmark(benchmark, sigma.as_ptr(), 1, 0.0, 1.0, steps, paths, 0.0, 11, &mut h)
    };
    (s, h)
}

#[test]
fn handle_lifecycle() {
    let (s, h) = simulate(3, 50, 32);
    assert_eq!(s, IsmpStatus::Ok);
    assert!(!h.is_null());
    assert_eq!(last_error(), "");

    let (mut paths, mut steps) = (0usize, 0usize);
    assert_eq!(unsafe { ismp_ensemble_shape(h, &mut paths, &mut steps) }, IsmpStatus::Ok);
    assert_eq!((paths, steps), (50, 32));

    let mut buf = vec![f64::NAN; paths * (steps + 1)];
    assert_eq!(
        unsafe { ismp_ensemble_copy_states(h, buf.as_mut_ptr(), buf.len() - 1) },
        IsmpStatus::BufferTooSmall
    );
    assert!(last_error().contains("need"));
    assert_eq!(
        unsafe { ismp_ensemble_copy_states(h, buf.as_mut_ptr(), buf.len()) },
        IsmpStatus::Ok
    );
    assert!(buf.iter().step_by(steps + 1).all(|&x| x == 0.0));
    assert!(buf.iter().all(|x| x.is_finite()));

    let (mut m, mut se) = (0.0, 0.0);
    assert_eq!(unsafe { ismp_local_time_mean(h, 0.0, &mut m, &mut se) }, IsmpStatus::Ok);
    assert!(m > 0.0 && se > 0.0);
    unsafe { ismp_ensemble_free(h) };
    unsafe { ismp_ensemble_free(ptr::null_mut()) };
}

#[test]
fn same_seed_same_states() {
    let read = |h: *mut IsmpEnsemble| {
        let mut buf = vec![0.0; 20 * 17];
        assert_eq!(unsafe { ismp_ensemble_copy_states(h, buf.as_mut_ptr(), buf.len()) }, IsmpStatus::Ok);
        unsafe { ismp_ensemble_free(h) };
        buf
    };
    let a = read(simulate(2, 20, 16).1);
    let b = read(simulate(2, 20, 16).1);
    assert_eq!(a, b);
}

#[test]
fn errors_map_to_codes() {
    let (s, h) = simulate(4, 10, 8);
    assert_eq!(s, IsmpStatus::InvalidArgument);
    assert!(h.is_null());
    assert!(last_error().contains("unknown benchmark"));

    let (s, _) = simulate(1, 10, 0);
    assert_eq!(s, IsmpStatus::InvalidArgument);

    let mut h = ptr::null_mut();
    let s = unsafe { ismp_simulate_benchmark(1, ptr::null(), 1, 0.0, 1.0, 8, 8, 0.0, 0, &mut h) };
    assert_eq!(s, IsmpStatus::NullPointer);

    let (mut p, mut n) = (0, 0);
    assert_eq!(unsafe { ismp_ensemble_shape(ptr::null(), &mut p, &mut n) }, IsmpStatus::NullPointer);
}

#[test]
fn run_config_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "kind = \"simulate\"\nseed = 1\n[model]\nbenchmark = \"B1\"\n").unwrap();
    let path = CString::new(cfg.to_str().unwrap()).unwrap();
    let mut code = -1;
    assert_eq!(unsafe { ismp_run_config(path.as_ptr(), &mut code) }, IsmpStatus::Config);
    assert!(last_error().contains("sigma"));
    assert_eq!(code, -1);

    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "kind = \"simulate\"\nseed = 1\noutput = \"{}\"\n[model]\nbenchmark = \"B1\"\nsigma = [1.0]\n[mc]\nsteps = 8\npaths = 8\n",
            out.display()
        ),
    )
    .unwrap();
    assert_eq!(unsafe { ismp_run_config(path.as_ptr(), &mut code) }, IsmpStatus::Ok);
    assert_eq!(code, 0);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ismp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(include.join("ismp.h")).unwrap();
    for name in [
        "ismp_simulate_benchmark",
        "ismp_ensemble_shape",
        "ismp_ensemble_copy_states",
        "ismp_local_time_mean",
        "ismp_ensemble_free",
        "ismp_last_error_message",
        "ismp_run_config",
        "typedef struct IsmpEnsemble IsmpEnsemble",
        "ISMP_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(header.contains(name), "{name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ismp.h\"\nint main(void) {\n  IsmpEnsemble *h = 0;\n  double s[1] = {1.0};\n  \
         IsmpStatus st = ismp_simulate_benchmark(1, s, 1, 0.0, 1.0, 8, 8, 0.0, 1, &h);\n  \
         ismp_ensemble_free(h);\n  return st == ISMP_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    match Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile: {e}"),
    }
}
