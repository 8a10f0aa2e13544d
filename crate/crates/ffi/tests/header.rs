use std::path::Path;
use std::process::Command;

fn header() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/brainrot.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let h = header();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(h.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct BrVolume BrVolume", "typedef struct BrVit BrVit", "BR_STATUS_MISSING_ARTIFACT = 6"] {
        assert!(h.contains(ty), "{ty}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-std=c99"])
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/brainrot.h"))
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "brainrot.h"

int main(void) {
    BrAssociation a;
    if (br_association(12, 5, 7, 30, &a) != BR_STATUS_OK) return 1;
    if (!(a.or_lo < a.odds_ratio && a.odds_ratio < a.or_hi) || a.corrected != 0) return 2;

    double p[3] = {30.0, 41.0, 52.0};
    double t[3] = {31.0, 40.0, 55.0};
    BrMetrics m;
    if (br_compute_metrics(p, t, 3, &m) != BR_STATUS_OK || m.n != 3) return 3;
    if (fabs(m.mae - 5.0 / 3.0) > 1e-12) return 4;

    BrVit *vit = NULL;
    if (br_vit_load("/nonexistent/vit.brvt", &vit) != BR_STATUS_MISSING_ARTIFACT) return 5;
    char msg[128];
    if (br_last_error_message(msg, sizeof msg) == 0) return 6;
    printf("%s|%.6f\n", br_version(), a.odds_ratio);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    if !lib_dir.join("libbrainrot_ffi.so").exists() {
        eprintln!("shared library not built; skipping");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    let bin = tmp.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(lib_dir)
        .args(["-lbrainrot_ffi", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).env("LD_LIBRARY_PATH", lib_dir).output().unwrap();
    assert!(run.status.success(), "C program exited with {:?}", run.status.code());
    let text = String::from_utf8_lossy(&run.stdout);
    let (version, or) = text.trim().split_once('|').unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
    assert!((or.parse::<f64>().unwrap() - 12.0 * 30.0 / (5.0 * 7.0)).abs() < 1e-5);
}
