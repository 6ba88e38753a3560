//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "bcsi.h"

int main(void) {
    BcsiVolume *img = NULL, *lab = NULL;
    BcsiMetrics m;
    size_t dims[3];
    if (bcsi_generate_case(3, "{\"dims\":[16,16,16],\"radius_range\":[2.0,4.0]}", &img, &lab) != BCSI_STATUS_OK) {
        fprintf(stderr, "generate: %s\n", bcsi_last_error());
        return 1;
    }
    if (bcsi_volume_dims(img, dims) != BCSI_STATUS_OK || dims[0] != 16 || dims[2] != 16) return 2;
    if (bcsi_case_metrics(lab, lab, 0.5, &m) != BCSI_STATUS_OK || m.dice != 100.0 || !m.has_distances) return 3;
    if (bcsi_case_metrics(NULL, lab, 0.5, &m) != BCSI_STATUS_NULL_POINTER || strlen(bcsi_last_error()) == 0) return 4;
    if (bcsi_lambda_u(10, 10) != 0.1) return 5;
    printf("%s %.1f\n", bcsi_version(), m.dice);
    bcsi_volume_free(img);
    bcsi_volume_free(lab);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    }
    // Test binaries live next to the library artifacts in target/<profile>/deps.
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = deps.join("libbcsi_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), format!("{} 100.0", env!("CARGO_PKG_VERSION")));
}
