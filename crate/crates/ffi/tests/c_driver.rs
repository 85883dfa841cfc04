use std::env;
use std::path::PathBuf;
use std::process::Command;

const DRIVER: &str = r#"
#include <stdio.h>
#include <stdlib.h>
#include "qsynth.h"

int main(void) {
    QsModel *m = NULL;
    QsSynthesis *s = NULL;
    char err[256];
    size_t need = 0;
    if (qs_model_parse("state x in [0, 1]\nbogus\n", &m) != QS_STATUS_PARSE) return 10;
    if (qs_last_error(err, sizeof err, &need) != QS_STATUS_OK) return 11;
    printf("error: %s\n", err);
    if (qs_model_bundled("ex2", &m) != QS_STATUS_OK) return 12;
    if (qs_model_set_param(m, "k", "8") != QS_STATUS_OK) return 13;
    if (qs_model_set_param(m, "nope", "1") != QS_STATUS_INVALID) return 14;
    if (qs_synthesize(m, 1, &s) != QS_STATUS_OK) return 15;
    int covered = -1;
    size_t n = 0, dom = 0;
    qs_synthesis_covered(s, &covered);
    qs_synthesis_sizes(s, &n, &dom);
    printf("covered %d states %zu dom %zu\n", covered, n, dom);
    double x = 1.0;
    int a = 7;
    if (qs_controller_action(s, &x, 1, &a) != QS_STATUS_OK) return 16;
    printf("action %d\n", a);
    if (qs_export_c(s, NULL, 0, &need) != QS_STATUS_BUFFER_TOO_SMALL) return 17;
    char *src = malloc(need);
    if (qs_export_c(s, src, need, &need) != QS_STATUS_OK) return 18;
    printf("c bytes %zu\n", need);
    free(src);
    qs_synthesis_free(s);
    qs_model_free(m);
    return 0;
}
"#;

// `cargo test` leaves the fresh archive next to the test binary in deps/.
fn static_lib() -> PathBuf {
    let exe = env::current_exe().unwrap();
    exe.parent().unwrap().join("libqsynth_ffi.a")
}

#[test]
fn header_compiles_and_links() {
    let lib = static_lib();
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("driver.c");
    std::fs::write(&c, DRIVER).unwrap();
    let bin = dir.path().join("driver");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let st = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-pedantic", "-Werror", "-I"])
        .arg(&include)
        .arg(&c)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&bin).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "exit {:?}\n{text}", out.status);
    assert!(text.contains("error: line 2: unknown directive `bogus`"), "{text}");
    assert!(text.contains("covered 1 states 36 dom 36"), "{text}");
    assert!(text.contains("action 1"), "{text}");
}
