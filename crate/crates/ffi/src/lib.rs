//! C ABI over the synthesis pipeline.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `_free`. Every call returns a `QsStatus`; on failure the message
//! is kept per thread and read back with `qs_last_error`. Strings are written
//! into caller buffers: `needed` always receives the full length including the
//! terminating NUL.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::size_t;

use qsynth::codegen::{emit_c, CodegenSpec};
use qsynth::linearize::{build_envelopes, linearize};
use qsynth::modelfile::{bundled, ModelFile};
use qsynth::quantize::Quantization;
use qsynth::rational::Rational;
use qsynth::synth::{synthesize, Controller, SynthOptions, SynthesisReport};
use qsynth::syntax::{parse_const, Scope};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Invalid = 4,
    Synthesis = 5,
    Codegen = 6,
    BufferTooSmall = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// A parsed model file plus parameter overrides.
pub struct QsModel {
    file: ModelFile,
    overrides: BTreeMap<String, Rational>,
}

/// A synthesized controller with its quantization.
pub struct QsSynthesis {
    controller: Controller,
    quantization: Quantization,
    report: SynthesisReport,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: QsStatus, msg: impl Into<String>) -> QsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> QsStatus) -> QsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(QsStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, QsStatus> {
    if p.is_null() {
        return Err(fail(QsStatus::NullArgument, "null string"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(QsStatus::InvalidUtf8, "string is not UTF-8"))
}

unsafe fn copy_out(s: &str, buf: *mut c_char, len: size_t, needed: *mut size_t) -> bool {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || len < n {
        return false;
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    true
}

unsafe fn write_str(s: &str, buf: *mut c_char, len: size_t, needed: *mut size_t) -> QsStatus {
    if copy_out(s, buf, len, needed) {
        QsStatus::Ok
    } else {
        fail(QsStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1))
    }
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn qs_last_error(buf: *mut c_char, len: size_t, needed: *mut size_t) -> QsStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    if copy_out(&msg, buf, len, needed) {
        QsStatus::Ok
    } else {
        QsStatus::BufferTooSmall
    }
}

/// Parses model-file text.
///
/// # Safety
/// `src` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qs_model_parse(src: *const c_char, out: *mut *mut QsModel) -> QsStatus {
    guard(|| {
        if out.is_null() {
            return fail(QsStatus::NullArgument, "null out");
        }
        let src = match text(src) {
            Ok(s) => s,
            Err(e) => return e,
        };
        match ModelFile::parse(src) {
            Ok(file) => {
                *out = Box::into_raw(Box::new(QsModel { file, overrides: BTreeMap::new() }));
                QsStatus::Ok
            }
            Err(e) => fail(QsStatus::Parse, e.to_string()),
        }
    })
}

/// Loads a bundled model (`pendulum`, `ex2`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qs_model_bundled(name: *const c_char, out: *mut *mut QsModel) -> QsStatus {
    guard(|| {
        let name = match text(name) {
            Ok(s) => s,
            Err(e) => return e,
        };
        match bundled(name) {
            Some(src) => {
                if out.is_null() {
                    return fail(QsStatus::NullArgument, "null out");
                }
                match ModelFile::parse(src) {
                    Ok(file) => {
                        *out = Box::into_raw(Box::new(QsModel { file, overrides: BTreeMap::new() }));
                        QsStatus::Ok
                    }
                    Err(e) => fail(QsStatus::Parse, e.to_string()),
                }
            }
            None => fail(QsStatus::Invalid, format!("no bundled model `{name}`")),
        }
    })
}

/// Overrides a declared parameter with a constant expression such as `1/10`.
///
/// # Safety
/// `model` must come from `qs_model_parse`/`qs_model_bundled`; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn qs_model_set_param(model: *mut QsModel, name: *const c_char, value: *const c_char) -> QsStatus {
    guard(|| {
        let Some(m) = model.as_mut() else { return fail(QsStatus::NullArgument, "null model") };
        let (name, value) = match (text(name), text(value)) {
            (Ok(n), Ok(v)) => (n, v),
            (Err(e), _) | (_, Err(e)) => return e,
        };
        if m.file.param(name).is_none() {
            return fail(QsStatus::Invalid, format!("unknown parameter `{name}`"));
        }
        let v = match parse_const(value, &Scope::default()) {
            Ok(v) => v,
            Err(e) => return fail(QsStatus::Parse, format!("`{value}`: {e}")),
        };
        let mut next = m.overrides.clone();
        next.insert(name.to_string(), v);
        if let Err(e) = m.file.instantiate(&next) {
            return fail(QsStatus::Invalid, e.to_string());
        }
        m.overrides = next;
        QsStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn qs_model_free(model: *mut QsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs linearization, abstraction and the strong solver. `threads` = 0
/// uses all cores.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qs_synthesize(model: *const QsModel, threads: size_t, out: *mut *mut QsSynthesis) -> QsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return fail(QsStatus::NullArgument, "null model") };
        if out.is_null() {
            return fail(QsStatus::NullArgument, "null out");
        }
        let inst = match m.file.instantiate(&m.overrides) {
            Ok(i) => i,
            Err(e) => return fail(QsStatus::Invalid, e.to_string()),
        };
        let p = &inst.problem;
        let lin = match build_envelopes(&p.system, &inst.envelopes).and_then(|envs| linearize(&p.system, &envs)) {
            Ok(l) => l,
            Err(e) => return fail(QsStatus::Synthesis, e.to_string()),
        };
        let opts = SynthOptions { threads: (threads > 0).then_some(threads), ..Default::default() };
        match synthesize(&lin.system, &inst.quantization, &p.init, &p.goal, inst.eps.clone(), opts) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(QsSynthesis { controller: r.controller, quantization: inst.quantization, report: r.report }));
                QsStatus::Ok
            }
            Err(e) => fail(QsStatus::Synthesis, e.to_string()),
        }
    })
}

/// # Safety
/// `syn` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn qs_synthesis_free(syn: *mut QsSynthesis) {
    if !syn.is_null() {
        drop(Box::from_raw(syn));
    }
}

/// Whether every initial abstract state is controlled (1) or not (0).
///
/// # Safety
/// `syn` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn qs_synthesis_covered(syn: *const QsSynthesis, out: *mut i32) -> QsStatus {
    let (Some(s), false) = (syn.as_ref(), out.is_null()) else { return fail(QsStatus::NullArgument, "null argument") };
    *out = s.report.i_covered as i32;
    QsStatus::Ok
}

/// Abstract state count and controlled-region size.
///
/// # Safety
/// `syn` must be a live handle; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn qs_synthesis_sizes(syn: *const QsSynthesis, num_states: *mut size_t, dom_size: *mut size_t) -> QsStatus {
    let Some(s) = syn.as_ref() else { return fail(QsStatus::NullArgument, "null synthesis") };
    if !num_states.is_null() {
        *num_states = s.controller.num_states();
    }
    if !dom_size.is_null() {
        *dom_size = s.controller.dom_size();
    }
    QsStatus::Ok
}

/// The `key: value` report text.
///
/// # Safety
/// `syn` must be a live handle; `buf` valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn qs_synthesis_report(syn: *const QsSynthesis, buf: *mut c_char, len: size_t, needed: *mut size_t) -> QsStatus {
    let Some(s) = syn.as_ref() else { return fail(QsStatus::NullArgument, "null synthesis") };
    write_str(&s.report.to_text(), buf, len, needed)
}

/// Controller action index for the concrete state `x` (`n` coordinates), or
/// -1 when `x` is outside the controlled region.
///
/// # Safety
/// `syn` must be a live handle; `x` valid for `n` doubles; `action` writable.
#[no_mangle]
pub unsafe extern "C" fn qs_controller_action(syn: *const QsSynthesis, x: *const f64, n: size_t, action: *mut i32) -> QsStatus {
    guard(|| {
        let Some(s) = syn.as_ref() else { return fail(QsStatus::NullArgument, "null synthesis") };
        if x.is_null() || action.is_null() {
            return fail(QsStatus::NullArgument, "null argument");
        }
        if n != s.quantization.states.len() {
            return fail(QsStatus::OutOfRange, format!("expected {} coordinates, got {n}", s.quantization.states.len()));
        }
        let x = std::slice::from_raw_parts(x, n);
        *action = s.quantization.quantize_f64(x).and_then(|st| s.controller.action(st)).map_or(-1, |a| a as i32);
        QsStatus::Ok
    })
}

/// C99 source of the controller with action indices as commands and -1 as
/// the fault value.
///
/// # Safety
/// `syn` must be a live handle; `buf` valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn qs_export_c(syn: *const QsSynthesis, buf: *mut c_char, len: size_t, needed: *mut size_t) -> QsStatus {
    guard(|| {
        let Some(s) = syn.as_ref() else { return fail(QsStatus::NullArgument, "null synthesis") };
        let src = CodegenSpec::with_indices(&s.controller, &s.quantization).and_then(|spec| emit_c(&spec));
        match src {
            Ok(src) => write_str(&src, buf, len, needed),
            Err(e) => fail(QsStatus::Codegen, e.to_string()),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn ex2_round() {
        unsafe {
            let mut m = ptr::null_mut();
            let name = CString::new("ex2").unwrap();
            assert_eq!(qs_model_bundled(name.as_ptr(), &mut m), QsStatus::Ok);
            let (k, v) = (CString::new("k").unwrap(), CString::new("8").unwrap());
            assert_eq!(qs_model_set_param(m, k.as_ptr(), v.as_ptr()), QsStatus::Ok);
            let mut s = ptr::null_mut();
            assert_eq!(qs_synthesize(m, 1, &mut s), QsStatus::Ok);
            let mut cov = 0;
            assert_eq!(qs_synthesis_covered(s, &mut cov), QsStatus::Ok);
            assert_eq!(cov, 1);
            let mut a = 7;
            assert_eq!(qs_controller_action(s, [-1.9].as_ptr(), 1, &mut a), QsStatus::Ok);
            assert_eq!(a, 0);
            qs_synthesis_free(s);
            qs_model_free(m);
        }
    }

    #[test]
    fn errors_are_reported() {
        unsafe {
            let mut m = ptr::null_mut();
            let bad = CString::new("state x in [0, 1]\nnope\n").unwrap();
            assert_eq!(qs_model_parse(bad.as_ptr(), &mut m), QsStatus::Parse);
            assert!(m.is_null());
            let mut need = 0;
            assert_eq!(qs_last_error(ptr::null_mut(), 0, &mut need), QsStatus::BufferTooSmall);
            let mut buf = vec![0 as c_char; need];
            assert_eq!(qs_last_error(buf.as_mut_ptr(), need, &mut need), QsStatus::Ok);
            let msg = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
            assert!(msg.contains("line 2"), "{msg}");
        }
    }
}
