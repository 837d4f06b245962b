//! Exercises the C ABI through the Rust-side symbols.

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use actbit_ffi::*;

const TINY: &str = r#"{"input_dim":2,"output_dim":1,"layers":[
 {"tag":"vision","activation":"tanh","weight":[[0.5,-0.25],[1.0,0.75]],"bias":[0.1,-0.2]},
 {"tag":"action_head","activation":"identity","weight":[[1.5,-2.0]],"bias":[0.05]}]}"#;

fn last_error() -> Option<String> {
    let p = actbit_last_error_message();
    if p.is_null() {
        return None;
    }
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { actbit_string_free(p) };
    Some(s)
}

fn tiny_model() -> *mut ActbitModel {
    let json = CString::new(TINY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { actbit_model_from_json(json.as_ptr(), &mut m) }, ActbitStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn model_round_trip_and_forward() {
    let m = tiny_model();
    unsafe {
        assert_eq!(actbit_model_input_dim(m), 2);
        assert_eq!(actbit_model_output_dim(m), 1);
        assert_eq!(actbit_model_num_channels(m), 3);

        let obs = [0.3, -0.4];
        let mut act = [0.0];
        assert_eq!(actbit_model_act(m, obs.as_ptr(), 2, act.as_mut_ptr(), 1), ActbitStatus::Ok);
        let h0 = (0.5 * 0.3 + 0.25 * 0.4 + 0.1f64).tanh();
        let h1 = (0.3 - 0.75 * 0.4 - 0.2f64).tanh();
        assert!((act[0] - (1.5 * h0 - 2.0 * h1 + 0.05)).abs() < 1e-12);

        let mut json = ptr::null_mut();
        assert_eq!(actbit_model_to_json(m, &mut json), ActbitStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(actbit_model_from_json(json, &mut again), ActbitStatus::Ok);
        let mut act2 = [0.0];
        actbit_model_act(again, obs.as_ptr(), 2, act2.as_mut_ptr(), 1);
        assert_eq!(act, act2);
        actbit_string_free(json);
        actbit_model_free(again);
        actbit_model_free(m);
    }
}

#[test]
fn errors_set_thread_local_message() {
    let m = tiny_model();
    unsafe {
        let obs = [0.0; 3];
        let mut act = [0.0];
        let st = actbit_model_act(m, obs.as_ptr(), 3, act.as_mut_ptr(), 1);
        assert_eq!(st, ActbitStatus::ShapeMismatch);
        assert!(last_error().unwrap().contains("shape"));

        let mut act2 = [0.0; 2];
        let st = actbit_model_act(m, obs.as_ptr(), 2, act2.as_mut_ptr(), 2);
        assert_eq!(st, ActbitStatus::ShapeMismatch);

        assert_eq!(actbit_model_act(ptr::null(), obs.as_ptr(), 2, act.as_mut_ptr(), 1), ActbitStatus::NullPointer);
        assert_eq!(last_error().unwrap(), "model is null");

        assert_eq!(actbit_model_act(m, obs.as_ptr(), 2, act.as_mut_ptr(), 1), ActbitStatus::Ok);
        assert!(last_error().is_none());

        let bad = CString::new("{\"input_dim\":2}").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(actbit_model_from_json(bad.as_ptr(), &mut out), ActbitStatus::Parse);
        assert!(out.is_null());

        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(actbit_model_load(missing.as_ptr(), &mut out), ActbitStatus::Io);
        assert!(last_error().unwrap().contains("/nonexistent/model.json"));
        actbit_model_free(m);

        // The message is per thread.
        std::thread::spawn(|| assert!(last_error().is_none())).join().unwrap();
        actbit_model_free(ptr::null_mut());
        actbit_string_free(ptr::null_mut());
    }
}

#[test]
fn quantize_row_matches_bounds() {
    let row = [0.9, -0.3, 0.05, -1.2];
    let mut deq = [0.0; 4];
    let mut scale = 0.0;
    unsafe {
        assert_eq!(actbit_quantize_row(row.as_ptr(), 4, 4, deq.as_mut_ptr(), &mut scale), ActbitStatus::Ok);
        assert!((scale - 1.2 / 7.0).abs() < 1e-15);
        for (d, w) in deq.iter().zip(&row) {
            assert!((d - w).abs() <= scale / 2.0 + 1e-12);
        }
        assert_eq!(actbit_quantize_row(row.as_ptr(), 4, 16, deq.as_mut_ptr(), ptr::null_mut()), ActbitStatus::Ok);
        assert_eq!(deq, row);
        assert_eq!(actbit_quantize_row(row.as_ptr(), 4, 3, deq.as_mut_ptr(), ptr::null_mut()), ActbitStatus::InvalidArgument);
        assert!(last_error().unwrap().contains("bit-width 3"));
    }
}

#[test]
fn allocate_from_csv_and_write_bitmap() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sens.csv");
    let mut text = String::from("layer,channel,bits,score,method\n");
    for (ch, k) in [(0, 1.0), (1, 100.0)] {
        for (bits, s) in [(0, 1.0), (2, 0.25), (4, 0.0625), (8, 0.004)] {
            text.push_str(&format!("0,{ch},{bits},{},exact_single_step\n", k * s));
        }
    }
    std::fs::write(&csv, text).unwrap();
    let m = tiny_model();
    unsafe {
        let path = CString::new(csv.to_str().unwrap()).unwrap();
        let mut t = ptr::null_mut();
        assert_eq!(actbit_table_load(path.as_ptr(), &mut t), ActbitStatus::Ok);
        assert_eq!(actbit_table_len(t), 8);
        let mut s = 0.0;
        assert_eq!(actbit_table_score(t, 0, 1, 2, &mut s), ActbitStatus::Ok);
        assert_eq!(s, 25.0);
        assert_eq!(actbit_table_score(t, 1, 0, 2, &mut s), ActbitStatus::MissingEntry);

        let mut a = ptr::null_mut();
        assert_eq!(actbit_allocate(m, t, 8.0, &mut a), ActbitStatus::Ok);
        let mut avg = 0.0;
        actbit_allocation_average_bits(a, &mut avg);
        assert!(avg <= 8.0);
        let (mut b0, mut b1, mut head) = (0, 0, 0);
        actbit_allocation_bits(a, 0, 0, &mut b0);
        actbit_allocation_bits(a, 0, 1, &mut b1);
        actbit_allocation_bits(a, 1, 0, &mut head);
        assert!(b1 >= b0, "more sensitive channel keeps more bits ({b0} vs {b1})");
        assert_eq!(head, 16);

        let out = dir.path().join("bitmap.json");
        let out_c = CString::new(out.to_str().unwrap()).unwrap();
        assert_eq!(actbit_allocation_save_bitmap(m, a, 8, out_c.as_ptr()), ActbitStatus::Ok);
        let written = std::fs::read_to_string(&out).unwrap();
        assert!(written.contains("\"activation_bits\": 8"), "{written}");
        assert_eq!(written.matches("\"zero_point\"").count(), 2);

        let mut none = ptr::null_mut();
        assert_eq!(actbit_allocate(m, t, 0.0, &mut none), ActbitStatus::BudgetInfeasible);
        actbit_allocation_free(a);
        actbit_table_free(t);
        actbit_model_free(m);
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/actbit.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["actbit_model_load", "actbit_allocate", "actbit_last_error_message", "ACTBIT_STATUS_OK = 0", "typedef struct ActbitModel ActbitModel"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let Ok(status) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).status() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
