use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use varc::checkpoint::{Checkpoint, CheckpointMeta};
use varc::config::RunConfig;
use varc::synthetic::held_out_set;
use varc::vit::{VitConfig, VitModel};
use varc_ffi::*;

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let mut cfg = VitConfig::tiny(12, 16, 1, 2);
    cfg.num_task_embeddings = 1;
    let model = VitModel::new(cfg.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1)).unwrap();
    let run = RunConfig {
        canvas_size: 12,
        ttt_epochs: 2,
        ttt_warmup_epochs: 1,
        num_aux: 3,
        views_per_aux: 2,
        max_scale: 2,
        ..RunConfig::default()
    };
    let meta = CheckpointMeta {
        model: cfg,
        seed: 1,
        epoch: 0,
        data_hash: String::new(),
        task_ids: vec!["t".into()],
        adam_step: None,
        run: serde_json::to_value(&run).unwrap(),
    };
    let path = dir.join("tiny.ckpt");
    Checkpoint::from_model(&model, None, meta).save(&path).unwrap();
    path
}

fn last_error() -> String {
    let p = varc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_predict_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let ck = CString::new(tiny_checkpoint(dir.path()).to_str().unwrap()).unwrap();
    let set = held_out_set(3, 3, 4);
    let task = &set.tasks()[0];
    let json = CString::new(task.to_json().to_string()).unwrap();
    let id = CString::new(task.task_id.as_str()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(varc_model_load(ck.as_ptr(), &mut model), VarcStatus::Ok);
        assert!(varc_model_num_params(model) > 0);
        assert_eq!(varc_model_canvas_size(model), 12);

        let mut t = ptr::null_mut();
        assert_eq!(varc_task_from_json(json.as_ptr(), id.as_ptr(), &mut t), VarcStatus::Ok);
        assert_eq!(varc_task_num_inputs(t), 1);

        let mut opts = std::mem::zeroed::<VarcPredictOptions>();
        assert_eq!(varc_predict_options_default(model, &mut opts), VarcStatus::Ok);
        assert_eq!((opts.ttt_epochs, opts.num_aux, opts.views_per_aux), (2, 3, 2));

        let mut pred = ptr::null_mut();
        assert_eq!(varc_predict(model, t, &opts, &mut pred), VarcStatus::Ok, "{}", last_error());
        assert_eq!(varc_prediction_num_inputs(pred), 1);
        // An untrained model often fails to decode any view; both outcomes
        // exercise the accessors.
        let n = varc_prediction_num_candidates(pred, 0);
        assert!(n <= 6);
        let (mut rows, mut cols, mut votes) = (0usize, 0usize, 0usize);
        if n > 0 {
            assert_eq!(varc_prediction_candidate(pred, 0, 0, &mut rows, &mut cols, &mut votes, ptr::null_mut(), 0), VarcStatus::Ok);
            assert!(rows > 0 && cols > 0 && votes > 0);
            let mut cells = vec![255u8; rows * cols];
            let short = cells.len() - 1;
            if short > 0 {
                assert_eq!(
                    varc_prediction_candidate(pred, 0, 0, &mut rows, &mut cols, &mut votes, cells.as_mut_ptr(), short),
                    VarcStatus::BufferTooSmall
                );
            }
            assert_eq!(
                varc_prediction_candidate(pred, 0, 0, &mut rows, &mut cols, &mut votes, cells.as_mut_ptr(), cells.len()),
                VarcStatus::Ok
            );
            assert!(cells.iter().all(|&c| c < 10));
        }
        assert_eq!(varc_prediction_candidate(pred, 0, n, &mut rows, &mut cols, &mut votes, ptr::null_mut(), 0), VarcStatus::OutOfRange);
        assert_eq!(varc_prediction_candidate(pred, 1, 0, &mut rows, &mut cols, &mut votes, ptr::null_mut(), 0), VarcStatus::OutOfRange);

        let s = varc_prediction_to_json(pred);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
        assert!(v[&task.task_id][0]["attempt_1"].is_array());
        varc_string_free(s);

        varc_prediction_free(pred);
        varc_task_free(t);
        varc_model_free(model);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(varc_model_load(ptr::null(), &mut model), VarcStatus::NullPointer);
        assert!(model.is_null());
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(varc_model_load(missing.as_ptr(), &mut model), VarcStatus::Io);
        assert!(last_error().contains("/nonexistent/x.ckpt"));

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"NOTACHECKPOINT").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(varc_model_load(junk.as_ptr(), &mut model), VarcStatus::Data);

        let mut t = ptr::null_mut();
        let bad = CString::new("{\"train\": []}").unwrap();
        let id = CString::new("x").unwrap();
        assert_eq!(varc_task_from_json(bad.as_ptr(), id.as_ptr(), &mut t), VarcStatus::Data);
        assert!(t.is_null());

        let ok = CString::new("{}").unwrap();
        assert_eq!(varc_task_from_json(ok.as_ptr(), ptr::null(), &mut t), VarcStatus::NullPointer);
        assert!(varc_prediction_to_json(ptr::null()).is_null());

        // Null handles are accepted by the free functions and accessors.
        varc_model_free(ptr::null_mut());
        varc_task_free(ptr::null_mut());
        varc_prediction_free(ptr::null_mut());
        assert_eq!(varc_model_num_params(ptr::null()), 0);
        assert_eq!(varc_prediction_num_candidates(ptr::null(), 0), 0);
    }
    let v = unsafe { CStr::from_ptr(varc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// The static library from this build: `target/<profile>/deps`, where test
/// builds leave it, or `target/<profile>` after a plain `cargo build`.
fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    [deps.join("libvarc_ffi.a"), deps.parent().unwrap().join("libvarc_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
        .expect("libvarc_ffi.a is built alongside the tests")
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("varc.h").exists(), "header not generated");
    let lib = static_lib();
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "varc.h"
int main(void) {
    VarcModel *m = NULL;
    VarcStatus s = varc_model_load("/nonexistent.ckpt", &m);
    if (s != VARC_STATUS_IO || m != NULL) return 1;
    if (varc_last_error_message() == NULL) return 2;
    VarcTask *t = NULL;
    s = varc_task_from_json("{\"train\":[{\"input\":[[1]],\"output\":[[2]]}],\"test\":[{\"input\":[[1]]}]}", "c", &t);
    if (s != VARC_STATUS_OK || varc_task_num_inputs(t) != 1) return 3;
    varc_task_free(t);
    printf("%s\n", varc_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("a C compiler is available");
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "smoke exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
