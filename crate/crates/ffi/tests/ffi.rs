// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use transcirc::analysis::ks_two_sample;
use transcirc::corpus::{Corpus, CorpusConfig};
use transcirc::model::{ComponentId, Model, ModelConfig};
use transcirc::numerics::Matrix;
use transcirc::patching::{standard_patch_score, subspace_patch_score, PatchingConfig};
use transcirc_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    path: CString,
    model: Model,
    corpus: Corpus,
}

fn fixture() -> Fixture {
    let corpus = Corpus::generate(&CorpusConfig {
        lexicon_size: 4,
        shift_size: 0,
        ..CorpusConfig::default()
    })
    .unwrap();
    let model = Model::new(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ff: 16,
        vocab_size: corpus.vocab.size(),
        max_seq: 12,
        seed: 5,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ttw");
    model.save(&p).unwrap();
    Fixture {
        path: CString::new(p.to_str().unwrap()).unwrap(),
        _dir: dir,
        model,
        corpus,
    }
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        tc_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn load(f: &Fixture) -> *mut TcModel {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { tc_model_load(f.path.as_ptr(), &mut h) }, TcStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn load_config_and_logits() {
    let f = fixture();
    let h = load(&f);
    let mut cfg = TcModelConfig::default();
    assert_eq!(unsafe { tc_model_config(h, &mut cfg) }, TcStatus::Ok);
    assert_eq!(
        (cfg.n_layers, cfg.d_model, cfg.vocab_size),
        (2, 8, f.corpus.vocab.size())
    );

    let toks = &f.corpus.pairs[0].positive;
    let mut out = vec![0.0; cfg.vocab_size];
    let s = unsafe { tc_model_end_logits(h, toks.as_ptr(), toks.len(), out.as_mut_ptr(), out.len()) };
    assert_eq!(s, TcStatus::Ok);
    let want = f.model.end_logits(&[toks], &[]).unwrap();
    assert_eq!(out, want[0]);

    let s = unsafe { tc_model_end_logits(h, toks.as_ptr(), toks.len(), out.as_mut_ptr(), 3) };
    assert_eq!(s, TcStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));

    let bad = [u32::MAX];
    let s = unsafe { tc_model_end_logits(h, bad.as_ptr(), 1, out.as_mut_ptr(), out.len()) };
    assert_ne!(s, TcStatus::Ok);
    unsafe { tc_model_free(h) };
}

#[test]
fn patch_scores_match_the_library() {
    let f = fixture();
    let h = load(&f);
    let cfg = PatchingConfig::default();
    let p = &f.corpus.pairs[1];
    let (mut delta, mut flagged) = (0.0, -1);
    let s = unsafe {
        tc_patch_score(
            h,
            p.positive.as_ptr(),
            p.negative.as_ptr(),
            p.positive.len(),
            p.target,
            1,
            0,
            ptr::null(),
            0,
            cfg.epsilon,
            &mut delta,
            &mut flagged,
        )
    };
    assert_eq!(s, TcStatus::Ok);
    let want = standard_patch_score(&f.model, p, ComponentId::head(1, 0), &cfg).unwrap();
    assert_eq!(delta, want.delta);
    assert_eq!(flagged, want.flagged as i32);

    // Row-major 8×2 basis on the first two coordinates, patching MLP 0.
    let mut basis = vec![0.0; 16];
    basis[0] = 1.0;
    basis[3] = 1.0;
    let s = unsafe {
        tc_patch_score(
            h,
            p.positive.as_ptr(),
            p.negative.as_ptr(),
            p.positive.len(),
            p.target,
            0,
            -1,
            basis.as_ptr(),
            2,
            cfg.epsilon,
            &mut delta,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, TcStatus::Ok);
    let w = Matrix::new(8, 2, basis).unwrap();
    let want = subspace_patch_score(&f.model, p, ComponentId::mlp(0), &w, &cfg).unwrap();
    assert_eq!(delta, want.delta);

    let s = unsafe {
        tc_patch_score(
            h,
            p.positive.as_ptr(),
            p.negative.as_ptr(),
            p.positive.len(),
            p.target,
            7,
            0,
            ptr::null(),
            0,
            cfg.epsilon,
            &mut delta,
            ptr::null_mut(),
        )
    };
    assert_eq!(s, TcStatus::InvalidArgument);
    unsafe { tc_model_free(h) };
}

#[test]
fn ks_and_identify() {
    let a: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
    let b: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 / 7.0).collect();
    let (mut d, mut p) = (0.0, 0.0);
    let s = unsafe { tc_ks_two_sample(a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut d, &mut p) };
    assert_eq!(s, TcStatus::Ok);
    let want = ks_two_sample(&a, &b).unwrap();
    assert_eq!((d, p), (want.statistic, want.p_value));
    let s = unsafe { tc_ks_two_sample(a.as_ptr(), 0, b.as_ptr(), b.len(), &mut d, &mut p) };
    assert_eq!(s, TcStatus::InvalidArgument);
    let nan = [f64::NAN];
    let s = unsafe { tc_ks_two_sample(nan.as_ptr(), 1, b.as_ptr(), b.len(), &mut d, &mut p) };
    assert_eq!(s, TcStatus::NonFinite);

    // Every column is 2·e₀ plus a varying multiple of e₁; with r = 1 the
    // direction left over is e₀.
    let (dim, n) = (4, 6);
    let mut m = vec![0.0; dim * n];
    for j in 0..n {
        m[j] = 2.0;
        m[n + j] = j as f64 - 2.5;
    }
    let mut s_out = vec![0.0; dim];
    let s = unsafe { tc_identify_direction(m.as_ptr(), dim, n, 1, s_out.as_mut_ptr(), dim) };
    assert_eq!(s, TcStatus::Ok);
    assert!((s_out[0] - 1.0).abs() < 1e-12);
    assert!(s_out[1..].iter().all(|x| x.abs() < 1e-12));
    let s = unsafe { tc_identify_direction(m.as_ptr(), dim, n, 1, s_out.as_mut_ptr(), 2) };
    assert_eq!(s, TcStatus::BufferTooSmall);
    let s = unsafe { tc_identify_direction(m.as_ptr(), dim, n, 9, s_out.as_mut_ptr(), dim) };
    assert_eq!(s, TcStatus::InvalidArgument);
}

#[test]
fn null_pointers_and_bad_files() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { tc_model_load(ptr::null(), &mut h) }, TcStatus::NullPointer);
    assert!(last_error().contains("path"));
    let f = fixture();
    assert_eq!(
        unsafe { tc_model_load(f.path.as_ptr(), ptr::null_mut()) },
        TcStatus::NullPointer
    );
    let mut cfg = TcModelConfig::default();
    assert_eq!(unsafe { tc_model_config(ptr::null(), &mut cfg) }, TcStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.ttw").unwrap();
    assert_eq!(unsafe { tc_model_load(missing.as_ptr(), &mut h) }, TcStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ttw");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tc_model_load(junk.as_ptr(), &mut h) }, TcStatus::Format);
    assert!(!last_error().is_empty());

    unsafe { tc_model_free(ptr::null_mut()) };
}

#[test]
fn error_message_sizing() {
    let mut h = ptr::null_mut();
    unsafe { tc_model_load(ptr::null(), &mut h) };
    let needed = unsafe { tc_last_error_message(ptr::null_mut(), 0) };
    assert_eq!(needed, "path is null".len() + 1);
    let mut small = vec![1 as c_char; 5];
    unsafe { tc_last_error_message(small.as_mut_ptr(), small.len()) };
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_str().unwrap(), "path");

    let f = fixture();
    let h = load(&f);
    assert_eq!(unsafe { tc_last_error_message(ptr::null_mut(), 0) }, 1);
    unsafe { tc_model_free(h) };

    let v = unsafe { CStr::from_ptr(tc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
