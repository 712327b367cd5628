use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use advnmt::adversary::{Adversary, AdversaryConfig};
use advnmt::data::EOS;
use advnmt::generator::{Generator, GeneratorConfig};
use advnmt_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(anmt_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn new_generator() -> *mut AnmtGenerator {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { anmt_generator_new(10, 9, 4, 6, 3, &mut g) }, AnmtStatus::Ok);
    assert!(!g.is_null());
    g
}

#[test]
fn translate_matches_library_and_reports_required_length() {
    let g = new_generator();
    let lib = Generator::new(GeneratorConfig::new(10, 9, 4, 6), 3).unwrap();
    let src = [4u32, 7, 5];
    let expected = advnmt::decode_eval::beam_decode(&lib, &src, 4, 8).unwrap();

    let mut buf = [0u32; 16];
    let (mut len, mut score) = (0usize, 0.0);
    let st = unsafe { anmt_generator_translate(g, src.as_ptr(), 3, 4, 8, buf.as_mut_ptr(), 16, &mut len, &mut score) };
    assert_eq!(st, AnmtStatus::Ok, "{}", last_error());
    assert_eq!(&buf[..len], expected.tokens.as_slice());
    assert_eq!(score, expected.score);

    let mut need = 0usize;
    let st = unsafe { anmt_generator_translate(g, src.as_ptr(), 3, 4, 8, ptr::null_mut(), 0, &mut need, ptr::null_mut()) };
    assert_eq!(st, AnmtStatus::BufferTooSmall);
    assert_eq!(need, len);
    unsafe { anmt_generator_free(g) };
}

#[test]
fn errors_map_to_status_codes() {
    let g = new_generator();
    let mut lp = 0.0;
    let bad = [4u32, 99];
    let st = unsafe { anmt_generator_score(g, bad.as_ptr(), 2, [EOS].as_ptr(), 1, &mut lp) };
    assert_eq!(st, AnmtStatus::TokenOutOfRange);
    assert!(last_error().contains("99"));

    let st = unsafe { anmt_generator_score(g, bad.as_ptr(), 1, [EOS].as_ptr(), 1, ptr::null_mut()) };
    assert_eq!(st, AnmtStatus::NullArgument);
    let st = unsafe { anmt_generator_score(ptr::null(), bad.as_ptr(), 1, [EOS].as_ptr(), 1, &mut lp) };
    assert_eq!(st, AnmtStatus::NullArgument);

    let st = unsafe { anmt_generator_score(g, bad.as_ptr(), 1, [EOS].as_ptr(), 1, &mut lp) };
    assert_eq!(st, AnmtStatus::Ok);
    assert!(last_error().is_empty());
    assert!(lp < 0.0);

    let mut out = ptr::null_mut();
    let st = unsafe { anmt_generator_new(10, 9, 0, 6, 1, &mut out) };
    assert_ne!(st, AnmtStatus::Ok);
    assert!(out.is_null());
    unsafe { anmt_generator_free(g) };
}

#[test]
fn checkpoints_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let gp = dir.path().join("g.ckpt");
    let dp = dir.path().join("d.ckpt");
    let lib_g = Generator::new(GeneratorConfig::new(10, 9, 4, 6), 11).unwrap();
    lib_g.save(&gp).unwrap();
    let lib_d = Adversary::new(AdversaryConfig::for_generator(&lib_g, 8), &lib_g, 5).unwrap();
    lib_d.save(&dp).unwrap();

    let (mut g, mut d) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { anmt_generator_load(cpath(&gp).as_ptr(), &mut g) }, AnmtStatus::Ok);
    assert_eq!(unsafe { anmt_adversary_load(cpath(&dp).as_ptr(), &mut d) }, AnmtStatus::Ok);
    let (x, y) = ([4u32, 5, 6], [6u32, 5, EOS]);
    let (mut lp, mut p) = (0.0, 0.0);
    assert_eq!(unsafe { anmt_generator_score(g, x.as_ptr(), 3, y.as_ptr(), 3, &mut lp) }, AnmtStatus::Ok);
    assert_eq!(lp, lib_g.score(&x, &y).unwrap());
    assert_eq!(unsafe { anmt_adversary_score(d, x.as_ptr(), 3, y.as_ptr(), 2, &mut p) }, AnmtStatus::Ok);
    assert_eq!(p, lib_d.score(&x, &y[..2]).unwrap());

    // adversary file is not a generator
    let mut wrong = ptr::null_mut();
    assert_eq!(unsafe { anmt_generator_load(cpath(&dp).as_ptr(), &mut wrong) }, AnmtStatus::Checkpoint);
    assert!(wrong.is_null());
    unsafe {
        anmt_generator_free(g);
        anmt_adversary_free(d);
    }
}

#[test]
fn corpus_bleu_over_raw_arrays() {
    let a = [4u32, 5, 6, 7, 8];
    let b = [9u32, 10, 11, 12];
    let hyps = [a.as_ptr(), b.as_ptr()];
    let lens = [a.len(), b.len()];
    let mut bleu = -1.0;
    let st = unsafe { anmt_corpus_bleu(hyps.as_ptr(), lens.as_ptr(), hyps.as_ptr(), lens.as_ptr(), 2, &mut bleu) };
    assert_eq!(st, AnmtStatus::Ok);
    assert_eq!(bleu, 100.0);
    let st = unsafe { anmt_corpus_bleu(hyps.as_ptr(), lens.as_ptr(), hyps.as_ptr(), lens.as_ptr(), 0, &mut bleu) };
    assert_eq!(st, AnmtStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/advnmt.h")).unwrap();
    for sym in [
        "anmt_last_error",
        "anmt_version",
        "anmt_generator_new",
        "anmt_generator_load",
        "anmt_generator_save",
        "anmt_generator_free",
        "anmt_generator_score",
        "anmt_generator_translate",
        "anmt_adversary_load",
        "anmt_adversary_free",
        "anmt_adversary_score",
        "anmt_corpus_bleu",
        "typedef struct AnmtGenerator AnmtGenerator",
        "ANMT_STATUS_BUFFER_TOO_SMALL = 7",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

/// Directory holding this crate's build artifacts (`target/<profile>`).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_static_library() {
    let lib = artifact_dir().join("libadvnmt_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).arg(dir.path().join("g.ckpt")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok 0.1.0"));
}
