use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::Arc;

use emfrec::corpus::{CatalogItem, Domain, ItemCatalog, SeqItem};
use emfrec::embedstore::{write_matrix, EmbeddingMatrix, Modality};
use emfrec::model::{Model, ModelConfig};
use emfrec_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    data: CString,
    img: CString,
    tex: CString,
    model: Model,
}

fn matrix(m: Modality, rows: usize, dim: usize, salt: usize) -> EmbeddingMatrix {
    let data = (0..rows * dim)
        .map(|i| if i < dim { 0.0 } else { ((i * 7 + salt) % 11) as f32 - 5.0 })
        .collect();
    let mut e = EmbeddingMatrix::from_data(m, rows, dim, data).unwrap();
    e.normalize_rows();
    e
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut items = Vec::new();
    for (d, n) in [(Domain::X, 5), (Domain::Y, 4)] {
        for i in 0..n {
            items.push(CatalogItem {
                item_id: format!("{}{i}", d.as_str().to_lowercase()),
                domain: d,
                title: format!("t{i}"),
            });
        }
    }
    let catalog = ItemCatalog::new(items).unwrap();
    catalog.write_tsv(&dir.path().join("catalog.tsv")).unwrap();
    let img = matrix(Modality::Image, 10, 4, 1);
    let tex = matrix(Modality::Text, 10, 4, 3);
    let (ip, tp) = (dir.path().join("img.bin"), dir.path().join("tex.bin"));
    write_matrix(&img, &catalog, &ip, &dir.path().join("img.bin.idx")).unwrap();
    write_matrix(&tex, &catalog, &tp, &dir.path().join("tex.bin.idx")).unwrap();
    let cfg = ModelConfig { q: 4, e: 4, max_len: 6, ..Default::default() };
    let model = Model::init(cfg, &catalog, Arc::new(img), Arc::new(tex), 3).unwrap();
    let ckpt = dir.path().join("model.emfc");
    model.save(&ckpt).unwrap();
    Fixture {
        ckpt: cstr(&ckpt),
        data: cstr(dir.path()),
        img: cstr(&ip),
        tex: cstr(&tp),
        _dir: dir,
        model,
    }
}

fn open(f: &Fixture) -> *mut EmfEngine {
    let mut engine = ptr::null_mut();
    let s = unsafe { emf_engine_open(f.ckpt.as_ptr(), f.data.as_ptr(), f.img.as_ptr(), f.tex.as_ptr(), &mut engine) };
    assert_eq!(s, EmfStatus::Ok);
    assert!(!engine.is_null());
    engine
}

fn last_error() -> String {
    let p = emf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    emf_string_free(p);
    s
}

#[test]
fn engine_recommends_like_the_library() {
    let f = fixture();
    let engine = open(&f);
    let mut n = 0usize;
    unsafe {
        assert_eq!(emf_engine_num_items(engine, EmfDomain::X as i32, &mut n), EmfStatus::Ok);
        assert_eq!(n, 5);
        assert_eq!(emf_engine_num_items(engine, EmfDomain::Y as i32, &mut n), EmfStatus::Ok);
        assert_eq!(n, 4);
        assert_eq!(emf_engine_num_items(engine, 7, &mut n), EmfStatus::Invalid);
    }

    let names = ["x1", "y0", "x3", "y2"];
    let owned: Vec<CString> = names.iter().map(|s| CString::new(*s).unwrap()).collect();
    let history: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
    let (mut idx, mut scores, mut len) = ([0usize; 3], [0.0f64; 3], 0usize);
    let s = unsafe {
        emf_engine_recommend(
            engine,
            history.as_ptr(),
            history.len(),
            EmfDomain::Y as i32,
            3,
            idx.as_mut_ptr(),
            scores.as_mut_ptr(),
            &mut len,
        )
    };
    assert_eq!(s, EmfStatus::Ok);
    assert_eq!(len, 3);

    let context: Vec<SeqItem> = [(1, Domain::X), (5, Domain::Y), (3, Domain::X), (7, Domain::Y)]
        .iter()
        .enumerate()
        .map(|(t, &(item, domain))| SeqItem { item, domain, timestamp: t as u64 })
        .collect();
    let want = f.model.recommend(&context, Domain::Y, 3).unwrap();
    for i in 0..3 {
        assert_eq!(idx[i], want[i].0);
        assert_eq!(scores[i], want[i].1);
    }

    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(emf_engine_item_id(engine, idx[0], &mut out), EmfStatus::Ok);
        assert!(take(out).starts_with('y'));
        assert_eq!(emf_engine_item_id(engine, 99, &mut out), EmfStatus::Invalid);
        emf_engine_free(engine);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let f = fixture();
    let missing = CString::new("/nonexistent/model.emfc").unwrap();
    let mut engine = ptr::null_mut();
    let s = unsafe { emf_engine_open(missing.as_ptr(), f.data.as_ptr(), f.img.as_ptr(), f.tex.as_ptr(), &mut engine) };
    assert_eq!(s, EmfStatus::Io);
    assert!(engine.is_null());
    assert!(last_error().contains("nonexistent"));

    let s = unsafe { emf_engine_open(ptr::null(), f.data.as_ptr(), f.img.as_ptr(), f.tex.as_ptr(), &mut engine) };
    assert_eq!(s, EmfStatus::NullPointer);

    let engine = open(&f);
    assert!(emf_last_error().is_null());
    let bogus = CString::new("nope").unwrap();
    let history = [bogus.as_ptr()];
    let mut len = 9usize;
    let s = unsafe {
        emf_engine_recommend(engine, history.as_ptr(), 1, 0, 2, ptr::null_mut(), ptr::null_mut(), &mut len)
    };
    assert_eq!(s, EmfStatus::Invalid);
    assert_eq!(len, 0);
    assert!(last_error().contains("nope"));

    let y_only = CString::new("y1").unwrap();
    let history = [y_only.as_ptr()];
    let (mut idx, mut sc) = ([0usize; 2], [0.0f64; 2]);
    let s = unsafe {
        emf_engine_recommend(engine, history.as_ptr(), 1, 0, 2, idx.as_mut_ptr(), sc.as_mut_ptr(), &mut len)
    };
    assert_eq!(s, EmfStatus::Invalid);
    unsafe { emf_engine_free(engine) };
}

#[test]
fn metrics_and_prompts() {
    let scores = [0.1, 0.9, 0.8, 0.7, 0.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(emf_reciprocal_rank(scores.as_ptr(), 5, 0, &mut v), EmfStatus::Ok);
        assert_eq!(v, 0.25);
        assert_eq!(emf_ndcg_at_k(scores.as_ptr(), 5, 2, 5, &mut v), EmfStatus::Ok);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(emf_ndcg_at_k(scores.as_ptr(), 5, 2, 0, &mut v), EmfStatus::Invalid);
        assert_eq!(emf_reciprocal_rank(scores.as_ptr(), 5, 5, &mut v), EmfStatus::Invalid);
        assert_eq!(emf_reciprocal_rank(ptr::null(), 5, 0, &mut v), EmfStatus::NullPointer);
    }

    let (id, dom, title) = (CString::new("i1").unwrap(), CString::new("Movie").unwrap(), CString::new("Inception").unwrap());
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(emf_build_prompt(id.as_ptr(), dom.as_ptr(), title.as_ptr(), &mut out), EmfStatus::Ok);
        assert_eq!(take(out), emfrec::promptkit::build_prompt("i1", "Movie", "Inception").unwrap());
        let blank = CString::new(" ").unwrap();
        assert_eq!(emf_build_prompt(id.as_ptr(), dom.as_ptr(), blank.as_ptr(), &mut out), EmfStatus::Invalid);
        assert_eq!(emf_template_hash(&mut out), EmfStatus::Ok);
        assert_eq!(take(out), emfrec::promptkit::template_hash());
        emf_string_free(ptr::null_mut());
        emf_engine_free(ptr::null_mut());
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    if std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let lib = target_dir().join("libemfrec_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "emfrec.h"
int main(void) {
    double s[3] = {0.2, 0.9, 0.5};
    double rr = 0.0;
    if (emf_reciprocal_rank(s, 3, 2, &rr) != EMF_STATUS_OK || rr != 0.5) return 1;
    if (emf_ndcg_at_k(s, 3, 2, 0, &rr) != EMF_STATUS_INVALID) return 2;
    if (emf_last_error() == NULL) return 3;
    char *p = NULL;
    if (emf_build_prompt("i", "Book", "Dune", &p) != EMF_STATUS_OK) return 4;
    int ok = strstr(p, "type of Book with Dune.") != NULL;
    emf_string_free(p);
    if (!ok) return 5;
    EmfEngine *e = NULL;
    if (emf_engine_open("/nonexistent", "/nonexistent", "a", "b", &e) != EMF_STATUS_IO || e != NULL) return 6;
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
