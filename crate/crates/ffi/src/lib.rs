//! C interface to the emfrec engine.
//!
//! Every function returns an [`EmfStatus`]. On failure the message is
//! available from [`emf_last_error`] on the same thread. Strings handed out
//! by the library are released with [`emf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use emfrec::corpus::{Domain, ItemCatalog, SeqItem};
use emfrec::embedstore::{index_path_for, load_matrix};
use emfrec::evaluator::{ndcg_at_k, reciprocal_rank};
use emfrec::model::Model;
use emfrec::promptkit::{build_prompt, template_hash};
use emfrec::Error;

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmfStatus {
    Ok = 0,
    NullPointer = 1,
    Utf8 = 2,
    Io = 3,
    Parse = 4,
    Schema = 5,
    Format = 6,
    Shape = 7,
    Config = 8,
    Split = 9,
    Invalid = 10,
    Numeric = 11,
    Json = 12,
    Panic = 13,
}

/// Codes for the `int32_t` domain arguments.
#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmfDomain {
    X = 0,
    Y = 1,
}

fn domain_arg(d: i32) -> Result<Domain, Failure> {
    match d {
        x if x == EmfDomain::X as i32 => Ok(Domain::X),
        y if y == EmfDomain::Y as i32 => Ok(Domain::Y),
        other => Err(Failure(EmfStatus::Invalid, format!("unknown domain {other}"))),
    }
}

/// A loaded model with its catalog.
pub struct EmfEngine {
    model: Model,
    catalog: ItemCatalog,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EmfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => EmfStatus::Io,
            Error::Parse { .. } => EmfStatus::Parse,
            Error::Schema { .. } => EmfStatus::Schema,
            Error::Format(_) => EmfStatus::Format,
            Error::Shape(_) => EmfStatus::Shape,
            Error::Config(_) => EmfStatus::Config,
            Error::Split(_) => EmfStatus::Split,
            Error::Invalid(_) => EmfStatus::Invalid,
            Error::Numeric(_) => EmfStatus::Numeric,
            Error::Json(_) => EmfStatus::Json,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EmfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            EmfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(EmfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EmfStatus::Utf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn give_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(EmfStatus::Invalid, "string contains NUL".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn emf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn emf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint with the catalog in `data_dir/catalog.tsv` and the
/// image and text embedding files (index files alongside, `<path>.idx`).
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn emf_engine_open(
    checkpoint: *const c_char,
    data_dir: *const c_char,
    emb_img: *const c_char,
    emb_tex: *const c_char,
    out: *mut *mut EmfEngine,
) -> EmfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let ckpt = Path::new(str_arg(checkpoint, "checkpoint")?);
        let data = Path::new(str_arg(data_dir, "data_dir")?);
        let img = Path::new(str_arg(emb_img, "emb_img")?);
        let tex = Path::new(str_arg(emb_tex, "emb_tex")?);
        let catalog = ItemCatalog::read_tsv(&data.join("catalog.tsv"))?;
        let e_img = Arc::new(load_matrix(img, &index_path_for(img), &catalog, None)?);
        let e_tex = Arc::new(load_matrix(tex, &index_path_for(tex), &catalog, None)?);
        let model = Model::load(ckpt, &catalog, e_img, e_tex)?;
        *out = Box::into_raw(Box::new(EmfEngine { model, catalog }));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`emf_engine_open`], freed once.
#[no_mangle]
pub unsafe extern "C" fn emf_engine_free(engine: *mut EmfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emf_engine_num_items(engine: *const EmfEngine, domain: i32, out: *mut usize) -> EmfStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        *out_arg(out, "out")? = e.catalog.domain_range(domain_arg(domain)?).len();
        Ok(())
    })
}

/// Catalog id of the item at `index`, as a new string.
///
/// # Safety
/// `engine` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emf_engine_item_id(engine: *const EmfEngine, index: usize, out: *mut *mut c_char) -> EmfStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out_arg(out, "out")?;
        let item = e
            .catalog
            .item(index)
            .ok_or_else(|| Failure(EmfStatus::Invalid, format!("index {index} outside catalog")))?;
        *out = give_string(item.item_id.clone())?;
        Ok(())
    })
}

/// Ranks `target`-domain items for a history of catalog ids given oldest
/// first. Writes up to `k` catalog indices and scores, best first, and the
/// number written to `out_len`.
///
/// # Safety
/// `history` must hold `history_len` valid strings; `out_indices` and
/// `out_scores` must have room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn emf_engine_recommend(
    engine: *const EmfEngine,
    history: *const *const c_char,
    history_len: usize,
    target: i32,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> EmfStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out_len = out_arg(out_len, "out_len")?;
        *out_len = 0;
        let ids = slice_arg(history, history_len, "history")?;
        let mut context = Vec::with_capacity(ids.len());
        for (t, &p) in ids.iter().enumerate() {
            let id = str_arg(p, "history entry")?;
            let item = e
                .catalog
                .index_of(id)
                .ok_or_else(|| Failure(EmfStatus::Invalid, format!("unknown item {id:?}")))?;
            context.push(SeqItem {
                item,
                domain: e.catalog.domain_of(item),
                timestamp: t as u64,
            });
        }
        let top = e.model.recommend(&context, domain_arg(target)?, k)?;
        if !top.is_empty() && (out_indices.is_null() || out_scores.is_null()) {
            return Err(null("output buffer"));
        }
        for (i, (item, score)) in top.iter().enumerate() {
            *out_indices.add(i) = *item;
            *out_scores.add(i) = *score;
        }
        *out_len = top.len();
        Ok(())
    })
}

/// Reciprocal rank of candidate `truth` among `n` scores; ties favor the
/// lower index.
///
/// # Safety
/// `scores` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emf_reciprocal_rank(scores: *const f64, n: usize, truth: usize, out: *mut f64) -> EmfStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        *out_arg(out, "out")? = reciprocal_rank(s, truth)?;
        Ok(())
    })
}

/// # Safety
/// `scores` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emf_ndcg_at_k(scores: *const f64, n: usize, truth: usize, k: usize, out: *mut f64) -> EmfStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        *out_arg(out, "out")? = ndcg_at_k(s, truth, k)?;
        Ok(())
    })
}

/// The enrichment prompt for one item, as a new string.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn emf_build_prompt(
    item_id: *const c_char,
    domain_label: *const c_char,
    title: *const c_char,
    out: *mut *mut c_char,
) -> EmfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = build_prompt(
            str_arg(item_id, "item_id")?,
            str_arg(domain_label, "domain_label")?,
            str_arg(title, "title")?,
        )?;
        *out = give_string(p)?;
        Ok(())
    })
}

/// Hex SHA-256 of the prompt template, as a new string.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emf_template_hash(out: *mut *mut c_char) -> EmfStatus {
    guard(|| {
        *out_arg(out, "out")? = give_string(template_hash())?;
        Ok(())
    })
}
