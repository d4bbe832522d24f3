//! C ABI over `mart-core`.
//!
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Every fallible call returns a
//! [`MartStatus`]; on failure [`mart_last_error`] describes the cause until
//! the next failing call on the same thread. Panics are caught and reported
//! as [`MartStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use mart_core::dsp::AudioBuffer;
use mart_core::eval::{embed_tracks, roc_auc, EmbeddingSet};
use mart_core::hac::{build_tree, ClipTree};
use mart_core::train::{load_checkpoint, Checkpoint};
use mart_core::MartError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MartStatus {
    Ok = 0,
    /// Invalid argument or configuration.
    Usage = 1,
    /// Unreadable or malformed data.
    Data = 2,
    /// Non-finite values or an undefined result.
    Numeric = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// An index was out of range.
    OutOfRange = 5,
    /// The library panicked; the handle involved should be freed.
    Panic = 6,
}

/// Crop tree.
pub struct MartTree(ClipTree);

/// Loaded training checkpoint.
pub struct MartCheckpoint(Checkpoint);

/// Identified embedding rows.
pub struct MartEmbeddings(EmbeddingSet);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: MartStatus, msg: &str) -> MartStatus {
    set_error(msg);
    status
}

fn from_core(e: MartError) -> MartStatus {
    let status = match e.exit_code() {
        1 => MartStatus::Usage,
        3 => MartStatus::Numeric,
        _ => MartStatus::Data,
    };
    fail(status, &e.to_string())
}

fn guard(f: impl FnOnce() -> MartStatus) -> MartStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(MartStatus::Panic, "internal panic"))
}

/// Message for the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mart_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds an `m`-ary tree of `n` levels over `root_len` samples.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mart_tree_build(root_len: usize, m: usize, n: usize, out: *mut *mut MartTree) -> MartStatus {
    guard(|| {
        if out.is_null() {
            return fail(MartStatus::NullPointer, "out is null");
        }
        match build_tree(root_len, m, n) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(MartTree(t)));
                MartStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a tree. Null is ignored.
///
/// # Safety
/// `tree` must come from [`mart_tree_build`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mart_tree_free(tree: *mut MartTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Total node count, or 0 for a null handle.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mart_tree_node_count(tree: *const MartTree) -> usize {
    tree.as_ref().map_or(0, |t| t.0.node_count())
}

/// Half-open sample span of node `index` at `level`.
///
/// # Safety
/// `tree` must be a live handle; `start` and `end` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mart_tree_span(
    tree: *const MartTree,
    level: usize,
    index: usize,
    start: *mut usize,
    end: *mut usize,
) -> MartStatus {
    guard(|| {
        let Some(t) = tree.as_ref() else {
            return fail(MartStatus::NullPointer, "tree is null");
        };
        if start.is_null() || end.is_null() {
            return fail(MartStatus::NullPointer, "span outputs are null");
        }
        match t.0.node(level, index) {
            Some(node) => {
                *start = node.start;
                *end = node.end;
                MartStatus::Ok
            }
            None => fail(MartStatus::OutOfRange, &format!("no node {index} at level {level}")),
        }
    })
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, MartStatus> {
    if path.is_null() {
        return Err(fail(MartStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(MartStatus::Usage, "path is not UTF-8"))
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mart_checkpoint_load(path: *const c_char, out: *mut *mut MartCheckpoint) -> MartStatus {
    guard(|| {
        if out.is_null() {
            return fail(MartStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(path) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(MartCheckpoint(ck)));
                MartStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a checkpoint. Null is ignored.
///
/// # Safety
/// `ck` must come from [`mart_checkpoint_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mart_checkpoint_free(ck: *mut MartCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Embedding width of a checkpoint, or 0 for a null handle.
///
/// # Safety
/// `ck` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mart_checkpoint_embedding_dim(ck: *const MartCheckpoint) -> usize {
    ck.as_ref().map_or(0, |c| c.0.config.model.d_e())
}

/// Embeds one mono track into `out`, which holds `out_len` floats and must
/// be at least [`mart_checkpoint_embedding_dim`] long.
///
/// # Safety
/// `samples` must point to `len` floats and `out` to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mart_embed(
    ck: *const MartCheckpoint,
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
) -> MartStatus {
    guard(|| {
        let Some(ck) = ck.as_ref() else {
            return fail(MartStatus::NullPointer, "checkpoint is null");
        };
        if samples.is_null() || out.is_null() {
            return fail(MartStatus::NullPointer, "buffer is null");
        }
        let dim = ck.0.config.model.d_e();
        if out_len < dim {
            return fail(MartStatus::OutOfRange, &format!("output holds {out_len} floats, need {dim}"));
        }
        let audio = match AudioBuffer::new(std::slice::from_raw_parts(samples, len).to_vec(), sample_rate) {
            Ok(a) => a,
            Err(e) => return from_core(e),
        };
        match embed_tracks(&ck.0.config, &ck.0.store, &[&audio]) {
            Ok(rows) => {
                std::slice::from_raw_parts_mut(out, dim).copy_from_slice(&rows[0]);
                MartStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Reads an embeddings file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mart_embeddings_read(path: *const c_char, out: *mut *mut MartEmbeddings) -> MartStatus {
    guard(|| {
        if out.is_null() {
            return fail(MartStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match EmbeddingSet::read(path) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(MartEmbeddings(set)));
                MartStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases an embedding set. Null is ignored.
///
/// # Safety
/// `set` must come from [`mart_embeddings_read`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mart_embeddings_free(set: *mut MartEmbeddings) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Row count, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mart_embeddings_len(set: *const MartEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Row width, or 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mart_embeddings_dim(set: *const MartEmbeddings) -> usize {
    set.as_ref().map_or(0, |s| s.0.dim())
}

/// Copies row `i` into `out`, which holds `out_len` floats.
///
/// # Safety
/// `set` must be a live handle and `out` must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn mart_embeddings_row(
    set: *const MartEmbeddings,
    i: usize,
    out: *mut f32,
    out_len: usize,
) -> MartStatus {
    guard(|| {
        let Some(s) = set.as_ref() else {
            return fail(MartStatus::NullPointer, "set is null");
        };
        if out.is_null() {
            return fail(MartStatus::NullPointer, "out is null");
        }
        if i >= s.0.len() || out_len < s.0.dim() {
            return fail(MartStatus::OutOfRange, &format!("row {i} into {out_len} floats"));
        }
        std::slice::from_raw_parts_mut(out, s.0.dim()).copy_from_slice(s.0.row(i));
        MartStatus::Ok
    })
}

/// ROC-AUC of `n` scores against 0/1 labels (any nonzero byte is positive).
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mart_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MartStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return fail(MartStatus::NullPointer, "argument is null");
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
        match roc_auc(s, &l) {
            Ok(v) => {
                *out = v;
                MartStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}
