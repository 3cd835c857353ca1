//! C ABI over the `space-head` library.
//!
//! Models and bundles are opaque handles created by `*_load`/`*_read` and
//! released with the matching `*_free`. Every fallible call returns an
//! [`SmhStatus`]; on failure [`smh_last_error`] describes the problem for the
//! calling thread. Panics never cross the boundary; they surface as
//! [`SmhStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use space_head::data::read_bundle;
use space_head::head::{baseline_parameter_count, load_any, parameter_count};
use space_head::metrics::{argmax, evaluate_head, predict};
use space_head::{AnyHead, Classifier, EmbeddingBundle, Error, Matrix, SpaceHeadConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// Head kind reported by [`smh_model_info`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmhHeadKind {
    Space = 0,
    /// First-token head with a ReLU pre-classifier.
    Baseline = 1,
    /// First-token single linear layer.
    Linear = 2,
}

/// Shape summary of a loaded model. `latent_dim` and `n_spaces` are zero
/// for first-token heads.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmhModelInfo {
    pub kind: SmhHeadKind,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub n_spaces: usize,
    pub n_classes: usize,
    pub parameter_count: usize,
}

/// Opaque trained head.
pub struct SmhModel {
    head: AnyHead,
}

/// Opaque embedding bundle.
pub struct SmhBundle {
    bundle: EmbeddingBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> SmhStatus {
    match e {
        Error::Io(_) => SmhStatus::Io,
        Error::NonFinite(_) => SmhStatus::Numeric,
        Error::Shape { .. } | Error::EmptyMask => SmhStatus::Shape,
        Error::InvalidConfig(_) | Error::EmptyInput(_) | Error::LabelOutOfRange { .. } => SmhStatus::InvalidArgument,
        _ => SmhStatus::Format,
    }
}

/// Runs `f`, translating errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), (SmhStatus, String)>) -> SmhStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmhStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SmhStatus::Panic
        }
    }
}

type Fallible<T> = Result<T, (SmhStatus, String)>;

fn lib(e: Error) -> (SmhStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SmhStatus, String) {
    (SmhStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> (SmhStatus, String) {
    (SmhStatus::InvalidArgument, message.into())
}

unsafe fn path_arg(path: *const c_char) -> Fallible<PathBuf> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(model: *const SmhModel) -> Fallible<&'a SmhModel> {
    model.as_ref().ok_or_else(|| null("model"))
}

/// Copies a row-major `f32` token matrix and a byte mask (nonzero = live).
unsafe fn example_args(
    embeddings: *const f32,
    seq_len: usize,
    embed_dim: usize,
    mask: *const u8,
) -> Fallible<(Matrix, Vec<bool>)> {
    if embeddings.is_null() {
        return Err(null("embeddings"));
    }
    if mask.is_null() {
        return Err(null("mask"));
    }
    let n = seq_len
        .checked_mul(embed_dim)
        .ok_or_else(|| invalid("seq_len * embed_dim overflows"))?;
    let values = std::slice::from_raw_parts(embeddings, n).iter().map(|&v| v as f64).collect();
    let mask = std::slice::from_raw_parts(mask, seq_len).iter().map(|&b| b != 0).collect();
    let m = Matrix::from_vec(seq_len, embed_dim, values).map_err(lib)?;
    if !m.is_finite() {
        return Err((SmhStatus::Numeric, "embeddings contain non-finite values".into()));
    }
    Ok((m, mask))
}

/// Text of the most recent failure on this thread, or null if the last call
/// succeeded. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn smh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trainable parameters of a space head; zero if any dimension is zero.
#[no_mangle]
pub extern "C" fn smh_parameter_count(embed_dim: usize, latent_dim: usize, n_spaces: usize, n_classes: usize) -> usize {
    let config = SpaceHeadConfig {
        embed_dim,
        latent_dim,
        n_spaces,
        n_classes,
    };
    if config.validate().is_err() {
        return 0;
    }
    parameter_count(&config)
}

/// Trainable parameters of a first-token head, with or without the `d × d` pre-layer.
#[no_mangle]
pub extern "C" fn smh_baseline_parameter_count(embed_dim: usize, n_classes: usize, pre_layer: bool) -> usize {
    baseline_parameter_count(embed_dim, n_classes, pre_layer)
}

/// Loads an `SMH1` or `SBH1` model file. On success `*out` owns a handle
/// that must be released with [`smh_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smh_model_load(path: *const c_char, out: *mut *mut SmhModel) -> SmhStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let head = load_any(&path).map_err(|e| (status_of(&e), format!("{}: {e}", path.display())))?;
        *out = Box::into_raw(Box::new(SmhModel { head }));
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`smh_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn smh_model_free(model: *mut SmhModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smh_model_info(model: *const SmhModel, out: *mut SmhModelInfo) -> SmhStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match &m.head {
            AnyHead::Space(p) => {
                let c = p.config();
                SmhModelInfo {
                    kind: SmhHeadKind::Space,
                    embed_dim: c.embed_dim,
                    latent_dim: c.latent_dim,
                    n_spaces: c.n_spaces,
                    n_classes: c.n_classes,
                    parameter_count: m.head.parameter_count(),
                }
            }
            AnyHead::Baseline(p) => SmhModelInfo {
                kind: if p.has_pre_layer() {
                    SmhHeadKind::Baseline
                } else {
                    SmhHeadKind::Linear
                },
                embed_dim: p.embed_dim(),
                latent_dim: 0,
                n_spaces: 0,
                n_classes: p.n_classes(),
                parameter_count: m.head.parameter_count(),
            },
        };
        Ok(())
    })
}

/// Class logits for one example. `embeddings` is row-major `seq_len ×
/// embed_dim`, `mask` has `seq_len` bytes, and `logits` must hold exactly
/// `n_classes` doubles.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn smh_model_forward(
    model: *const SmhModel,
    embeddings: *const f32,
    seq_len: usize,
    embed_dim: usize,
    mask: *const u8,
    logits: *mut f64,
    logits_len: usize,
) -> SmhStatus {
    guard(|| {
        let m = model_ref(model)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len != m.head.n_classes() {
            return Err(invalid(format!("logits_len {logits_len}, model has {} classes", m.head.n_classes())));
        }
        let (e, mask) = example_args(embeddings, seq_len, embed_dim, mask)?;
        let z = m.head.logits(&e, &mask).map_err(lib)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(&z);
        Ok(())
    })
}

/// Concatenated per-space centroids of one example (`n_spaces · latent_dim`
/// doubles, each strictly inside (-1, 1)). Space heads only.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn smh_model_centroids(
    model: *const SmhModel,
    embeddings: *const f32,
    seq_len: usize,
    embed_dim: usize,
    mask: *const u8,
    out: *mut f64,
    out_len: usize,
) -> SmhStatus {
    guard(|| {
        let AnyHead::Space(p) = &model_ref(model)?.head else {
            return Err(invalid("centroids need a space head"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let want = p.config().feature_dim();
        if out_len != want {
            return Err(invalid(format!("out_len {out_len}, model has {want} centroid coordinates")));
        }
        let (e, mask) = example_args(embeddings, seq_len, embed_dim, mask)?;
        let trace = p.forward(&e, &mask).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&trace.features);
        Ok(())
    })
}

/// Predicted class (argmax of the logits, lowest index on ties).
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn smh_model_predict(
    model: *const SmhModel,
    embeddings: *const f32,
    seq_len: usize,
    embed_dim: usize,
    mask: *const u8,
    class_out: *mut usize,
) -> SmhStatus {
    guard(|| {
        let m = model_ref(model)?;
        let class_out = class_out.as_mut().ok_or_else(|| null("class_out"))?;
        let (e, mask) = example_args(embeddings, seq_len, embed_dim, mask)?;
        *class_out = argmax(&m.head.logits(&e, &mask).map_err(lib)?);
        Ok(())
    })
}

/// Reads a `CEB1` bundle. Release with [`smh_bundle_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn smh_bundle_read(path: *const c_char, out: *mut *mut SmhBundle) -> SmhStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let bundle = read_bundle(&path).map_err(|e| (status_of(&e), format!("{}: {e}", path.display())))?;
        *out = Box::into_raw(Box::new(SmhBundle { bundle }));
        Ok(())
    })
}

/// Releases a bundle handle. Null is ignored.
///
/// # Safety
/// `bundle` must come from [`smh_bundle_read`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn smh_bundle_free(bundle: *mut SmhBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Number of examples; zero for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smh_bundle_len(bundle: *const SmhBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.bundle.len())
}

/// Predicted class of every example into `classes` (length `smh_bundle_len`).
///
/// # Safety
/// Handles must be live and `classes` valid for `classes_len` elements.
#[no_mangle]
pub unsafe extern "C" fn smh_model_predict_bundle(
    model: *const SmhModel,
    bundle: *const SmhBundle,
    classes: *mut usize,
    classes_len: usize,
) -> SmhStatus {
    guard(|| {
        let m = model_ref(model)?;
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        if classes.is_null() {
            return Err(null("classes"));
        }
        if classes_len != b.bundle.len() {
            return Err(invalid(format!("classes_len {classes_len}, bundle has {}", b.bundle.len())));
        }
        let p = predict(&m.head, &b.bundle).map_err(lib)?;
        std::slice::from_raw_parts_mut(classes, classes_len).copy_from_slice(&p);
        Ok(())
    })
}

/// Accuracy and macro F1 of the model on a labeled bundle.
///
/// # Safety
/// Handles must be live; output pointers valid.
#[no_mangle]
pub unsafe extern "C" fn smh_model_evaluate_bundle(
    model: *const SmhModel,
    bundle: *const SmhBundle,
    accuracy: *mut f64,
    f1_macro: *mut f64,
) -> SmhStatus {
    guard(|| {
        let m = model_ref(model)?;
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let accuracy = accuracy.as_mut().ok_or_else(|| null("accuracy"))?;
        let f1_macro = f1_macro.as_mut().ok_or_else(|| null("f1_macro"))?;
        let r = evaluate_head(&m.head, &b.bundle).map_err(lib)?;
        *accuracy = r.accuracy;
        *f1_macro = r.f1_macro;
        Ok(())
    })
}
