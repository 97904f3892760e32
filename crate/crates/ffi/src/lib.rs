//! C ABI over `icl-lens`.
//!
//! Every fallible function returns an [`IclStatus`]; on failure the message
//! is kept per thread and read back with [`icl_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use icl_lens::attention_metrics::{layer_profile, metric_at, Metric};
use icl_lens::efficiency::{kv_estimate, ModelCfg, PrunePlan};
use icl_lens::interchange::{load_run, read_tensor_file, write_tensor_file, DType, RunBundle, Tensor, Variant};
use icl_lens::text_metrics::{cider, shortcut_cider, DocumentFrequency};
use icl_lens::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Consistency = 5,
    Data = 6,
    Domain = 7,
    Config = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IclMetric {
    Acar = 0,
    Iear = 1,
    Vcar = 2,
}

impl From<IclMetric> for Metric {
    fn from(m: IclMetric) -> Self {
        match m {
            IclMetric::Acar => Metric::Acar,
            IclMetric::Iear => Metric::Iear,
            IclMetric::Vcar => Metric::Vcar,
        }
    }
}

/// Loaded tensor file.
pub struct IclTensor(Tensor);

/// Loaded and validated run directory.
pub struct IclRun(RunBundle);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(IclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => IclStatus::Io,
            Error::Format(_) | Error::Json { .. } => IclStatus::Format,
            Error::Consistency { .. } => IclStatus::Consistency,
            Error::Data(_) => IclStatus::Data,
            Error::Domain(_) => IclStatus::Domain,
            Error::Config(_) => IclStatus::Config,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: IclStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside icl-lens".into());
            IclStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(IclStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(IclStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn str_list<'a>(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<&'a str>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(fail(IclStatus::NullPointer, format!("`{name}` is null")));
    }
    (0..n).map(|i| str_arg(*p.add(i), name)).collect()
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable pointer.
    unsafe { p.as_mut() }.ok_or_else(|| fail(IclStatus::NullPointer, format!("`{name}` is null")))
}

fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or_else(|| fail(IclStatus::NullPointer, format!("`{name}` is null")))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator. `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn icl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn icl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_read(path: *const c_char, out: *mut *mut IclTensor) -> IclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let t = read_tensor_file(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(IclTensor(t)));
        Ok(())
    })
}

/// Writes a tensor file. `dtype` is the on-disk code: 1 = f32, 2 = f16,
/// 3 = u8.
///
/// # Safety
/// `shape` must hold `rank` extents and `data` `len` floats.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_write(
    path: *const c_char,
    dtype: u8,
    shape: *const u64,
    rank: usize,
    data: *const f32,
    len: usize,
) -> IclStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let dtype = DType::from_code(dtype)?;
        if (rank > 0 && shape.is_null()) || (len > 0 && data.is_null()) {
            return Err(fail(IclStatus::NullPointer, "shape or data is null"));
        }
        let shape = if rank == 0 { Vec::new() } else { std::slice::from_raw_parts(shape, rank).to_vec() };
        let data = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        write_tensor_file(&Tensor::new(dtype, shape, data)?, Path::new(path))?;
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a handle from [`icl_tensor_read`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_free(t: *mut IclTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// On-disk dtype code of the tensor, 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_dtype(t: *const IclTensor) -> u8 {
    t.as_ref().map_or(0, |t| t.0.dtype().code())
}

/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_rank(t: *const IclTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Number of scalars.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_len(t: *const IclTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the extents into `out` (capacity `cap`).
///
/// # Safety
/// `t` must be a live tensor handle; `out` must hold `cap` u64 values.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_shape(t: *const IclTensor, out: *mut u64, cap: usize) -> IclStatus {
    guard(|| {
        let t = handle(t, "tensor")?;
        let shape = t.0.shape();
        if cap < shape.len() {
            return Err(fail(IclStatus::BufferTooSmall, format!("shape needs {} slots", shape.len())));
        }
        if !shape.is_empty() {
            if out.is_null() {
                return Err(fail(IclStatus::NullPointer, "`out` is null"));
            }
            ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len());
        }
        Ok(())
    })
}

/// Row-major data widened to f32, valid until the handle is freed.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn icl_tensor_data(t: *const IclTensor) -> *const f32 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_run_load(path: *const c_char, out: *mut *mut IclRun) -> IclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let bundle = load_run(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(IclRun(bundle)));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`icl_run_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn icl_run_free(r: *mut IclRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn icl_run_sample_count(r: *const IclRun) -> usize {
    r.as_ref().map_or(0, |r| r.0.samples.len())
}

/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn icl_run_layer_count(r: *const IclRun) -> usize {
    r.as_ref().map_or(0, |r| r.0.model.n_layers)
}

/// # Safety
/// `r` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn icl_run_warning_count(r: *const IclRun) -> usize {
    r.as_ref().map_or(0, |r| r.0.warnings.len())
}

fn sample_records(
    run: &IclRun,
    sample: usize,
) -> Result<(&icl_lens::interchange::Sample, &icl_lens::interchange::AttentionRecord), Failure> {
    let s = run
        .0
        .samples
        .get(sample)
        .ok_or_else(|| fail(IclStatus::Domain, format!("sample index {sample} out of range")))?;
    let rec = s
        .record(Variant::WithQueryImage)
        .or_else(|| s.record(Variant::WithoutQueryImage))
        .expect("loaded samples hold at least one record");
    Ok((s, rec))
}

/// One metric at one layer of sample `sample` (by position). A zero
/// denominator yields +infinity.
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_run_metric(
    r: *const IclRun,
    sample: usize,
    metric: IclMetric,
    layer: usize,
    out: *mut f64,
) -> IclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (s, rec) = sample_records(handle(r, "run")?, sample)?;
        *out = metric_at(metric.into(), rec, s.record(Variant::WithoutQueryImage), &s.segmentation, layer)?;
        Ok(())
    })
}

/// Per-layer values (into `values`, capacity `cap`) and their mean over
/// non-sentinel layers.
///
/// # Safety
/// `r` must be a live run handle; `values` must hold `cap` doubles and
/// `mean` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_run_profile(
    r: *const IclRun,
    sample: usize,
    metric: IclMetric,
    values: *mut f64,
    cap: usize,
    mean: *mut f64,
) -> IclStatus {
    guard(|| {
        let mean = out_ptr(mean, "mean")?;
        let (s, rec) = sample_records(handle(r, "run")?, sample)?;
        if values.is_null() {
            return Err(fail(IclStatus::NullPointer, "`values` is null"));
        }
        if cap < rec.n_layers() {
            return Err(fail(IclStatus::BufferTooSmall, format!("profile needs {} slots", rec.n_layers())));
        }
        let p = layer_profile(metric.into(), rec, s.record(Variant::WithoutQueryImage), &s.segmentation)?;
        ptr::copy_nonoverlapping(p.values.as_ptr(), values, p.values.len());
        *mean = p.mean;
        Ok(())
    })
}

/// KV-cache bytes of a prune plan. Pass `start_layer == n_layers` for no
/// pruning; otherwise `start_layer < prediction_layer <= n_layers`.
///
/// # Safety
/// `out_bytes` and `out_savings` must be writable.
#[no_mangle]
pub unsafe extern "C" fn icl_kv_estimate(
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    kv_bytes_per_element: usize,
    full_len: usize,
    kept_len: usize,
    start_layer: usize,
    prediction_layer: usize,
    recover: bool,
    out_bytes: *mut u64,
    out_savings: *mut f64,
) -> IclStatus {
    guard(|| {
        let out_bytes = out_ptr(out_bytes, "out_bytes")?;
        let out_savings = out_ptr(out_savings, "out_savings")?;
        let cfg = ModelCfg::new(n_layers, n_heads, head_dim, kv_bytes_per_element)?;
        let plan = PrunePlan::from_lengths(full_len, kept_len, start_layer, prediction_layer, recover, n_layers)?;
        let est = kv_estimate(&cfg, Some(&plan), full_len)?;
        *out_bytes = est.bytes;
        *out_savings = est.savings;
        Ok(())
    })
}

/// CIDEr-D of `candidate` against `refs`. The document-frequency corpus is
/// `corpus` split into consecutive documents of `doc_sizes[i]` captions.
///
/// # Safety
/// All pointers must be valid for the given counts; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn icl_cider(
    candidate: *const c_char,
    refs: *const *const c_char,
    n_refs: usize,
    corpus: *const *const c_char,
    doc_sizes: *const usize,
    n_docs: usize,
    out: *mut f64,
) -> IclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let candidate = str_arg(candidate, "candidate")?;
        let refs = str_list(refs, n_refs, "refs")?;
        if n_docs > 0 && doc_sizes.is_null() {
            return Err(fail(IclStatus::NullPointer, "`doc_sizes` is null"));
        }
        let sizes = if n_docs == 0 { &[][..] } else { std::slice::from_raw_parts(doc_sizes, n_docs) };
        let all = str_list(corpus, sizes.iter().sum(), "corpus")?;
        let mut docs = Vec::with_capacity(n_docs);
        let mut at = 0;
        for &n in sizes {
            docs.push(&all[at..at + n]);
            at += n;
        }
        let df = DocumentFrequency::from_documents(docs.iter().map(|d| d.iter().copied()));
        *out = cider(candidate, &refs, &df);
        Ok(())
    })
}

/// Short-cut CIDEr of `generated` against the first four of `ice_captions`.
///
/// # Safety
/// `ice_captions` must hold `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn icl_shortcut_cider(
    generated: *const c_char,
    ice_captions: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> IclStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let generated = str_arg(generated, "generated")?;
        let ices = str_list(ice_captions, n, "ice_captions")?;
        if ices.is_empty() {
            return Err(fail(IclStatus::Domain, "need at least one ICE caption"));
        }
        *out = shortcut_cider(generated, &ices);
        Ok(())
    })
}
