//! C ABI over `ygan`: load a trained checkpoint, score image batches and
//! compute evaluation metrics from any language with a C FFI.
//!
//! Every fallible function returns a [`YganStatus`]. On failure the message
//! is available from [`ygan_last_error`] on the same thread until the next
//! call. Images are passed as contiguous `float` arrays in `(N, C, H, W)`
//! order with values in `[-1, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ygan::autograd::{DType, Scalar, Tensor};
use ygan::eval::{auc, eer_threshold};
use ygan::model::ModelBundle;
use ygan::scoring::{score_batch, ScoreKind, ScoreMethod};
use ygan::training::{checkpoint_dtype, load_checkpoint};
use ygan::YganError;

/// Result codes shared by every function of the C interface.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum YganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Protocol = 4,
    NonFinite = 5,
    Checkpoint = 6,
    Io = 7,
    Panic = 8,
}

impl From<&YganError> for YganStatus {
    fn from(e: &YganError) -> Self {
        match e {
            YganError::Input(_) => YganStatus::InvalidArgument,
            YganError::Config(_) | YganError::Json(_) => YganStatus::Config,
            YganError::Protocol(_) => YganStatus::Protocol,
            YganError::NonFinite { .. } => YganStatus::NonFinite,
            YganError::Checkpoint(_) => YganStatus::Checkpoint,
            YganError::Ingest { .. } | YganError::Io { .. } | YganError::Csv(_) | YganError::Image(_) => YganStatus::Io,
        }
    }
}

/// Shape of the model behind a handle.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct YganModelInfo {
    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub has_classifier: bool,
}

enum Bundle {
    F32(ModelBundle<f32>),
    F64(ModelBundle<f64>),
}

/// Opaque handle to a trained model.
pub struct YganModel {
    bundle: Bundle,
}

/// Images scored per forward pass, bounding peak memory.
const CHUNK: usize = 256;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

struct Failure(YganStatus, String);

impl From<YganError> for Failure {
    fn from(e: YganError) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(YganStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> YganStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => YganStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {message}"));
            YganStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(YganStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn labels_arg(labels: &[u8]) -> Result<Vec<bool>, Failure> {
    labels
        .iter()
        .map(|&l| match l {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Failure(YganStatus::InvalidArgument, format!("label {other} is not 0 or 1"))),
        })
        .collect()
}

fn chunked<T: Scalar>(
    bundle: &ModelBundle<T>,
    pixels: &[f32],
    n: usize,
    width: usize,
    out: &mut [f64],
    f: impl Fn(&ModelBundle<T>, &Tensor<T>) -> ygan::Result<Vec<f64>>,
) -> Result<(), Failure> {
    let per_image = bundle.config.channels * bundle.config.image_size * bundle.config.image_size;
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let data: Vec<T> = pixels[start * per_image..(start + len) * per_image]
            .iter()
            .map(|&v| T::from_f64c(v as f64))
            .collect();
        let x = Tensor::from_vec(&bundle.config.image_shape(len), data)?;
        let values = f(bundle, &x)?;
        out[start * width..(start + len) * width].copy_from_slice(&values);
        start += len;
    }
    Ok(())
}

impl YganModel {
    fn config(&self) -> &ygan::model::ModelConfig {
        match &self.bundle {
            Bundle::F32(b) => &b.config,
            Bundle::F64(b) => &b.config,
        }
    }

    fn pixels_per_image(&self) -> usize {
        let c = self.config();
        c.channels * c.image_size * c.image_size
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ygan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ygan_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a handle that must be
/// released with [`ygan_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ygan_model_load(path: *const c_char, out: *mut *mut YganModel) -> YganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let bundle = match checkpoint_dtype(path)? {
            DType::F32 => Bundle::F32(load_checkpoint::<f32>(path)?.bundle),
            DType::F64 => Bundle::F64(load_checkpoint::<f64>(path)?.bundle),
        };
        *out = Box::into_raw(Box::new(YganModel { bundle }));
        Ok(())
    })
}

/// Releases a handle from [`ygan_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ygan_model_free(model: *mut YganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ygan_model_info(model: *const YganModel, out: *mut YganModelInfo) -> YganStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = model.config();
        let has_classifier = match &model.bundle {
            Bundle::F32(b) => b.has_classifier(),
            Bundle::F64(b) => b.has_classifier(),
        };
        *out = YganModelInfo {
            image_size: c.image_size,
            channels: c.channels,
            latent_dim: c.latent_dim,
            num_classes: c.num_classes,
            has_classifier,
        };
        Ok(())
    })
}

/// Anomaly scores of `n` images, higher meaning more anomalous.
///
/// `method` is one of `"s"` (one minus the largest class probability),
/// `"s_c"` (class entropy), `"s_x"` (pixel reconstruction error), `"s_z"`
/// and `"s_zs"` (latent reconstruction cosine distance). `pixels` holds
/// `n * C * H * W` values; `scores` receives `n` values.
///
/// # Safety
/// The arrays must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ygan_model_score(
    model: *const YganModel,
    method: *const c_char,
    pixels: *const f32,
    n: usize,
    scores: *mut f64,
) -> YganStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let kind: ScoreKind = str_arg(method, "method")?.parse()?;
        if kind.needs_prototypes() {
            return Err(Failure(
                YganStatus::Config,
                format!("score method {kind} needs class prototypes and is not available here"),
            ));
        }
        let method = ScoreMethod::simple(kind)?;
        let pixels = slice_arg(pixels, n * model.pixels_per_image(), "pixels")?;
        let scores = slice_out(scores, n, "scores")?;
        match &model.bundle {
            Bundle::F32(b) => chunked(b, pixels, n, 1, scores, |b, x| score_batch(b, x, &method)),
            Bundle::F64(b) => chunked(b, pixels, n, 1, scores, |b, x| score_batch(b, x, &method)),
        }
    })
}

/// Semantic codes of `n` images; `codes` receives `n * latent_dim` values
/// in row-major order.
///
/// # Safety
/// The arrays must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn ygan_model_encode(
    model: *const YganModel,
    pixels: *const f32,
    n: usize,
    codes: *mut f64,
) -> YganStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let d = model.config().latent_dim;
        let pixels = slice_arg(pixels, n * model.pixels_per_image(), "pixels")?;
        let codes = slice_out(codes, n * d, "codes")?;
        fn encode<T: Scalar>(b: &ModelBundle<T>, x: &Tensor<T>) -> ygan::Result<Vec<f64>> {
            Ok(b.encode_semantic(x)?.to_f64_vec())
        }
        match &model.bundle {
            Bundle::F32(b) => chunked(b, pixels, n, d, codes, encode),
            Bundle::F64(b) => chunked(b, pixels, n, d, codes, encode),
        }
    })
}

/// Area under the ROC curve; `labels[i]` is 1 for anomalous and 0 for normal.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ygan_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> YganStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let labels = labels_arg(slice_arg(labels, n, "labels")?)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = auc(scores, &labels)?;
        Ok(())
    })
}

/// Equal error rate and the threshold that attains it.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements and the outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn ygan_eer(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: *mut f64,
    eer: *mut f64,
) -> YganStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let labels = labels_arg(slice_arg(labels, n, "labels")?)?;
        let threshold = threshold.as_mut().ok_or_else(|| null("threshold"))?;
        let eer = eer.as_mut().ok_or_else(|| null("eer"))?;
        (*threshold, *eer) = eer_threshold(scores, &labels)?;
        Ok(())
    })
}
