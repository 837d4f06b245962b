//! C ABI over the actbit toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_new` style constructors and released with the matching `*_free`.
//! Every fallible call returns an [`ActbitStatus`]; on failure the message
//! is kept per thread and can be fetched with [`actbit_last_error_message`].
//! Strings returned by this library must be released with
//! [`actbit_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use actbit::allocator::{average_bits, greedy_allocate, BitAllocation, PruneGuardConfig};
use actbit::quant::{dequantize_row, BitMap, WeightScheme};
use actbit::{BitWidth, ChannelId, Error, Policy, PolicyModel, SensitivityTable, Tag};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActbitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidModel = 4,
    ShapeMismatch = 5,
    Io = 6,
    Parse = 7,
    BudgetInfeasible = 8,
    MissingEntry = 9,
    Internal = 10,
    Panic = 11,
}

impl From<&Error> for ActbitStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape(_) | Error::AllocationMismatch(_) => ActbitStatus::ShapeMismatch,
            Error::InvalidModel(_) | Error::NonFinite(_) => ActbitStatus::InvalidModel,
            Error::InvalidChannel { .. }
            | Error::InvalidBitWidth(_)
            | Error::ParamsNotApplicable(_)
            | Error::InvalidArgument(_)
            | Error::EmptyCalibration
            | Error::InstanceTooLarge(..) => ActbitStatus::InvalidArgument,
            Error::MissingEntry { .. } => ActbitStatus::MissingEntry,
            Error::BudgetInfeasible { .. } => ActbitStatus::BudgetInfeasible,
            Error::Parse { .. } | Error::Json(_) => ActbitStatus::Parse,
            Error::Io { .. } => ActbitStatus::Io,
            Error::FitFailed(_) => ActbitStatus::Internal,
        }
    }
}

/// Opaque policy network.
pub struct ActbitModel {
    inner: PolicyModel,
}

/// Opaque sensitivity table.
pub struct ActbitTable {
    inner: SensitivityTable,
}

/// Opaque per-channel bit allocation.
pub struct ActbitAllocation {
    inner: BitAllocation,
}

struct Failure {
    status: ActbitStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            status: ActbitStatus::from(&e),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn new(status: ActbitStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ActbitStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ActbitStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("panic inside actbit");
            ActbitStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref()
        .ok_or_else(|| Failure::new(ActbitStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slot<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut()
        .ok_or_else(|| Failure::new(ActbitStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(ActbitStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::new(ActbitStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(ActbitStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::new(ActbitStatus::InvalidUtf8, "path is not valid UTF-8"))
}

fn bit_arg(bits: u32) -> Result<BitWidth, Failure> {
    BitWidth::new(bits).map_err(Failure::from)
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(std::ptr::null_mut(), CString::into_raw)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn actbit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or NULL if the last
/// call succeeded. Release with [`actbit_string_free`].
#[no_mangle]
pub extern "C" fn actbit_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null_mut(), |c| c.clone().into_raw())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library that has not been
/// freed yet.
#[no_mangle]
pub unsafe extern "C" fn actbit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_load(path: *const c_char, out: *mut *mut ActbitModel) -> ActbitStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        *out = std::ptr::null_mut();
        let inner = PolicyModel::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ActbitModel { inner }));
        Ok(())
    })
}

/// Parses a model from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_from_json(json: *const c_char, out: *mut *mut ActbitModel) -> ActbitStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        *out = std::ptr::null_mut();
        let text = deref(json, "json").and_then(|_| {
            CStr::from_ptr(json)
                .to_str()
                .map_err(|_| Failure::new(ActbitStatus::InvalidUtf8, "json is not valid UTF-8"))
        })?;
        let inner = PolicyModel::from_json_str(text)?;
        *out = Box::into_raw(Box::new(ActbitModel { inner }));
        Ok(())
    })
}

/// Model serialized as JSON. Release with [`actbit_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_to_json(model: *const ActbitModel, out: *mut *mut c_char) -> ActbitStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        *out = into_c_string(deref(model, "model")?.inner.to_json_string());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_free(model: *mut ActbitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Observation width; 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_input_dim(model: *const ActbitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Action width; 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_output_dim(model: *const ActbitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.output_dim())
}

/// Number of output channels across all layers; 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_num_channels(model: *const ActbitModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_channels())
}

/// Runs the policy on one observation.
///
/// # Safety
/// `obs` must point to `obs_len` doubles and `action` to `action_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn actbit_model_act(
    model: *const ActbitModel,
    obs: *const f64,
    obs_len: usize,
    action: *mut f64,
    action_len: usize,
) -> ActbitStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        let obs = slice(obs, obs_len, "obs")?;
        let action = slice_mut(action, action_len, "action")?;
        if action.len() != model.output_dim() {
            return Err(Failure::new(
                ActbitStatus::ShapeMismatch,
                format!("action buffer holds {} values, model emits {}", action.len(), model.output_dim()),
            ));
        }
        action.copy_from_slice(&model.act(obs)?);
        Ok(())
    })
}

/// Loads a sensitivity CSV file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_table_load(path: *const c_char, out: *mut *mut ActbitTable) -> ActbitStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        *out = std::ptr::null_mut();
        let inner = SensitivityTable::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ActbitTable { inner }));
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn actbit_table_free(table: *mut ActbitTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Number of `(channel, bits)` entries; 0 for a NULL handle.
///
/// # Safety
/// `table` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn actbit_table_len(table: *const ActbitTable) -> usize {
    table.as_ref().map_or(0, |t| t.inner.len())
}

/// Score of one channel at one bit-width.
///
/// # Safety
/// `table` must be a live handle and `score` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_table_score(
    table: *const ActbitTable,
    layer: usize,
    channel: usize,
    bits: u32,
    score: *mut f64,
) -> ActbitStatus {
    guard(|| {
        let table = &deref(table, "table")?.inner;
        let score = out_slot(score, "score")?;
        *score = table.require(ChannelId::new(layer, channel), bit_arg(bits)?)?;
        Ok(())
    })
}

/// Greedy allocation over the model's vision and backbone channels under an
/// average-bit budget, with the default pruning guard.
///
/// # Safety
/// `model` and `table` must be live handles and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_allocate(
    model: *const ActbitModel,
    table: *const ActbitTable,
    budget: f64,
    out: *mut *mut ActbitAllocation,
) -> ActbitStatus {
    guard(|| {
        let out = out_slot(out, "out")?;
        *out = std::ptr::null_mut();
        let model = &deref(model, "model")?.inner;
        let table = &deref(table, "table")?.inner;
        let designated = model.channels(Some(&Tag::DEFAULT_DESIGNATED));
        let inner = greedy_allocate(table, &designated, budget, &PruneGuardConfig::default())?;
        *out = Box::into_raw(Box::new(ActbitAllocation { inner }));
        Ok(())
    })
}

/// # Safety
/// `alloc` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn actbit_allocation_free(alloc: *mut ActbitAllocation) {
    if !alloc.is_null() {
        drop(Box::from_raw(alloc));
    }
}

/// Mean bits over the designated channels.
///
/// # Safety
/// `alloc` must be a live handle and `avg` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_allocation_average_bits(alloc: *const ActbitAllocation, avg: *mut f64) -> ActbitStatus {
    guard(|| {
        let alloc = &deref(alloc, "alloc")?.inner;
        *out_slot(avg, "avg")? = average_bits(alloc)?;
        Ok(())
    })
}

/// Bit-width assigned to one channel; 16 for channels outside the
/// designated set.
///
/// # Safety
/// `alloc` must be a live handle and `bits` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn actbit_allocation_bits(
    alloc: *const ActbitAllocation,
    layer: usize,
    channel: usize,
    bits: *mut u32,
) -> ActbitStatus {
    guard(|| {
        let alloc = &deref(alloc, "alloc")?.inner;
        let bit = alloc.bit(ChannelId::new(layer, channel)).unwrap_or(BitWidth::FULL);
        *out_slot(bits, "bits")? = bit.bits();
        Ok(())
    })
}

/// Writes the bit-map JSON for `alloc` applied to `model`.
///
/// # Safety
/// `model` and `alloc` must be live handles and `path` a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn actbit_allocation_save_bitmap(
    model: *const ActbitModel,
    alloc: *const ActbitAllocation,
    act_bits: u32,
    path: *const c_char,
) -> ActbitStatus {
    guard(|| {
        let model = &deref(model, "model")?.inner;
        let alloc = &deref(alloc, "alloc")?.inner;
        let path = path_arg(path)?;
        BitMap::from_allocation(model, alloc, bit_arg(act_bits)?, WeightScheme::Symmetric)?.save(&path)?;
        Ok(())
    })
}

/// Symmetric per-channel quantize/dequantize of one weight row.
///
/// `deq` receives the dequantized row; `scale` (optional) the step size.
///
/// # Safety
/// `row` and `deq` must point to `len` doubles; `scale` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn actbit_quantize_row(
    row: *const f64,
    len: usize,
    bits: u32,
    deq: *mut f64,
    scale: *mut f64,
) -> ActbitStatus {
    guard(|| {
        let row = slice(row, len, "row")?;
        let out = slice_mut(deq, len, "deq")?;
        let (values, params) = dequantize_row(row, bit_arg(bits)?, WeightScheme::Symmetric);
        out.copy_from_slice(&values);
        if let Some(s) = scale.as_mut() {
            *s = params.scale;
        }
        Ok(())
    })
}
