//! C ABI over the robot side of scout-core: the visual memory, the robot
//! node and the interest metric.
//!
//! Every fallible call returns a [`ScoutStatus`]; on failure the message is
//! available from [`scout_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scout_core::error::Error;
use scout_core::eval::{auc_op, InterestPoint, InterestSequence};
use scout_core::features::{decode_image, extract_features, FeatureTensor};
use scout_core::memory::{MemoryConfig, VisualMemory};
use scout_core::mission::initial_head;
use scout_core::protocol::{encode, FrameDecoder, Message};
use scout_core::robot::{RobotConfig, RobotNode};
use scout_core::station::StationConfig;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoutStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Io = 3,
    Decode = 4,
    Protocol = 5,
    NotFound = 6,
    Internal = 7,
    Panic = 8,
}

impl From<&Error> for ScoutStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Validation(_) | Error::Capacity(_) => Self::InvalidInput,
            Error::Io(_) => Self::Io,
            Error::Image(_) | Error::Json(_) | Error::Framing(_) => Self::Decode,
            Error::Protocol(_) | Error::Sync(_) => Self::Protocol,
            Error::NotFound(_) => Self::NotFound,
            Error::UndefinedMetric(_) | Error::Training(_) => Self::Internal,
        }
    }
}

/// Byte buffer owned by the library; release with [`scout_buffer_free`].
#[repr(C)]
pub struct ScoutBuffer {
    pub data: *mut u8,
    pub len: usize,
}

impl ScoutBuffer {
    fn empty() -> Self {
        Self {
            data: ptr::null_mut(),
            len: 0,
        }
    }

    fn from_vec(v: Vec<u8>) -> Self {
        if v.is_empty() {
            return Self::empty();
        }
        let boxed = v.into_boxed_slice();
        let len = boxed.len();
        Self {
            data: Box::into_raw(boxed).cast(),
            len,
        }
    }
}

pub struct ScoutMemory {
    inner: VisualMemory,
}

pub struct ScoutRobot {
    node: RobotNode,
    decoder: FrameDecoder,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: ScoutStatus, msg: impl Into<String>) -> ScoutStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), ScoutStatus>) -> ScoutStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScoutStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(ScoutStatus::Panic, "panic inside scout"),
    }
}

fn core<T>(r: scout_core::error::Result<T>) -> Result<T, ScoutStatus> {
    r.map_err(|e| fail(ScoutStatus::from(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, ScoutStatus> {
    if p.is_null() {
        return Err(fail(ScoutStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ScoutStatus::InvalidInput, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn bytes_arg<'a, T>(p: *const T, len: usize) -> Result<&'a [T], ScoutStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ScoutStatus::NullPointer, "data is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *mut T) -> Result<&'a mut T, ScoutStatus> {
    p.as_mut()
        .ok_or_else(|| fail(ScoutStatus::NullPointer, "handle is null"))
}

fn out_ptr<T>(p: *mut T) -> Result<(), ScoutStatus> {
    if p.is_null() {
        Err(fail(ScoutStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

fn encode_all(msgs: &[Message]) -> Result<Vec<u8>, ScoutStatus> {
    let mut out = Vec::new();
    for m in msgs {
        out.extend(core(encode(m))?);
    }
    Ok(out)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scout_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `buf` must be null or point to a buffer filled by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scout_buffer_free(buf: *mut ScoutBuffer) {
    let Some(b) = buf.as_mut() else { return };
    if !b.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    }
    *b = ScoutBuffer::empty();
}

/// Fresh memory for `C x W x H` feature tensors with the default gains.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_new(
    channels: usize,
    width: usize,
    height: usize,
    seed: u64,
    out: *mut *mut ScoutMemory,
) -> ScoutStatus {
    guard(|| {
        out_ptr(out)?;
        let cfg = MemoryConfig {
            seed,
            ..MemoryConfig::default()
        };
        let inner = core(VisualMemory::with_config((channels, width, height), &cfg))?;
        *out = Box::into_raw(Box::new(ScoutMemory { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_load(path: *const c_char, out: *mut *mut ScoutMemory) -> ScoutStatus {
    guard(|| {
        out_ptr(out)?;
        let inner = core(VisualMemory::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(ScoutMemory { inner }));
        Ok(())
    })
}

/// # Safety
/// `mem` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_save(mem: *mut ScoutMemory, path: *const c_char) -> ScoutStatus {
    guard(|| {
        let mem = handle(mem)?;
        core(mem.inner.save(path_arg(path)?))
    })
}

/// # Safety
/// `mem` must be a live handle; all shape pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_shape(
    mem: *mut ScoutMemory,
    channels: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> ScoutStatus {
    guard(|| {
        let mem = handle(mem)?;
        out_ptr(channels)?;
        out_ptr(width)?;
        out_ptr(height)?;
        let (c, w, h) = mem.inner.shape();
        (*channels, *width, *height) = (c, w, h);
        Ok(())
    })
}

unsafe fn tensor_arg(mem: &ScoutMemory, data: *const f64, len: usize) -> Result<FeatureTensor, ScoutStatus> {
    let (c, w, h) = mem.inner.shape();
    core(FeatureTensor::new(c, w, h, bytes_arg(data, len)?.to_vec()))
}

/// Writes a feature tensor (channel-major, row-major planes) into the memory,
/// reads it back and stores the interest score in `score`.
///
/// # Safety
/// `mem` must be a live handle, `data` must hold `len` doubles and `score`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_process(
    mem: *mut ScoutMemory,
    data: *const f64,
    len: usize,
    score: *mut f64,
) -> ScoutStatus {
    guard(|| {
        let mem = handle(mem)?;
        out_ptr(score)?;
        let x = tensor_arg(mem, data, len)?;
        *score = core(mem.inner.process_frame(&x))?.score;
        Ok(())
    })
}

/// Interest score of a tensor without changing the memory.
///
/// # Safety
/// Same as [`scout_memory_process`].
#[no_mangle]
pub unsafe extern "C" fn scout_memory_score(
    mem: *mut ScoutMemory,
    data: *const f64,
    len: usize,
    score: *mut f64,
) -> ScoutStatus {
    guard(|| {
        let mem = handle(mem)?;
        out_ptr(score)?;
        let x = tensor_arg(mem, data, len)?;
        *score = core(mem.inner.read(&x))?.score;
        Ok(())
    })
}

/// # Safety
/// `mem` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scout_memory_free(mem: *mut ScoutMemory) {
    if !mem.is_null() {
        drop(Box::from_raw(mem));
    }
}

/// Robot node with a fresh memory sized for `width x height` frames and the
/// initial head fitted on the base-class set in `base_dir`.
///
/// # Safety
/// `base_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_new(
    base_dir: *const c_char,
    width: u32,
    height: u32,
    tau: f64,
    head_seed: u64,
    out: *mut *mut ScoutRobot,
) -> ScoutStatus {
    guard(|| {
        out_ptr(out)?;
        let base = path_arg(base_dir)?;
        let cfg = RobotConfig {
            tau,
            ..RobotConfig::default()
        };
        core(cfg.validate())?;
        let (head, _) = core(initial_head(&base, &cfg.detector, head_seed, &StationConfig::default()))?;
        let memory = core(RobotNode::fresh_memory(&cfg, (width, height)))?;
        let node = core(RobotNode::new(cfg, memory, head, None))?;
        *out = Box::into_raw(Box::new(ScoutRobot {
            node,
            decoder: FrameDecoder::new(),
        }));
        Ok(())
    })
}

/// Adds one encoded image (PNG or JPEG) to the memory without scoring it.
///
/// # Safety
/// `robot` must be a live handle and `image` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_warmup(
    robot: *mut ScoutRobot,
    t_ms: u64,
    image: *const u8,
    len: usize,
) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        let bytes = bytes_arg(image, len)?;
        let x = core(extract_features(
            &core(decode_image(bytes))?,
            &robot.node.config().detector.backbone,
        ))?;
        core(robot.node.warmup(t_ms, &[x])).map(|_| ())
    })
}

/// Scores one encoded image. `candidate` is set to 1 when the frame was
/// buffered for the station.
///
/// # Safety
/// `robot` must be a live handle, `image` must hold `len` bytes and the
/// output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_process(
    robot: *mut ScoutRobot,
    t_ms: u64,
    frame_id: u64,
    image: *const u8,
    len: usize,
    score: *mut f64,
    candidate: *mut u8,
) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        out_ptr(score)?;
        out_ptr(candidate)?;
        let outcome = core(robot.node.process(t_ms, frame_id, bytes_arg(image, len)?.to_vec()))?;
        *score = outcome.score;
        *candidate = u8::from(outcome.candidate);
        Ok(())
    })
}

/// Drains up to `max` buffered candidates, highest score first, as
/// length-prefixed wire frames.
///
/// # Safety
/// `robot` must be a live handle and `out` a valid pointer; free the buffer
/// with [`scout_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn scout_robot_take_candidates(
    robot: *mut ScoutRobot,
    t_ms: u64,
    max: usize,
    out: *mut ScoutBuffer,
) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        out_ptr(out)?;
        let msgs = core(robot.node.take_candidates(t_ms, max))?;
        *out = ScoutBuffer::from_vec(encode_all(&msgs)?);
        Ok(())
    })
}

/// Feeds bytes received from the station. Partial frames are kept until the
/// rest arrives; replies for the robot to send back are written to `replies`.
/// Malformed frames are skipped.
///
/// # Safety
/// `robot` must be a live handle, `data` must hold `len` bytes and `replies`
/// must be a valid pointer; free it with [`scout_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn scout_robot_feed(
    robot: *mut ScoutRobot,
    t_ms: u64,
    data: *const u8,
    len: usize,
    replies: *mut ScoutBuffer,
) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        out_ptr(replies)?;
        robot.decoder.push(bytes_arg(data, len)?);
        let mut out = Vec::new();
        while let Some(next) = robot.decoder.next_message() {
            match next {
                Ok(msg) => out.extend(core(robot.node.handle_message(t_ms, msg))?),
                Err(e) => log::warn!("dropping bad frame from station: {e}"),
            }
        }
        *replies = ScoutBuffer::from_vec(encode_all(&out)?);
        Ok(())
    })
}

/// # Safety
/// `robot` must be a live handle and `version` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_head_version(robot: *mut ScoutRobot, version: *mut u64) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        out_ptr(version)?;
        *version = robot.node.head().version();
        Ok(())
    })
}

/// # Safety
/// `robot` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_save_memory(robot: *mut ScoutRobot, path: *const c_char) -> ScoutStatus {
    guard(|| {
        let robot = handle(robot)?;
        core(robot.node.memory().save(path_arg(path)?))
    })
}

/// # Safety
/// `robot` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scout_robot_free(robot: *mut ScoutRobot) {
    if !robot.is_null() {
        drop(Box::from_raw(robot));
    }
}

/// Area under the operator curve for `n` frames in mission order with
/// predicted `scores` and ground-truth flags (non-zero means interesting).
///
/// # Safety
/// `scores` and `interesting` must each hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn scout_auc_op(
    scores: *const f64,
    interesting: *const u8,
    n: usize,
    delta: f64,
    out: *mut f64,
) -> ScoutStatus {
    guard(|| {
        out_ptr(out)?;
        let scores = bytes_arg(scores, n)?;
        let flags = bytes_arg(interesting, n)?;
        let points = scores
            .iter()
            .zip(flags)
            .enumerate()
            .map(|(i, (&score, &f))| InterestPoint {
                frame_id: i as u64,
                score,
                interesting: f != 0,
            })
            .collect();
        *out = core(auc_op(&core(InterestSequence::new(points))?, delta))?;
        Ok(())
    })
}
