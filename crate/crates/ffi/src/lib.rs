//! C ABI over `moex`: a chess board handle for replaying SAN moves into
//! board-state vectors, and a model handle for loading checkpoints, greedy
//! generation and reading MLP hidden codes.
//!
//! Every fallible call returns a [`MoexStatus`]; on failure the message is
//! kept per thread and can be copied out with [`moex_last_error`]. Panics
//! never cross the boundary and surface as `MOEX_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moex::chess::{board_to_bsp, resolve_san, Board, Vocab, BSP_BYTES};
use moex::training::load_checkpoint;
use moex::transformer::{harvest_hidden, Model};
use moex::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoexStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    IllegalMove = 7,
    Vocabulary = 8,
    NonFinite = 9,
    OutOfRange = 10,
    Internal = 99,
}

/// Opaque chess position.
pub struct MoexBoard {
    board: Board,
    plies: usize,
}

/// Opaque loaded model (f32 weights).
pub struct MoexModel {
    model: Model<f32>,
    vocab: Vocab,
}

/// Shape of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MoexModelInfo {
    pub n_layer: u32,
    pub n_head: u32,
    pub d_model: u32,
    pub vocab_size: u32,
    pub ctx_len: u32,
    /// Width of one layer's MLP hidden code.
    pub trace_width: u32,
    /// Experts per layer; 0 for a dense MLP.
    pub experts: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> MoexStatus {
    match e {
        Error::Io(_) => MoexStatus::Io,
        Error::Format { .. } | Error::Json(_) | Error::Parse { .. } | Error::Data(_) => MoexStatus::Format,
        Error::Config(_) | Error::TopK { .. } | Error::Dimension { .. } => MoexStatus::Config,
        Error::IllegalMove { .. } | Error::AmbiguousMove { .. } => MoexStatus::IllegalMove,
        Error::UnknownChar { .. } | Error::TargetOutOfRange { .. } => MoexStatus::Vocabulary,
        Error::NonFinite(_) => MoexStatus::NonFinite,
        _ => MoexStatus::Internal,
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (MoexStatus, String)>) -> MoexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MoexStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            MoexStatus::Internal
        }
    }
}

fn lib(e: Error) -> (MoexStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MoexStatus, String) {
    (MoexStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MoexStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (MoexStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Copy `bytes` plus a NUL into `buf`; `*len` gets the length without NUL.
unsafe fn write_str(bytes: &[u8], buf: *mut c_char, cap: usize, len: *mut usize) -> Result<(), (MoexStatus, String)> {
    if !len.is_null() {
        *len = bytes.len();
    }
    if cap < bytes.len() + 1 {
        return Err((MoexStatus::BufferTooSmall, format!("need {} bytes, have {cap}", bytes.len() + 1)));
    }
    if buf.is_null() {
        return Err(null("buf"));
    }
    std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn moex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy this thread's last error message into `buf` (NUL-terminated,
/// truncated to fit). Returns the full message length without NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn moex_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// A new board at the initial position. Free with [`moex_board_free`].
#[no_mangle]
pub extern "C" fn moex_board_new() -> *mut MoexBoard {
    Box::into_raw(Box::new(MoexBoard {
        board: Board::initial(),
        plies: 0,
    }))
}

/// # Safety
/// `board` must come from [`moex_board_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn moex_board_free(board: *mut MoexBoard) {
    if !board.is_null() {
        drop(Box::from_raw(board));
    }
}

/// Play one move in SAN. The board is unchanged on failure.
///
/// # Safety
/// `board` must be a live handle and `san` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moex_board_push_san(board: *mut MoexBoard, san: *const c_char) -> MoexStatus {
    guard(|| {
        let b = board.as_mut().ok_or_else(|| null("board"))?;
        let san = str_arg(san, "san")?;
        let m = resolve_san(&b.board, san.trim()).map_err(lib)?;
        b.board = b.board.apply_move(m);
        b.plies += 1;
        Ok(())
    })
}

/// Write the 96-byte board-state vector (bit `i` of the 768 is byte `i/8`,
/// bit `i%8`).
///
/// # Safety
/// `board` must be a live handle and `out` point to 96 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn moex_board_bsp(board: *const MoexBoard, out: *mut u8) -> MoexStatus {
    guard(|| {
        let b = board.as_ref().ok_or_else(|| null("board"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bsp = board_to_bsp(&b.board);
        std::ptr::copy_nonoverlapping(bsp.as_bytes().as_ptr(), out, BSP_BYTES);
        Ok(())
    })
}

/// Piece placement in FEN notation.
///
/// # Safety
/// `board` must be a live handle; `buf` must point to `cap` writable bytes;
/// `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn moex_board_placement(
    board: *const MoexBoard,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MoexStatus {
    guard(|| {
        let b = board.as_ref().ok_or_else(|| null("board"))?;
        write_str(b.board.placement_fen().as_bytes(), buf, cap, len)
    })
}

/// Number of legal moves, or 0 for a null handle.
///
/// # Safety
/// `board` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moex_board_legal_move_count(board: *const MoexBoard) -> u32 {
    board.as_ref().map_or(0, |b| b.board.legal_moves().len() as u32)
}

/// Plies played since the initial position.
///
/// # Safety
/// `board` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moex_board_plies(board: *const MoexBoard) -> u32 {
    board.as_ref().map_or(0, |b| b.plies as u32)
}

/// Load a checkpoint. On success `*out` owns a handle to free with
/// [`moex_model_free`]; on failure it is set to null.
///
/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moex_model_load(path: *const c_char, out: *mut *mut MoexModel) -> MoexStatus {
    if !out.is_null() {
        *out = std::ptr::null_mut();
    }
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ck = load_checkpoint::<f32>(Path::new(path)).map_err(lib)?;
        let vocab = Vocab::canonical();
        if ck.model.config.vocab_size < vocab.len() {
            return Err((MoexStatus::Config, format!("model vocabulary {} is smaller than the chess vocabulary", ck.model.config.vocab_size)));
        }
        *out = Box::into_raw(Box::new(MoexModel { model: ck.model, vocab }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`moex_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn moex_model_free(model: *mut MoexModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn moex_model_info(model: *const MoexModel, info: *mut MoexModelInfo) -> MoexStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let c = &m.config;
        *info = MoexModelInfo {
            n_layer: c.n_layer as u32,
            n_head: c.n_head as u32,
            d_model: c.d_model as u32,
            vocab_size: c.vocab_size as u32,
            ctx_len: c.ctx_len as u32,
            trace_width: c.trace_width() as u32,
            experts: c.moe().map_or(0, |e| e.experts as u32),
        };
        Ok(())
    })
}

/// Greedily extend `prompt` (movetext) by `n` characters. The full text,
/// prompt included, goes to `buf`.
///
/// # Safety
/// `model` must be a live handle, `prompt` NUL-terminated, `buf` `cap`
/// writable bytes; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn moex_model_generate(
    model: *const MoexModel,
    prompt: *const c_char,
    n: usize,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> MoexStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let prompt = str_arg(prompt, "prompt")?;
        let ids = m.vocab.tokenize(prompt).map_err(lib)?;
        if ids.is_empty() {
            return Err((MoexStatus::Config, "prompt is empty".into()));
        }
        let out = m.model.generate_greedy(&ids, n).map_err(lib)?;
        let text = m.vocab.detokenize(&out).map_err(lib)?;
        write_str(text.as_bytes(), buf, cap, len)
    })
}

/// MLP hidden code of block `layer` at character `position` of `text`
/// (which must fit the context). Writes `trace_width` floats.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated and `out` point to
/// `cap` writable floats.
#[no_mangle]
pub unsafe extern "C" fn moex_model_hidden(
    model: *const MoexModel,
    text: *const c_char,
    layer: u32,
    position: u32,
    out: *mut f32,
    cap: usize,
) -> MoexStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let text = str_arg(text, "text")?;
        let ids = m.vocab.tokenize(text).map_err(lib)?;
        let c = &m.model.config;
        let (layer, position) = (layer as usize, position as usize);
        if layer >= c.n_layer {
            return Err((MoexStatus::OutOfRange, format!("layer {layer} out of range 0..{}", c.n_layer)));
        }
        if position >= ids.len().min(c.ctx_len) {
            return Err((MoexStatus::OutOfRange, format!("position {position} outside the {}-token window", ids.len().min(c.ctx_len))));
        }
        let width = c.trace_width();
        if cap < width {
            return Err((MoexStatus::BufferTooSmall, format!("need {width} floats, have {cap}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let window = &ids[..ids.len().min(c.ctx_len)];
        let rows = harvest_hidden(&m.model, &[window], layer, &[vec![position]]).map_err(lib)?;
        for (i, v) in rows[0].iter().enumerate() {
            *out.add(i) = *v as f32;
        }
        Ok(())
    })
}
