use std::ffi::{CStr, CString};
use std::ptr;

use moex::chess::{board_to_bsp, replay};
use moex::moe::{MoEConfig, RouterKind, SigmaMode};
use moex::numerics::Activation;
use moex::training::{save_checkpoint, TrainConfig, Trainer};
use moex::transformer::{MlpKind, Model, ModelConfig};
use moex_ffi::*;
use rand::SeedableRng;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        moex_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn board_replays_san_into_the_same_vector_as_the_library() {
    let moves = ["e4", "e5", "Nf3", "Nc6", "Bb5", "a6", "Bxc6", "dxc6", "O-O"];
    let b = moex_board_new();
    for m in moves {
        assert_eq!(unsafe { moex_board_push_san(b, c(m).as_ptr()) }, MoexStatus::Ok, "{m}");
    }
    let mut bsp = [0u8; 96];
    assert_eq!(unsafe { moex_board_bsp(b, bsp.as_mut_ptr()) }, MoexStatus::Ok);
    let boards = replay(&moves.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
    assert_eq!(&bsp, board_to_bsp(boards.last().unwrap()).as_bytes());
    assert_eq!(unsafe { moex_board_plies(b) }, 9);

    let mut fen = vec![0 as std::ffi::c_char; 100];
    let mut len = 0usize;
    assert_eq!(unsafe { moex_board_placement(b, fen.as_mut_ptr(), fen.len(), &mut len) }, MoexStatus::Ok);
    let fen = unsafe { CStr::from_ptr(fen.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(fen, "r1bqkbnr/1pp2ppp/p1p5/4p3/4P3/5N2/PPPP1PPP/RNBQ1RK1");
    assert_eq!(len, fen.len());
    unsafe { moex_board_free(b) };
}

#[test]
fn errors_leave_state_and_report_messages() {
    let b = moex_board_new();
    assert_eq!(unsafe { moex_board_legal_move_count(b) }, 20);
    assert_eq!(unsafe { moex_board_push_san(b, c("Ke2").as_ptr()) }, MoexStatus::IllegalMove);
    assert!(last_error().contains("Ke2"), "{}", last_error());
    assert_eq!(unsafe { moex_board_plies(b) }, 0);
    assert_eq!(unsafe { moex_board_push_san(b, ptr::null()) }, MoexStatus::NullArgument);
    assert_eq!(unsafe { moex_board_push_san(ptr::null_mut(), c("e4").as_ptr()) }, MoexStatus::NullArgument);
    assert_eq!(unsafe { moex_board_push_san(b, c("e4").as_ptr()) }, MoexStatus::Ok);
    assert_eq!(last_error(), "");

    // too-small buffer reports the needed length
    let mut tiny = [0 as std::ffi::c_char; 4];
    let mut len = 0usize;
    assert_eq!(unsafe { moex_board_placement(b, tiny.as_mut_ptr(), 4, &mut len) }, MoexStatus::BufferTooSmall);
    assert_eq!(len, "rnbqkbnr/pppppppp/8/8/4P3/8/PPPP1PPP/RNBQKBNR".len());
    // truncated error copy is still NUL-terminated and returns the full length
    let full = unsafe { moex_last_error(ptr::null_mut(), 0) };
    let n = unsafe { moex_last_error(tiny.as_mut_ptr(), tiny.len()) };
    assert_eq!(n, full);
    assert_eq!(unsafe { CStr::from_ptr(tiny.as_ptr()) }.to_bytes().len(), 3);
    unsafe { moex_board_free(b) };
    unsafe { moex_board_free(ptr::null_mut()) };
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = ModelConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 16,
        vocab_size: 32,
        ctx_len: 24,
        mlp: MlpKind::Moe(MoEConfig {
            experts: 4,
            k: 2,
            expert_hidden: 8,
            width: 16,
            router: RouterKind::SparsityAware,
            activation: Activation::Relu,
            balance_lambda: 0.01,
            sigma_mode: SigmaMode::StdDev,
            detach_router_stats: false,
        }),
        dropout: 0.0,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let model = Model::<f32>::init(cfg, &mut rng).unwrap();
    let train = TrainConfig { warmup_iters: 1, max_iters: 2, ..TrainConfig::default() };
    let path = dir.join("m.ckpt");
    save_checkpoint(&Trainer::new(model, train).unwrap().to_checkpoint(), &path).unwrap();
    path
}

#[test]
fn model_handle_generates_and_reads_hidden_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let mut m = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    assert_eq!(unsafe { moex_model_load(p.as_ptr(), &mut m) }, MoexStatus::Ok);
    let mut info = MoexModelInfo::default();
    assert_eq!(unsafe { moex_model_info(m, &mut info) }, MoexStatus::Ok);
    assert_eq!((info.n_layer, info.trace_width, info.experts, info.ctx_len), (2, 32, 4, 24));

    let mut buf = vec![0 as std::ffi::c_char; 64];
    let mut len = 0;
    let st = unsafe { moex_model_generate(m, c("1.e4 e5 ").as_ptr(), 10, buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(st, MoexStatus::Ok, "{}", last_error());
    assert_eq!(len, 18);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert!(text.starts_with("1.e4 e5 "));
    // greedy decoding is deterministic
    let mut again = vec![0 as std::ffi::c_char; 64];
    unsafe { moex_model_generate(m, c("1.e4 e5 ").as_ptr(), 10, again.as_mut_ptr(), again.len(), ptr::null_mut()) };
    assert_eq!(buf, again);

    let mut h = vec![f32::NAN; 32];
    let st = unsafe { moex_model_hidden(m, c("1.e4 e5").as_ptr(), 1, 4, h.as_mut_ptr(), h.len()) };
    assert_eq!(st, MoexStatus::Ok, "{}", last_error());
    assert!(h.iter().all(|v| v.is_finite() && *v >= 0.0));
    // 2 of 4 experts active, 8 units each: at most 16 nonzero
    assert!(h.iter().filter(|v| **v != 0.0).count() <= 16);

    assert_eq!(unsafe { moex_model_hidden(m, c("1.e4").as_ptr(), 2, 0, h.as_mut_ptr(), 32) }, MoexStatus::OutOfRange);
    assert_eq!(unsafe { moex_model_hidden(m, c("1.e4").as_ptr(), 0, 4, h.as_mut_ptr(), 32) }, MoexStatus::OutOfRange);
    assert_eq!(unsafe { moex_model_hidden(m, c("1.e4").as_ptr(), 0, 0, h.as_mut_ptr(), 8) }, MoexStatus::BufferTooSmall);
    assert_eq!(unsafe { moex_model_hidden(m, c("1.e4 ?").as_ptr(), 0, 0, h.as_mut_ptr(), 32) }, MoexStatus::Vocabulary);
    unsafe { moex_model_free(m) };
}

#[test]
fn model_load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = 1usize as *mut MoexModel;
    let missing = c(dir.path().join("none.ckpt").to_str().unwrap());
    assert_eq!(unsafe { moex_model_load(missing.as_ptr(), &mut m) }, MoexStatus::Io);
    assert!(m.is_null());
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = c(junk.to_str().unwrap());
    assert_eq!(unsafe { moex_model_load(junk.as_ptr(), &mut m) }, MoexStatus::Format);
    assert!(last_error().contains("junk.ckpt"), "{}", last_error());
    assert_eq!(unsafe { moex_model_load(junk.as_ptr(), ptr::null_mut()) }, MoexStatus::NullArgument);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(moex_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/moex.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["moex_board_new", "moex_board_push_san", "moex_model_load", "moex_model_hidden", "MOEX_STATUS_ILLEGAL_MOVE"] {
        assert!(text.contains(f), "{f}");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler; skipped the syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
