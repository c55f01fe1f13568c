#ifndef MOEX_H
#define MOEX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MoexStatus {
  MOEX_STATUS_OK = 0,
  MOEX_STATUS_NULL_ARGUMENT = 1,
  MOEX_STATUS_INVALID_UTF8 = 2,
  MOEX_STATUS_BUFFER_TOO_SMALL = 3,
  MOEX_STATUS_IO = 4,
  MOEX_STATUS_FORMAT = 5,
  MOEX_STATUS_CONFIG = 6,
  MOEX_STATUS_ILLEGAL_MOVE = 7,
  MOEX_STATUS_VOCABULARY = 8,
  MOEX_STATUS_NON_FINITE = 9,
  MOEX_STATUS_OUT_OF_RANGE = 10,
  MOEX_STATUS_INTERNAL = 99,
} MoexStatus;

// Opaque chess position.
typedef struct MoexBoard MoexBoard;

// Opaque loaded model (f32 weights).
typedef struct MoexModel MoexModel;

// Shape of a loaded model.
typedef struct MoexModelInfo {
  uint32_t n_layer;
  uint32_t n_head;
  uint32_t d_model;
  uint32_t vocab_size;
  uint32_t ctx_len;
  // Width of one layer's MLP hidden code.
  uint32_t trace_width;
  // Experts per layer; 0 for a dense MLP.
  uint32_t experts;
} MoexModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated library version; static storage.
const char *moex_version(void);

// Copy this thread's last error message into `buf` (NUL-terminated,
// truncated to fit). Returns the full message length without NUL.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t moex_last_error(char *buf, size_t cap);

// A new board at the initial position. Free with [`moex_board_free`].
struct MoexBoard *moex_board_new(void);

// # Safety
// `board` must come from [`moex_board_new`] and not be used afterwards.
void moex_board_free(struct MoexBoard *board);

// Play one move in SAN. The board is unchanged on failure.
//
// # Safety
// `board` must be a live handle and `san` a NUL-terminated string.
enum MoexStatus moex_board_push_san(struct MoexBoard *board, const char *san);

// Write the 96-byte board-state vector (bit `i` of the 768 is byte `i/8`,
// bit `i%8`).
//
// # Safety
// `board` must be a live handle and `out` point to 96 writable bytes.
enum MoexStatus moex_board_bsp(const struct MoexBoard *board, uint8_t *out);

// Piece placement in FEN notation.
//
// # Safety
// `board` must be a live handle; `buf` must point to `cap` writable bytes;
// `len` may be null.
enum MoexStatus moex_board_placement(const struct MoexBoard *board,
                                     char *buf,
                                     size_t cap,
                                     size_t *len);

// Number of legal moves, or 0 for a null handle.
//
// # Safety
// `board` must be null or a live handle.
uint32_t moex_board_legal_move_count(const struct MoexBoard *board);

// Plies played since the initial position.
//
// # Safety
// `board` must be null or a live handle.
uint32_t moex_board_plies(const struct MoexBoard *board);

// Load a checkpoint. On success `*out` owns a handle to free with
// [`moex_model_free`]; on failure it is set to null.
//
// # Safety
// `path` must be NUL-terminated and `out` writable.
enum MoexStatus moex_model_load(const char *path, struct MoexModel **out);

// # Safety
// `model` must come from [`moex_model_load`] and not be used afterwards.
void moex_model_free(struct MoexModel *model);

// # Safety
// `model` must be a live handle and `info` writable.
enum MoexStatus moex_model_info(const struct MoexModel *model, struct MoexModelInfo *info);

// Greedily extend `prompt` (movetext) by `n` characters. The full text,
// prompt included, goes to `buf`.
//
// # Safety
// `model` must be a live handle, `prompt` NUL-terminated, `buf` `cap`
// writable bytes; `len` may be null.
enum MoexStatus moex_model_generate(const struct MoexModel *model,
                                    const char *prompt,
                                    size_t n,
                                    char *buf,
                                    size_t cap,
                                    size_t *len);

// MLP hidden code of block `layer` at character `position` of `text`
// (which must fit the context). Writes `trace_width` floats.
//
// # Safety
// `model` must be a live handle, `text` NUL-terminated and `out` point to
// `cap` writable floats.
enum MoexStatus moex_model_hidden(const struct MoexModel *model,
                                  const char *text,
                                  uint32_t layer,
                                  uint32_t position,
                                  float *out,
                                  size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOEX_H */
