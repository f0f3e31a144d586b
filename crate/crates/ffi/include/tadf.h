#ifndef TADF_H
#define TADF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TadfStatus {
  TADF_STATUS_OK = 0,
  TADF_STATUS_NULL_POINTER = 1,
  TADF_STATUS_INVALID_ARGUMENT = 2,
  TADF_STATUS_CONTRACT = 3,
  TADF_STATUS_OVERFLOW = 4,
  TADF_STATUS_UNKNOWN_TASK = 5,
  TADF_STATUS_CONFIG = 6,
  TADF_STATUS_MALFORMED_LOG = 7,
  TADF_STATUS_DEADLOCK = 8,
  TADF_STATUS_ASSERTION = 9,
  TADF_STATUS_IO = 10,
  TADF_STATUS_UTF8 = 11,
  TADF_STATUS_BUFFER_TOO_SMALL = 12,
  TADF_STATUS_PANIC = 13,
} TadfStatus;

/**
 * Access modes: read, write, read-write.
 */
typedef enum TadfMode {
  TADF_MODE_READ = 0,
  TADF_MODE_WRITE = 1,
  TADF_MODE_READ_WRITE = 2,
} TadfMode;

typedef enum TadfTaskState {
  TADF_TASK_STATE_CREATED = 0,
  TADF_TASK_STATE_READY = 1,
  TADF_TASK_STATE_RUNNING = 2,
  TADF_TASK_STATE_SUSPENDED = 3,
  TADF_TASK_STATE_BODY_FINISHED_PENDING_OPS = 4,
  TADF_TASK_STATE_FINISHED = 5,
} TadfTaskState;

typedef enum TadfBackend {
  TADF_BACKEND_HOST = 0,
  TADF_BACKEND_DEVICE_BLOCKING = 1,
  TADF_BACKEND_DEVICE_TASK_AWARE = 2,
} TadfBackend;

/**
 * Opaque dependency graph.
 */
typedef struct TadfGraph TadfGraph;

/**
 * A byte region `[base, base + length)`.
 */
typedef struct TadfAccess {
  uint64_t base;
  uint64_t length;
  enum TadfMode mode;
} TadfAccess;

/**
 * One multidependency dimension: values `start, start + step, ...` below
 * `start + extent`, each moving the region base by `stride`.
 */
typedef struct TadfDim {
  uint64_t start;
  uint64_t extent;
  uint64_t step;
  uint64_t stride;
} TadfDim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * Valid until the next call on the same thread.
 */
const char *tadf_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void tadf_string_free(char *s);

struct TadfGraph *tadf_graph_new(void);

/**
 * # Safety
 * `g` must come from [`tadf_graph_new`] and not have been freed.
 */
void tadf_graph_free(struct TadfGraph *g);

/**
 * Registers task `id` in creation order and writes its unfinished
 * predecessors, ascending, to `preds`.
 *
 * # Safety
 * Pointers must be valid for the given counts.
 */
enum TadfStatus tadf_graph_register(struct TadfGraph *g,
                                    uint64_t id,
                                    const struct TadfAccess *accesses,
                                    size_t n_accesses,
                                    uint64_t *preds,
                                    size_t preds_cap,
                                    size_t *preds_len);

/**
 * # Safety
 * `g` must be a live graph and `state` writable.
 */
enum TadfStatus tadf_graph_state(struct TadfGraph *g, uint64_t id, enum TadfTaskState *state);

/**
 * Moves a ready task to running.
 *
 * # Safety
 * `g` must be a live graph.
 */
enum TadfStatus tadf_graph_mark_running(struct TadfGraph *g, uint64_t id);

/**
 * Adds one outstanding operation to a running task.
 *
 * # Safety
 * `g` must be a live graph.
 */
enum TadfStatus tadf_graph_add_pending_op(struct TadfGraph *g, uint64_t id);

/**
 * Body of `id` returned. If operations are outstanding `*pending` gets
 * their count and nothing is released; otherwise `*pending` is 0 and the
 * successors that became ready are written to `ready`.
 *
 * # Safety
 * Pointers must be valid for the given counts.
 */
enum TadfStatus tadf_graph_body_finished(struct TadfGraph *g,
                                         uint64_t id,
                                         uint32_t *pending,
                                         uint64_t *ready,
                                         size_t ready_cap,
                                         size_t *ready_len);

/**
 * One outstanding operation of `id` completed. Ready successors are
 * written only when this released the task; `*released` says whether it
 * did.
 *
 * # Safety
 * Pointers must be valid for the given counts.
 */
enum TadfStatus tadf_graph_complete_pending_op(struct TadfGraph *g,
                                               uint64_t id,
                                               bool *released,
                                               uint64_t *ready,
                                               size_t ready_cap,
                                               size_t *ready_len);

/**
 * Graphviz rendering of the whole graph.
 *
 * # Safety
 * `g` must be a live graph and `out` writable.
 */
enum TadfStatus tadf_graph_dot(struct TadfGraph *g, char **out);

/**
 * Expands a multidependency into one region per iteration point, last
 * dimension fastest.
 *
 * # Safety
 * Pointers must be valid for the given counts.
 */
enum TadfStatus tadf_expand_multidep(const struct TadfDim *dims,
                                     size_t n_dims,
                                     uint64_t offset,
                                     uint64_t length,
                                     enum TadfMode access_mode,
                                     struct TadfAccess *out,
                                     size_t out_cap,
                                     size_t *out_len);

/**
 * Runs every point of a scenario given as `key = value` text. `csv`
 * receives the metrics; `runlog`, if not null, the concatenated run logs.
 *
 * # Safety
 * `config` must be a NUL-terminated string; outputs writable or null
 * where allowed.
 */
enum TadfStatus tadf_run_scenario(const char *config, char **csv, char **runlog);

/**
 * Per-worker busy/blocked/suspended/idle/overhead table of a run log.
 * `workers` 0 sizes the table from the log.
 *
 * # Safety
 * `log` must be a NUL-terminated string and `out` writable.
 */
enum TadfStatus tadf_trace_summary(const char *log, size_t workers, char **out);

/**
 * Solves the 27-point stencil system on an `n`³ grid whose exact solution
 * is all ones and writes the residual norm of every iteration, starting
 * with the initial one. `tiles` 0 runs the monolithic variant.
 *
 * # Safety
 * Pointers must be valid for the given counts.
 */
enum TadfStatus tadf_cg_stencil(size_t n,
                                size_t max_iters,
                                size_t tiles,
                                size_t workers,
                                enum TadfBackend backend,
                                double *residuals,
                                size_t residuals_cap,
                                size_t *residuals_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TADF_H */
