#ifndef QSYNTH_H
#define QSYNTH_H

#include <stddef.h>
#include <stdint.h>

typedef enum QsStatus {
  QS_STATUS_OK = 0,
  QS_STATUS_NULL_ARGUMENT = 1,
  QS_STATUS_INVALID_UTF8 = 2,
  QS_STATUS_PARSE = 3,
  QS_STATUS_INVALID = 4,
  QS_STATUS_SYNTHESIS = 5,
  QS_STATUS_CODEGEN = 6,
  QS_STATUS_BUFFER_TOO_SMALL = 7,
  QS_STATUS_OUT_OF_RANGE = 8,
  QS_STATUS_PANIC = 9,
} QsStatus;

/**
 * A parsed model file plus parameter overrides.
 */
typedef struct QsModel QsModel;

/**
 * A synthesized controller with its quantization.
 */
typedef struct QsSynthesis QsSynthesis;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null; `needed` null or writable.
 */
enum QsStatus qs_last_error(char *buf, size_t len, size_t *needed);

/**
 * Parses model-file text.
 *
 * # Safety
 * `src` must be a NUL-terminated string; `out` must be writable.
 */
enum QsStatus qs_model_parse(const char *src, struct QsModel **out);

/**
 * Loads a bundled model (`pendulum`, `ex2`).
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum QsStatus qs_model_bundled(const char *name, struct QsModel **out);

/**
 * Overrides a declared parameter with a constant expression such as `1/10`.
 *
 * # Safety
 * `model` must come from `qs_model_parse`/`qs_model_bundled`; strings NUL-terminated.
 */
enum QsStatus qs_model_set_param(struct QsModel *model, const char *name, const char *value);

/**
 * # Safety
 * `model` must be null or a live handle; it is invalid afterwards.
 */
void qs_model_free(struct QsModel *model);

/**
 * Runs linearization, abstraction and the strong solver. `threads` = 0
 * uses all cores.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum QsStatus qs_synthesize(const struct QsModel *model, size_t threads, struct QsSynthesis **out);

/**
 * # Safety
 * `syn` must be null or a live handle; it is invalid afterwards.
 */
void qs_synthesis_free(struct QsSynthesis *syn);

/**
 * Whether every initial abstract state is controlled (1) or not (0).
 *
 * # Safety
 * `syn` must be a live handle; `out` writable.
 */
enum QsStatus qs_synthesis_covered(const struct QsSynthesis *syn, int32_t *out);

/**
 * Abstract state count and controlled-region size.
 *
 * # Safety
 * `syn` must be a live handle; outputs writable or null.
 */
enum QsStatus qs_synthesis_sizes(const struct QsSynthesis *syn,
                                 size_t *num_states,
                                 size_t *dom_size);

/**
 * The `key: value` report text.
 *
 * # Safety
 * `syn` must be a live handle; `buf` valid for `len` bytes or null.
 */
enum QsStatus qs_synthesis_report(const struct QsSynthesis *syn,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * Controller action index for the concrete state `x` (`n` coordinates), or
 * -1 when `x` is outside the controlled region.
 *
 * # Safety
 * `syn` must be a live handle; `x` valid for `n` doubles; `action` writable.
 */
enum QsStatus qs_controller_action(const struct QsSynthesis *syn,
                                   const double *x,
                                   size_t n,
                                   int32_t *action);

/**
 * C99 source of the controller with action indices as commands and -1 as
 * the fault value.
 *
 * # Safety
 * `syn` must be a live handle; `buf` valid for `len` bytes or null.
 */
enum QsStatus qs_export_c(const struct QsSynthesis *syn, char *buf, size_t len, size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSYNTH_H */
