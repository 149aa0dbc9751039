#ifndef SCOUT_H
#define SCOUT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScoutStatus {
  SCOUT_STATUS_OK = 0,
  SCOUT_STATUS_NULL_POINTER = 1,
  SCOUT_STATUS_INVALID_INPUT = 2,
  SCOUT_STATUS_IO = 3,
  SCOUT_STATUS_DECODE = 4,
  SCOUT_STATUS_PROTOCOL = 5,
  SCOUT_STATUS_NOT_FOUND = 6,
  SCOUT_STATUS_INTERNAL = 7,
  SCOUT_STATUS_PANIC = 8,
} ScoutStatus;

typedef struct ScoutMemory ScoutMemory;

typedef struct ScoutRobot ScoutRobot;

/**
 * Byte buffer owned by the library; release with [`scout_buffer_free`].
 */
typedef struct ScoutBuffer {
  uint8_t *data;
  size_t len;
} ScoutBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *scout_last_error(void);

/**
 * # Safety
 * `buf` must be null or point to a buffer filled by this library and not yet freed.
 */
void scout_buffer_free(struct ScoutBuffer *buf);

/**
 * Fresh memory for `C x W x H` feature tensors with the default gains.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum ScoutStatus scout_memory_new(size_t channels,
                                  size_t width,
                                  size_t height,
                                  uint64_t seed,
                                  struct ScoutMemory **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScoutStatus scout_memory_load(const char *path, struct ScoutMemory **out);

/**
 * # Safety
 * `mem` must be a live handle and `path` a NUL-terminated string.
 */
enum ScoutStatus scout_memory_save(struct ScoutMemory *mem, const char *path);

/**
 * # Safety
 * `mem` must be a live handle; all shape pointers must be valid.
 */
enum ScoutStatus scout_memory_shape(struct ScoutMemory *mem,
                                    size_t *channels,
                                    size_t *width,
                                    size_t *height);

/**
 * Writes a feature tensor (channel-major, row-major planes) into the memory,
 * reads it back and stores the interest score in `score`.
 *
 * # Safety
 * `mem` must be a live handle, `data` must hold `len` doubles and `score`
 * must be a valid pointer.
 */
enum ScoutStatus scout_memory_process(struct ScoutMemory *mem,
                                      const double *data,
                                      size_t len,
                                      double *score);

/**
 * Interest score of a tensor without changing the memory.
 *
 * # Safety
 * Same as [`scout_memory_process`].
 */
enum ScoutStatus scout_memory_score(struct ScoutMemory *mem,
                                    const double *data,
                                    size_t len,
                                    double *score);

/**
 * # Safety
 * `mem` must be null or a handle not yet freed.
 */
void scout_memory_free(struct ScoutMemory *mem);

/**
 * Robot node with a fresh memory sized for `width x height` frames and the
 * initial head fitted on the base-class set in `base_dir`.
 *
 * # Safety
 * `base_dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ScoutStatus scout_robot_new(const char *base_dir,
                                 uint32_t width,
                                 uint32_t height,
                                 double tau,
                                 uint64_t head_seed,
                                 struct ScoutRobot **out);

/**
 * Adds one encoded image (PNG or JPEG) to the memory without scoring it.
 *
 * # Safety
 * `robot` must be a live handle and `image` must hold `len` bytes.
 */
enum ScoutStatus scout_robot_warmup(struct ScoutRobot *robot,
                                    uint64_t t_ms,
                                    const uint8_t *image,
                                    size_t len);

/**
 * Scores one encoded image. `candidate` is set to 1 when the frame was
 * buffered for the station.
 *
 * # Safety
 * `robot` must be a live handle, `image` must hold `len` bytes and the
 * output pointers must be valid.
 */
enum ScoutStatus scout_robot_process(struct ScoutRobot *robot,
                                     uint64_t t_ms,
                                     uint64_t frame_id,
                                     const uint8_t *image,
                                     size_t len,
                                     double *score,
                                     uint8_t *candidate);

/**
 * Drains up to `max` buffered candidates, highest score first, as
 * length-prefixed wire frames.
 *
 * # Safety
 * `robot` must be a live handle and `out` a valid pointer; free the buffer
 * with [`scout_buffer_free`].
 */
enum ScoutStatus scout_robot_take_candidates(struct ScoutRobot *robot,
                                             uint64_t t_ms,
                                             size_t max,
                                             struct ScoutBuffer *out);

/**
 * Feeds bytes received from the station. Partial frames are kept until the
 * rest arrives; replies for the robot to send back are written to `replies`.
 * Malformed frames are skipped.
 *
 * # Safety
 * `robot` must be a live handle, `data` must hold `len` bytes and `replies`
 * must be a valid pointer; free it with [`scout_buffer_free`].
 */
enum ScoutStatus scout_robot_feed(struct ScoutRobot *robot,
                                  uint64_t t_ms,
                                  const uint8_t *data,
                                  size_t len,
                                  struct ScoutBuffer *replies);

/**
 * # Safety
 * `robot` must be a live handle and `version` a valid pointer.
 */
enum ScoutStatus scout_robot_head_version(struct ScoutRobot *robot, uint64_t *version);

/**
 * # Safety
 * `robot` must be a live handle and `path` a NUL-terminated string.
 */
enum ScoutStatus scout_robot_save_memory(struct ScoutRobot *robot, const char *path);

/**
 * # Safety
 * `robot` must be null or a handle not yet freed.
 */
void scout_robot_free(struct ScoutRobot *robot);

/**
 * Area under the operator curve for `n` frames in mission order with
 * predicted `scores` and ground-truth flags (non-zero means interesting).
 *
 * # Safety
 * `scores` and `interesting` must each hold `n` elements; `out` must be valid.
 */
enum ScoutStatus scout_auc_op(const double *scores,
                              const uint8_t *interesting,
                              size_t n,
                              double delta,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCOUT_H */
