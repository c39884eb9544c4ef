#ifndef MBDEPTH_H
#define MBDEPTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbdStatus {
  MBD_STATUS_OK = 0,
  MBD_STATUS_NULL_POINTER = 1,
  MBD_STATUS_INVALID_ARGUMENT = 2,
  MBD_STATUS_IO = 3,
  MBD_STATUS_FORMAT = 4,
  MBD_STATUS_TRAINING = 5,
  MBD_STATUS_INTERNAL = 6,
} MbdStatus;

/**
 * A loaded or generated bundle.
 */
typedef struct MbdBundle MbdBundle;

/**
 * A single-channel depth map.
 */
typedef struct MbdDepth MbdDepth;

/**
 * A trained model with its training log.
 */
typedef struct MbdModel MbdModel;

/**
 * Training settings; initialize with [`mbd_train_config_default`].
 */
typedef struct MbdTrainConfig {
  size_t samples;
  size_t patch_half_width;
  size_t levels;
  double alpha;
  double base_lr;
  double decay;
  double confidence_lr;
  size_t epochs;
  size_t frame_stride;
  bool direct_depth;
  /**
   * Replace sensor depth with this value when positive.
   */
  double constant_init_depth;
  bool median_filter_confidence;
  uint64_t seed;
  /**
   * Run network passes in single precision.
   */
  bool single_precision;
} MbdTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *mbd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mbd_version(void);

enum MbdStatus mbd_bundle_read(const char *dir, struct MbdBundle **out);

/**
 * Render a built-in synthetic scene (`plane`, `sphere-on-plane`,
 * `box-on-plane`, `checker`, `flat`) with default tremor and sensor models.
 */
enum MbdStatus mbd_bundle_generate(const char *scene,
                                   uint64_t seed,
                                   size_t frames,
                                   size_t width,
                                   size_t height,
                                   struct MbdBundle **out);

enum MbdStatus mbd_bundle_write(const struct MbdBundle *bundle, const char *dir);

/**
 * Number of frames, or 0 for a null handle.
 */
size_t mbd_bundle_frame_count(const struct MbdBundle *bundle);

/**
 * RGB and depth-grid dimensions.
 */
enum MbdStatus mbd_bundle_dims(const struct MbdBundle *bundle,
                               size_t *height,
                               size_t *width,
                               size_t *depth_height,
                               size_t *depth_width);

void mbd_bundle_free(struct MbdBundle *bundle);

enum MbdStatus mbd_train_config_default(struct MbdTrainConfig *out);

enum MbdStatus mbd_train(const struct MbdBundle *bundle,
                         const struct MbdTrainConfig *config,
                         struct MbdModel **out);

/**
 * Number of logged epochs, or 0 for a null handle.
 */
size_t mbd_model_epoch_count(const struct MbdModel *model);

/**
 * Mean total loss of epoch `epoch`.
 */
enum MbdStatus mbd_model_epoch_loss(const struct MbdModel *model, size_t epoch, double *total);

void mbd_model_free(struct MbdModel *model);

enum MbdStatus mbd_compute_z_avg(const struct MbdBundle *bundle, struct MbdDepth **out);

enum MbdStatus mbd_reconstruct(const struct MbdModel *model,
                               const struct MbdBundle *bundle,
                               const struct MbdDepth *z_avg,
                               struct MbdDepth **out);

enum MbdStatus mbd_depth_dims(const struct MbdDepth *depth, size_t *height, size_t *width);

/**
 * Row-major depth values in meters; valid while the handle lives.
 */
const float *mbd_depth_data(const struct MbdDepth *depth);

enum MbdStatus mbd_depth_write_pfm(const struct MbdDepth *depth, const char *path);

/**
 * Photometric error of `depth` against the other frames of `bundle`.
 */
enum MbdStatus mbd_photometric_error(const struct MbdDepth *depth,
                                     const struct MbdBundle *bundle,
                                     double *mae,
                                     double *mse);

void mbd_depth_free(struct MbdDepth *depth);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBDEPTH_H */
