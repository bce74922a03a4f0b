#ifndef MICROMETRIC_H
#define MICROMETRIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmRange {
  // Range of the ground-truth image being scored.
  MM_RANGE_GT_IMAGE = 0,
  // Range over all ground truth of the dataset (calibration only).
  MM_RANGE_GT_DATASET = 1,
  // `2^bits − 1` with `bits` taken from `range_value`.
  MM_RANGE_DTYPE = 2,
  // `range_value` itself.
  MM_RANGE_EXPLICIT = 3,
} MmRange;

// Result codes. Zero is success.
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_NULL_POINTER = 1,
  MM_STATUS_INVALID_ARGUMENT = 2,
  MM_STATUS_INVALID_STATE = 3,
  MM_STATUS_UNDEFINED_CLOSED_FORM = 4,
  MM_STATUS_NUMERIC = 5,
  MM_STATUS_FORMAT_UNSUPPORTED = 6,
  MM_STATUS_PARSE = 7,
  MM_STATUS_IO = 8,
  MM_STATUS_BUFFER_TOO_SMALL = 9,
  MM_STATUS_PANIC = 10,
} MmStatus;

typedef enum MmWindow {
  MM_WINDOW_GAUSSIAN11 = 0,
  MM_WINDOW_UNIFORM7 = 1,
} MmWindow;

// Opaque calibration handle.
typedef struct MmCalibration MmCalibration;

// Opaque image handle.
typedef struct MmImage MmImage;

// Metric settings. Obtain defaults with [`mm_config_default`].
typedef struct MmConfig {
  enum MmWindow window;
  double k1;
  double k2;
  enum MmRange range;
  double range_value;
} MmConfig;

// Mean SSIM and its mean components.
typedef struct MmScore {
  double value;
  double luminance;
  double contrast;
  double structure;
} MmScore;

typedef struct MmCalibrationParams {
  double beta_gt;
  double beta_pred;
  double max_gt;
  double alpha;
  bool fitted;
} MmCalibrationParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Writes the default settings: 11×11 Gaussian window, k1 = 0.01,
// k2 = 0.03, ground-truth image range.
//
// # Safety
// `out` must be null or point to writable memory for one `MmConfig`.
enum MmStatus mm_config_default(struct MmConfig *out);

// Library version as a static NUL-terminated string.
const char *mm_version(void);

// Length in bytes of the calling thread's last error message, without the
// terminating NUL. Zero after a successful call.
size_t mm_last_error_length(void);

// Copies the last error message into `buf` as a NUL-terminated string,
// truncating to `cap − 1` bytes. Returns the full message length.
//
// # Safety
// `buf` must be null or valid for `cap` bytes of writes.
size_t mm_last_error_message(char *buf, size_t cap);

// Creates an image from `height × width` row-major pixels. `bit_depth`
// of zero means unknown.
//
// # Safety
// `pixels` must be valid for `height * width` reads and `out` for one
// pointer write.
enum MmStatus mm_image_new(size_t height,
                           size_t width,
                           const double *pixels,
                           uint8_t bit_depth,
                           struct MmImage **out);

// Loads a PGM, MFR1 or single-page grayscale TIFF file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for one pointer
// write.
enum MmStatus mm_image_load(const char *path, struct MmImage **out);

// Saves an image in the format named by the path's extension.
//
// # Safety
// `img` must be a live handle and `path` a NUL-terminated string.
enum MmStatus mm_image_save(const struct MmImage *img, const char *path);

// # Safety
// `img` must be a live handle; `height` and `width` null or writable.
enum MmStatus mm_image_dims(const struct MmImage *img, size_t *height, size_t *width);

// Copies the pixels into `buf`, which must hold `height * width` values.
//
// # Safety
// `img` must be a live handle and `buf` valid for `cap` writes.
enum MmStatus mm_image_pixels(const struct MmImage *img, double *buf, size_t cap);

// Releases an image. Null is ignored.
//
// # Safety
// `img` must be null or a handle not yet freed.
void mm_image_free(struct MmImage *img);

// Plain SSIM of `pred` against `gt`.
//
// # Safety
// Handles must be live; `config` and `out` must point to valid structs.
enum MmStatus mm_ssim(const struct MmImage *gt,
                      const struct MmImage *pred,
                      const struct MmConfig *config,
                      struct MmScore *out);

// Five-level MS-SSIM with the default level weights.
//
// # Safety
// Handles must be live; `config` and `out` must be valid.
enum MmStatus mm_ms_ssim(const struct MmImage *gt,
                         const struct MmImage *pred,
                         const struct MmConfig *config,
                         double *out);

// Fits a dataset calibration on `n` matched pairs.
//
// # Safety
// `gts` and `preds` must each be valid for `n` reads of live handles;
// `config` must be valid and `out` writable.
enum MmStatus mm_calibrate(const struct MmImage *const *gts,
                           const struct MmImage *const *preds,
                           size_t n,
                           const struct MmConfig *config,
                           double percentile,
                           struct MmCalibration **out);

// Parses a calibration file's text.
//
// # Safety
// `text` must be NUL-terminated and `out` writable.
enum MmStatus mm_calibration_from_text(const char *text, struct MmCalibration **out);

// Serializes a calibration. `*needed` receives the text length plus one
// for the NUL; when `cap` is smaller, nothing is copied and
// `MM_STATUS_BUFFER_TOO_SMALL` is returned.
//
// # Safety
// `cal` must be live, `buf` null or valid for `cap` bytes, `needed` null or
// writable.
enum MmStatus mm_calibration_to_text(const struct MmCalibration *cal,
                                     char *buf,
                                     size_t cap,
                                     size_t *needed);

// # Safety
// `cal` must be live and `out` writable.
enum MmStatus mm_calibration_params(const struct MmCalibration *cal,
                                    struct MmCalibrationParams *out);

// Releases a calibration. Null is ignored.
//
// # Safety
// `cal` must be null or a handle not yet freed.
void mm_calibration_free(struct MmCalibration *cal);

// MicroSSIM under the calibration's own metric settings.
//
// # Safety
// Handles must be live and `out` writable.
enum MmStatus mm_micro_ssim(const struct MmImage *gt,
                            const struct MmImage *pred,
                            const struct MmCalibration *cal,
                            struct MmScore *out);

// MicroMS3IM with the default pyramid over the calibration's settings.
//
// # Safety
// Handles must be live and `out` writable.
enum MmStatus mm_micro_ms3im(const struct MmImage *gt,
                             const struct MmImage *pred,
                             const struct MmCalibration *cal,
                             double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MICROMETRIC_H */
