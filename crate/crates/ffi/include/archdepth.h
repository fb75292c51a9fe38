#ifndef ARCHDEPTH_H
#define ARCHDEPTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AdStatus {
  AD_STATUS_OK = 0,
  AD_STATUS_NULL_POINTER = 1,
  AD_STATUS_INVALID_ARGUMENT = 2,
  AD_STATUS_IO = 3,
  AD_STATUS_SHAPE_MISMATCH = 4,
  AD_STATUS_DATASET = 5,
  AD_STATUS_NUMERIC = 6,
  AD_STATUS_PANIC = 7,
} AdStatus;

// A dataset loaded from disk.
typedef struct AdDataset AdDataset;

// A voxel radiance field with its optimizer state.
typedef struct AdField AdField;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *ad_last_error(void);

// PSNR in dB of two interleaved RGB images of `pixels` pixels, values in [0, 1].
enum AdStatus ad_psnr(const double *a, const double *b, size_t pixels, double *out);

// Mean SSIM of two interleaved RGB images, row-major `width` x `height`.
enum AdStatus ad_ssim(const double *a, const double *b, size_t width, size_t height, double *out);

// Distance along the ray to the plane `normal . x = offset`. `hit` is set to
// 0 when the ray is parallel or the plane is behind it; `t` is then left alone.
enum AdStatus ad_ray_plane_intersect(const double *origin,
                                     const double *direction,
                                     const double *normal,
                                     double offset,
                                     double *t,
                                     int32_t *hit);

// Per-sample weights of a ray from densities and spacings, plus the
// transmittance left after the last sample.
enum AdStatus ad_compute_weights(const double *sigma,
                                 const double *delta,
                                 size_t n,
                                 double *weights,
                                 double *residual);

// Loads the dataset in directory `path`.
enum AdStatus ad_dataset_open(const char *path, struct AdDataset **out);

void ad_dataset_free(struct AdDataset *ds);

enum AdStatus ad_dataset_view_count(const struct AdDataset *ds, size_t *out);

// Computes wall-plane depth priors, writes them into the dataset directory
// and reloads it. `rmse` receives the error against the stored reference
// depth and `coverage` the covered fraction of architectural pixels.
enum AdStatus ad_dataset_compute_priors(struct AdDataset *ds, double *rmse, double *coverage);

// Trains a field on `ds`. `config_json` is a JSON training config (null
// for defaults); missing keys take their defaults.
enum AdStatus ad_train(const struct AdDataset *ds, const char *config_json, struct AdField **out);

enum AdStatus ad_field_load(const char *path, struct AdField **out);

enum AdStatus ad_field_save(const struct AdField *field, const char *path);

void ad_field_free(struct AdField *field);

// Density and RGB color of the field at world point `xyz`.
enum AdStatus ad_field_query(const struct AdField *field,
                             const double *xyz,
                             double *sigma,
                             double *rgb);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARCHDEPTH_H */
