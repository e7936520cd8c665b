#ifndef PCL_H
#define PCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PCL_STATUS_OK = 0,
  PCL_STATUS_NULL_ARGUMENT = 1,
  PCL_STATUS_INVALID_UTF8 = 2,
  PCL_STATUS_CONFIG = 3,
  PCL_STATUS_DATA = 4,
  PCL_STATUS_IO = 5,
  PCL_STATUS_PARSE = 6,
  PCL_STATUS_PANIC = 7,
} PclStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct PclDataset PclDataset;

/**
 * Trained model parameters.
 */
typedef struct PclModel PclModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pcl_last_error_message(void);

/**
 * Generates a synthetic dataset from generator settings in JSON.
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out` is writable.
 */
PclStatus pcl_dataset_generate(const char *config_json, PclDataset **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
PclStatus pcl_dataset_load(const char *path, PclDataset **out);

/**
 * # Safety
 * `dataset` is a live handle; `path` is a NUL-terminated string.
 */
PclStatus pcl_dataset_save(const PclDataset *dataset, const char *path);

/**
 * Number of images, or 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t pcl_dataset_num_images(const PclDataset *dataset);

/**
 * Number of object classes, or 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t pcl_dataset_num_classes(const PclDataset *dataset);

/**
 * # Safety
 * `dataset` is null or a handle not yet freed.
 */
void pcl_dataset_free(PclDataset *dataset);

/**
 * Trains a model on every image of `dataset` with settings in JSON.
 *
 * # Safety
 * `dataset` is a live handle; `config_json` is null or a NUL-terminated
 * string; `out` is writable.
 */
PclStatus pcl_train(const PclDataset *dataset, const char *config_json, PclModel **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
PclStatus pcl_model_load(const char *path, PclModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
PclStatus pcl_model_save(const PclModel *model, const char *path);

/**
 * Number of refined streams, or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t pcl_model_num_refinements(const PclModel *model);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void pcl_model_free(PclModel *model);

/**
 * Evaluates `model` on `dataset`. Writes mAP and mean CorLoc (NaN when
 * undefined) and, if `report_json` is non-null, the full report as a string
 * to be released with [`pcl_string_free`].
 *
 * # Safety
 * Handles are live; `map` and `corloc` are writable; `report_json` is null
 * or writable.
 */
PclStatus pcl_evaluate(const PclModel *model,
                       const PclDataset *dataset,
                       double nms_threshold,
                       double *map,
                       double *corloc,
                       char **report_json);

/**
 * # Safety
 * `s` is null or a string returned by this library and not yet freed.
 */
void pcl_string_free(char *s);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` point to four doubles each; `out` is writable.
 */
PclStatus pcl_iou(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCL_H */
