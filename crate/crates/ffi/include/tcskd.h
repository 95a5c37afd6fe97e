#ifndef TCSKD_H
#define TCSKD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum TcsStatus {
  TCS_STATUS_OK = 0,
  TCS_STATUS_NULL_POINTER = 1,
  TCS_STATUS_INVALID_ARGUMENT = 2,
  TCS_STATUS_IO = 3,
  TCS_STATUS_CORRUPT = 4,
  TCS_STATUS_SHAPE = 5,
  TCS_STATUS_MISSING_INPUT = 6,
  TCS_STATUS_INTERNAL = 7,
  TCS_STATUS_PANIC = 8,
} TcsStatus;

/*
 A loaded scene container.
 */
typedef struct TcsDataset TcsDataset;

/*
 A loaded model checkpoint.
 */
typedef struct TcsModel TcsModel;

/*
 Validation metrics, as fractions in [0, 1].
 */
typedef struct TcsMetrics {
  double iou[3];
  double miou;
  double ap[3];
  double map;
} TcsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or NULL. Owned by the
 library; valid until the next failing call on this thread.
 */
const char *tcs_last_error_message(void);

/*
 Load a `.tcsd` scene container.

 # Safety
 `path` must be NUL-terminated; `out` must be writable.
 */
enum TcsStatus tcs_dataset_load(const char *path, struct TcsDataset **out);

/*
 Number of scenes, 0 for NULL.

 # Safety
 `ds` must be NULL or a live handle.
 */
size_t tcs_dataset_len(const struct TcsDataset *ds);

/*
 Grid height and width of the scenes.

 # Safety
 `ds` must be a live handle; `h` and `w` writable.
 */
enum TcsStatus tcs_dataset_grid(const struct TcsDataset *ds, size_t *h, size_t *w);

/*
 # Safety
 `ds` must be NULL or a handle from [`tcs_dataset_load`], freed once.
 */
void tcs_dataset_free(struct TcsDataset *ds);

/*
 Load a `.tcsp` checkpoint of any role.

 # Safety
 `path` must be NUL-terminated; `out` must be writable.
 */
enum TcsStatus tcs_model_load(const char *path, struct TcsModel **out);

/*
 0 teacher, 1 coach, 2 student; -1 for NULL.

 # Safety
 `m` must be NULL or a live handle.
 */
int32_t tcs_model_role(const struct TcsModel *m);

/*
 Number of scalar parameters, 0 for NULL.

 # Safety
 `m` must be NULL or a live handle.
 */
size_t tcs_model_param_count(const struct TcsModel *m);

/*
 # Safety
 `m` must be NULL or a handle from [`tcs_model_load`], freed once.
 */
void tcs_model_free(struct TcsModel *m);

/*
 Semantic logits of scene `index`, written as 3 × H × W row-major
 values into `out` (capacity `len`).

 # Safety
 Handles must be live; `out` must hold `len` doubles.
 */
enum TcsStatus tcs_predict(const struct TcsModel *m,
                           const struct TcsDataset *ds,
                           size_t index,
                           double *out,
                           size_t len);

/*
 IoU and simplified AP of the model over the whole dataset.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum TcsStatus tcs_evaluate(const struct TcsModel *m,
                            const struct TcsDataset *ds,
                            struct TcsMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCSKD_H */
