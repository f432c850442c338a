#ifndef NEWTON_CNN_H
#define NEWTON_CNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum NcnnStatus {
  NCNN_STATUS_OK = 0,
  NCNN_STATUS_NULL_POINTER = 1,
  NCNN_STATUS_INVALID_ARGUMENT = 2,
  NCNN_STATUS_CONFIG = 3,
  NCNN_STATUS_SHAPE = 4,
  NCNN_STATUS_DIMENSION = 5,
  NCNN_STATUS_DATA = 6,
  NCNN_STATUS_NUMERICAL = 7,
  NCNN_STATUS_IO = 8,
  NCNN_STATUS_PANIC = 9,
} NcnnStatus;

// The Gauss-Newton operator at a fixed point and subset.
typedef struct NcnnGaussNewton NcnnGaussNewton;

// A network architecture with its index maps.
typedef struct NcnnModel NcnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *ncnn_last_error(void);

// Build a model from an architecture description.
//
// # Safety
// `config` is a NUL-terminated string and `out` is writable.
enum NcnnStatus ncnn_model_new(const char *config, struct NcnnModel **out);

// # Safety
// `model` is NULL or came from [`ncnn_model_new`] and is not used afterwards.
void ncnn_model_free(struct NcnnModel *model);

// Number of parameters `n`.
//
// # Safety
// `model` is a live handle and `out` is writable.
enum NcnnStatus ncnn_param_count(const struct NcnnModel *model, size_t *out);

// Number of classes `K`.
//
// # Safety
// `model` is a live handle and `out` is writable.
enum NcnnStatus ncnn_num_classes(const struct NcnnModel *model, size_t *out);

// Write seeded initial parameters into `theta[0..n]`.
//
// # Safety
// `model` is a live handle and `theta` is valid for `n` writes.
enum NcnnStatus ncnn_init_params(const struct NcnnModel *model,
                                 uint64_t seed,
                                 double *theta,
                                 size_t n);

// `f(θ) = θᵀθ/(2C) + (1/l)·Σ‖z − y‖²` over `instances` images.
//
// # Safety
// `theta` holds `n` reals, `images` holds `instances` images, `labels`
// holds `instances` labels and `f` is writable.
enum NcnnStatus ncnn_objective(const struct NcnnModel *model,
                               const double *theta,
                               size_t n,
                               const double *images,
                               const uint32_t *labels,
                               size_t instances,
                               double c,
                               double *f);

// `f(θ)` and `∇f(θ)`; `f` may be NULL.
//
// # Safety
// As [`ncnn_objective`], plus `grad` is valid for `n` writes.
enum NcnnStatus ncnn_gradient(const struct NcnnModel *model,
                              const double *theta,
                              size_t n,
                              const double *images,
                              const uint32_t *labels,
                              size_t instances,
                              double c,
                              double *f,
                              double *grad);

// Set up `v ↦ (1/C + λ)v + (1/|S|)·Jᵀ(2Jv)` at `θ` with every given image
// as the subset.
//
// # Safety
// `theta` holds `n` reals, `images` holds `instances` images and `out` is
// writable.
enum NcnnStatus ncnn_gn_new(const struct NcnnModel *model,
                            const double *theta,
                            size_t n,
                            const double *images,
                            size_t instances,
                            double c,
                            double lambda,
                            struct NcnnGaussNewton **out);

// `out = G v`, both of length `n`.
//
// # Safety
// `gn` is a live handle, `v` and `out` are valid for `n` reals and do not
// overlap.
enum NcnnStatus ncnn_gn_matvec(struct NcnnGaussNewton *gn, const double *v, double *out, size_t n);

// Replace the damping λ; the Jacobian does not depend on it.
//
// # Safety
// `gn` is a live handle.
enum NcnnStatus ncnn_gn_set_lambda(struct NcnnGaussNewton *gn, double lambda);

// # Safety
// `gn` is NULL or came from [`ncnn_gn_new`] and is not used afterwards.
void ncnn_gn_free(struct NcnnGaussNewton *gn);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEWTON_CNN_H */
