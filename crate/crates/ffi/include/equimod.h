#ifndef EQUIMOD_H
#define EQUIMOD_H

#include <stddef.h>
#include <stdint.h>

typedef enum EqmStatus {
  EQM_STATUS_OK = 0,
  EQM_STATUS_NULL_POINTER = 1,
  EQM_STATUS_INVALID_ARGUMENT = 2,
  EQM_STATUS_CONFIG = 3,
  EQM_STATUS_SHAPE = 4,
  EQM_STATUS_NUMERIC = 5,
  EQM_STATUS_IO = 6,
  EQM_STATUS_PANIC = 7,
  EQM_STATUS_INTERNAL = 8,
} EqmStatus;

typedef enum EqmDataset {
  EQM_DATASET_CIFAR10 = 0,
  EQM_DATASET_IMAGENET = 1,
} EqmDataset;

typedef enum EqmBaseline {
  EQM_BASELINE_SIMCLR = 0,
  EQM_BASELINE_BYOL = 1,
  EQM_BASELINE_BARLOW = 2,
} EqmBaseline;

typedef enum EqmView {
  EQM_VIEW_FIRST = 0,
  EQM_VIEW_SECOND = 1,
} EqmView;

// Experiment configuration.
typedef struct EqmConfig EqmConfig;

// Encoding layout with fitted normalization statistics.
typedef struct EqmLayout EqmLayout;

// Augmentation policy for one view.
typedef struct EqmPolicy EqmPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Human-readable message for the last failure on this thread, or null.
// Valid until the next call into this library from the same thread.
const char *eqm_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void eqm_string_free(char *s);

// Preset policy for one view of a dataset/baseline pairing.
//
// # Safety
// `out` must be a valid pointer.
enum EqmStatus eqm_policy_new(enum EqmDataset dataset,
                              enum EqmBaseline baseline,
                              enum EqmView view,
                              struct EqmPolicy **out);

// # Safety
// `policy` must be null or a live handle from [`eqm_policy_new`].
void eqm_policy_free(struct EqmPolicy *policy);

// Length of the raw trace encoding for the policy's profile.
//
// # Safety
// Pointers must be valid.
enum EqmStatus eqm_policy_encoding_len(const struct EqmPolicy *policy, uintptr_t *out);

// Samples an augmentation for a `width`×`height` source image and writes
// its raw (unnormalized) encoding into `out[0..len]`.
//
// # Safety
// `policy` must be live and `out` must hold `len` doubles.
enum EqmStatus eqm_policy_sample_encoding(const struct EqmPolicy *policy,
                                          uint32_t width,
                                          uint32_t height,
                                          uint64_t seed,
                                          double *out,
                                          uintptr_t len);

// Fits normalization statistics on `samples` sampled traces over a fixed
// source size, as the trainer does before a run.
//
// # Safety
// `out` must be a valid pointer.
enum EqmStatus eqm_layout_fit(enum EqmDataset dataset,
                              enum EqmBaseline baseline,
                              uint32_t width,
                              uint32_t height,
                              uintptr_t samples,
                              uint64_t seed,
                              struct EqmLayout **out);

// Reads a `layout.toml` written by a training run.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid.
enum EqmStatus eqm_layout_load(const char *path, struct EqmLayout **out);

// # Safety
// `layout` must be null or a live handle.
void eqm_layout_free(struct EqmLayout *layout);

// # Safety
// Pointers must be valid.
enum EqmStatus eqm_layout_len(const struct EqmLayout *layout, uintptr_t *out);

// Standardizes a raw encoding of length `len` into `out`.
//
// # Safety
// `raw` and `out` must each hold `len` doubles.
enum EqmStatus eqm_layout_normalize(const struct EqmLayout *layout,
                                    const double *raw,
                                    uintptr_t len,
                                    double *out);

// # Safety
// `name` must be a NUL-terminated string and `out` valid.
enum EqmStatus eqm_config_from_preset(const char *name, struct EqmConfig **out);

// # Safety
// `toml` must be a NUL-terminated string and `out` valid.
enum EqmStatus eqm_config_from_toml(const char *toml, struct EqmConfig **out);

// Sets a dotted key to a TOML literal, e.g. `("loss.lambda", "0.5")`.
// The config is unchanged when the override is rejected.
//
// # Safety
// `config` must be live; strings NUL-terminated.
enum EqmStatus eqm_config_set(struct EqmConfig *config, const char *key, const char *value);

// Serializes the config; release the result with [`eqm_string_free`].
//
// # Safety
// `config` must be live and `out` valid.
enum EqmStatus eqm_config_to_toml(const struct EqmConfig *config, char **out);

// # Safety
// `config` must be null or a live handle.
void eqm_config_free(struct EqmConfig *config);

// Mean equivariance loss over `views` = 2N rows. Row `a` and row
// `(a + N) mod 2N` are the two views of one image. `z_equi` and `z_pred`
// are `views × width`. A nonzero `include_positive` adds the positive pair
// to the denominator.
//
// # Safety
// Both arrays must hold `views * width` doubles; `out` must be valid.
enum EqmStatus eqm_equimod_loss(const double *z_equi,
                                const double *z_pred,
                                uintptr_t views,
                                uintptr_t width,
                                double tau_prime,
                                int32_t include_positive,
                                double *out);

// NT-Xent over `views` = 2N rows of `z` (`views × width`).
//
// # Safety
// `z` must hold `views * width` doubles; `out` must be valid.
enum EqmStatus eqm_simclr_loss(const double *z,
                               uintptr_t views,
                               uintptr_t width,
                               double tau,
                               double *out);

// `cos(z_view, z_pred) − cos(z_view, z_orig)` for single vectors.
//
// # Safety
// Each array must hold `width` doubles; `out` must be valid.
enum EqmStatus eqm_absolute_equivariance(const double *z_view,
                                         const double *z_pred,
                                         const double *z_orig,
                                         uintptr_t width,
                                         double *out);

// `(1 − cos(z_view, z_orig)) / (1 − cos(z_view, z_pred))`, denominator floored.
//
// # Safety
// Each array must hold `width` doubles; `out` must be valid.
enum EqmStatus eqm_relative_equivariance(const double *z_view,
                                         const double *z_pred,
                                         const double *z_orig,
                                         uintptr_t width,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQUIMOD_H */
