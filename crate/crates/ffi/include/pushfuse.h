#ifndef PUSHFUSE_H
#define PUSHFUSE_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_INVALID_VARIANCE = 3,
  PF_STATUS_EMPTY_PRIOR = 4,
  PF_STATUS_ENSEMBLE_TOO_SMALL = 5,
  PF_STATUS_SHAPE_MISMATCH = 6,
  PF_STATUS_NUMERICAL = 7,
  PF_STATUS_MISSING_ARTIFACT = 8,
  PF_STATUS_IO = 9,
  PF_STATUS_DATA = 10,
  PF_STATUS_EPISODE_FINISHED = 11,
  PF_STATUS_PANIC = 12,
} PfStatus;

/**
 * Opaque adaptation ensemble.
 */
typedef struct PfEnsemble PfEnsemble;

/**
 * Opaque pushing environment.
 */
typedef struct PfSim PfSim;

/**
 * Result of one control step.
 */
typedef struct PfStep {
  double reward;
  double pos_err;
  double ang_err;
  bool done;
  bool success;
  bool contact;
} PfStep;

/**
 * Ensemble mean with its variance split (m, m^2).
 */
typedef struct PfEnsembleEstimate {
  double theta;
  double var_epi;
  double var_alea;
  double var_total;
} PfEnsembleEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *pf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pf_version(void);

/**
 * Inverse-variance fusion of two estimates (variances in m^2).
 *
 * # Safety
 * `out_value` and `out_variance` must be valid for writes.
 */
enum PfStatus pf_fuse(double prior_value,
                      double prior_variance,
                      double rma_value,
                      double rma_variance,
                      double *out_value,
                      double *out_variance);

/**
 * Aggregates a prior query set given as JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; the outputs must be valid for writes.
 */
enum PfStatus pf_prior_aggregate_json(const char *json, double *out_value, double *out_variance);

/**
 * Creates an environment. `task_json` may be null for the default T-block
 * task; `sim_json` may be null for default physics.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be valid for writes.
 */
enum PfStatus pf_sim_new(const char *task_json,
                         const char *sim_json,
                         uint64_t seed,
                         struct PfSim **out);

/**
 * # Safety
 * `sim` must come from [`pf_sim_new`] and not be used afterwards.
 */
void pf_sim_free(struct PfSim *sim);

/**
 * Starts an episode at an explicit pose with the given true and
 * conditioned CoM (m).
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum PfStatus pf_sim_reset(struct PfSim *sim,
                           double x,
                           double y,
                           double theta,
                           double true_com,
                           double conditioned_com,
                           uint64_t seed);

/**
 * Writes the 9-element actor observation.
 *
 * # Safety
 * `sim` must be a live handle; `out_obs` must hold `len` doubles.
 */
enum PfStatus pf_sim_observe(const struct PfSim *sim, double *out_obs, size_t len);

/**
 * Applies a pusher displacement (goal frame, m).
 *
 * # Safety
 * `sim` must be a live handle; `out` must be valid for writes.
 */
enum PfStatus pf_sim_step(struct PfSim *sim, double dx, double dy, struct PfStep *out);

/**
 * Overrides the conditioned CoM for the next steps.
 *
 * # Safety
 * `sim` must be a live handle.
 */
enum PfStatus pf_sim_set_conditioning(struct PfSim *sim, double value);

/**
 * Loads an ensemble checkpoint written by `pushfuse train-adapters`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid for writes.
 */
enum PfStatus pf_ensemble_load(const char *path, struct PfEnsemble **out);

/**
 * # Safety
 * `ens` must come from [`pf_ensemble_load`] and not be used afterwards.
 */
void pf_ensemble_free(struct PfEnsemble *ens);

/**
 * History length the ensemble expects, or 0 for a null handle.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
size_t pf_ensemble_window(const struct PfEnsemble *ens);

/**
 * Estimates the CoM from `steps` transitions. `before` and `after` hold
 * `steps * 9` actor observations each, oldest first; only the newest
 * window-length transitions are used.
 *
 * # Safety
 * `ens` must be a live handle; `before`/`after` must hold `steps * 9`
 * doubles (they may be null when `steps` is 0); `out` must be valid for writes.
 */
enum PfStatus pf_ensemble_estimate(const struct PfEnsemble *ens,
                                   const double *before,
                                   const double *after,
                                   size_t steps,
                                   struct PfEnsembleEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PUSHFUSE_H */
