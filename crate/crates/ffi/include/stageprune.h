#ifndef STAGEPRUNE_H
#define STAGEPRUNE_H

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_INVALID_ARGUMENT = 2,
  SP_STATUS_SHAPE = 3,
  SP_STATUS_DEGENERATE_CURVE = 4,
  SP_STATUS_AMBIGUOUS_CROSSING = 5,
  SP_STATUS_NUMERICAL = 6,
  SP_STATUS_IO = 7,
  SP_STATUS_CHECKPOINT = 8,
  SP_STATUS_PANIC = 9,
  SP_STATUS_INTERNAL = 10,
} SpStatus;

typedef enum SpScheduleFamily {
  SP_SCHEDULE_FAMILY_LINEAR = 0,
  SP_SCHEDULE_FAMILY_SCALED_LINEAR = 1,
} SpScheduleFamily;

/*
 Opaque dense denoiser.
 */
typedef struct SpModel SpModel;

/*
 Opaque set of per-stage denoisers.
 */
typedef struct SpMosaic SpMosaic;

/*
 Opaque three-stage plan.
 */
typedef struct SpPlan SpPlan;

/*
 Opaque noise schedule.
 */
typedef struct SpSchedule SpSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null if none.
 The pointer stays valid until the next failing call on the same thread.
 */
const char *sp_last_error_message(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void sp_string_free(char *s);

/*
 Creates a schedule. Non-positive `beta_start` and `beta_end` select the
 family defaults.

 # Safety
 `out` must be a valid pointer.
 */
enum SpStatus sp_schedule_new(enum SpScheduleFamily family,
                              size_t horizon,
                              double beta_start,
                              double beta_end,
                              struct SpSchedule **out);

/*
 # Safety
 `s` must come from [`sp_schedule_new`] or be null.
 */
void sp_schedule_free(struct SpSchedule *s);

/*
 # Safety
 `s` and `out` must be valid.
 */
enum SpStatus sp_schedule_alpha_bar(const struct SpSchedule *s, size_t t, double *out);

/*
 Closed-form expected prediction error at `t` for signal power `signal_power`.

 # Safety
 `s` and `out` must be valid.
 */
enum SpStatus sp_schedule_expected_mse(const struct SpSchedule *s,
                                       size_t t,
                                       double signal_power,
                                       double *out);

/*
 Closed-form expected error change between `t - 1` and `t`, per step.

 # Safety
 `s` and `out` must be valid.
 */
enum SpStatus sp_schedule_expected_grad(const struct SpSchedule *s,
                                        size_t t,
                                        double signal_power,
                                        double *out);

/*
 Divides the trajectory into three stages and allocates `target_aggregate`
 across them. `weighting_steps == 0` weights stages by timestep count,
 otherwise by the number of DDIM steps that land in each stage.

 # Safety
 `s` and `out` must be valid.
 */
enum SpStatus sp_plan_divide(const struct SpSchedule *s,
                             double lambda,
                             double threshold_fraction,
                             double signal_power,
                             double target_aggregate,
                             size_t weighting_steps,
                             struct SpPlan **out);

/*
 Parses a plan from its text form.

 # Safety
 `text` must be a NUL-terminated string and `out` valid.
 */
enum SpStatus sp_plan_from_text(const char *text, struct SpPlan **out);

/*
 # Safety
 `p` must come from this library or be null.
 */
void sp_plan_free(struct SpPlan *p);

/*
 # Safety
 All pointers must be valid.
 */
enum SpStatus sp_plan_dividers(const struct SpPlan *p, size_t *d1, size_t *d2);

/*
 Writes the three stage sparsities, earliest (noisiest) stage first.

 # Safety
 `out` must point to three writable doubles.
 */
enum SpStatus sp_plan_sparsities(const struct SpPlan *p, double *out);

/*
 # Safety
 `p` and `out` must be valid.
 */
enum SpStatus sp_plan_stage_of(const struct SpPlan *p, size_t t, size_t *out);

/*
 Text form of the plan; release with [`sp_string_free`].

 # Safety
 `p` and `out` must be valid.
 */
enum SpStatus sp_plan_to_text(const struct SpPlan *p, char **out);

/*
 Group OBS pruning of one linear layer.

 `weights` is `rows x cols` row-major; `activations` is `samples x cols`
 row-major and feeds the layer Hessian `XᵀX`. Groups are `group_size`
 consecutive input columns. On success `out_weights` holds the compensated
 weights, `out_mask[g]` is 1 for every pruned group and `out_recon_error`
 the output reconstruction error under the undamped Hessian.

 # Safety
 Buffers must hold the stated number of elements; `out_mask` holds
 `cols / group_size` bytes.
 */
enum SpStatus sp_prune_layer(const double *weights,
                             size_t rows,
                             size_t cols,
                             const double *activations,
                             size_t samples,
                             double damping,
                             double sparsity,
                             size_t group_size,
                             double *out_weights,
                             uint8_t *out_mask,
                             double *out_recon_error);

/*
 Loads a dense checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out` valid.
 */
enum SpStatus sp_model_load(const char *path, struct SpModel **out);

/*
 # Safety
 `m` must come from [`sp_model_load`] or be null.
 */
void sp_model_free(struct SpModel *m);

/*
 Values per generated sample.

 # Safety
 `m` and `out` must be valid.
 */
enum SpStatus sp_model_pixels(const struct SpModel *m, size_t *out);

/*
 Samples `n` images with the dense model. `steps == 0` selects DDPM over
 every timestep, otherwise DDIM with that many steps.

 # Safety
 `classes` holds `n` labels and `out` has room for `n * pixels` floats.
 */
enum SpStatus sp_model_sample(const struct SpModel *m,
                              const struct SpSchedule *s,
                              size_t steps,
                              const size_t *classes,
                              size_t n,
                              float cfg_scale,
                              uint64_t seed,
                              float *out);

/*
 Loads a per-stage model directory written by `stageprune prune`.

 # Safety
 `dir` must be a NUL-terminated string; `dense` and `out` valid. `dense` is
 copied and may be freed afterwards.
 */
enum SpStatus sp_mosaic_load(const char *dir, const struct SpModel *dense, struct SpMosaic **out);

/*
 # Safety
 `m` must come from [`sp_mosaic_load`] or be null.
 */
void sp_mosaic_free(struct SpMosaic *m);

/*
 Samples with the stage model matching each timestep; same buffer rules as
 [`sp_model_sample`].

 # Safety
 `classes` holds `n` labels and `out` has room for `n * pixels` floats.
 */
enum SpStatus sp_mosaic_sample(const struct SpMosaic *m,
                               const struct SpSchedule *s,
                               size_t steps,
                               const size_t *classes,
                               size_t n,
                               float cfg_scale,
                               uint64_t seed,
                               float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STAGEPRUNE_H */
