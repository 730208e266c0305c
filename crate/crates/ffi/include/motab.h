#ifndef MOTAB_H
#define MOTAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MotabStatus {
  MOTAB_STATUS_OK = 0,
  MOTAB_STATUS_NULL_POINTER = 1,
  MOTAB_STATUS_INVALID_UTF8 = 2,
  MOTAB_STATUS_INVALID_ARGUMENT = 3,
  MOTAB_STATUS_CONFIG = 4,
  MOTAB_STATUS_BACKEND = 5,
  MOTAB_STATUS_IO = 6,
  // Trajectories failed; the dataset was still written.
  MOTAB_STATUS_PARTIAL = 7,
  MOTAB_STATUS_PANIC = 8,
} MotabStatus;

// Run configuration handle.
typedef struct MotabConfig MotabConfig;

// Policy backend handle (tabular or remote).
typedef struct MotabPolicy MotabPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next call on the same thread.
const char *motab_last_error(void);

// Library version as a static string.
const char *motab_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void motab_string_free(char *s);

// Creates a configuration with default values.
//
// # Safety
// `out` must be a valid pointer.
enum MotabStatus motab_config_new(struct MotabConfig **out);

// Sets one configuration key from its textual value and revalidates.
//
// # Safety
// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
enum MotabStatus motab_config_set(struct MotabConfig *cfg, const char *key, const char *value);

// Effective configuration as JSON.
//
// # Safety
// `cfg` must be a live handle; `out` a valid pointer.
enum MotabStatus motab_config_to_json(const struct MotabConfig *cfg, char **out);

// # Safety
// `cfg` must come from [`motab_config_new`] and not be freed twice.
void motab_config_free(struct MotabConfig *cfg);

// Bundled tabular fixture by name.
//
// # Safety
// `name` must be a NUL-terminated string; `out` a valid pointer.
enum MotabStatus motab_policy_fixture(const char *name, struct MotabPolicy **out);

// Tabular policy from its JSON specification.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum MotabStatus motab_policy_tabular_json(const char *json, struct MotabPolicy **out);

// OpenAI-compatible completions endpoint. The bearer token, if any, is read
// from the environment variable named by `auth_env` (may be null).
//
// # Safety
// String arguments must be NUL-terminated; `out` a valid pointer.
enum MotabStatus motab_policy_remote(const char *base_url,
                                     const char *model,
                                     const char *auth_env,
                                     struct MotabPolicy **out);

// # Safety
// `p` must come from a `motab_policy_*` constructor and not be freed twice.
void motab_policy_free(struct MotabPolicy *p);

// Synthesizes one trajectory and returns it as a dataset record (one JSON
// line). Backend failures are reported inside the record (`terminal =
// failed`), not through the status.
//
// # Safety
// Handles must be live; strings NUL-terminated; `out_json` a valid pointer.
enum MotabStatus motab_synthesize(const struct MotabPolicy *student,
                                  const struct MotabPolicy *teacher,
                                  const struct MotabConfig *cfg,
                                  const char *method,
                                  const char *question_id,
                                  const char *question_text,
                                  uint64_t sample_index,
                                  char **out_json);

// Batch synthesis from a JSONL question file into a JSONL dataset with a
// checkpoint next to it. Writes the run summary JSON to `out_summary`
// (may be null). Returns `Partial` when some trajectories failed.
//
// # Safety
// Handles must be live; strings NUL-terminated.
enum MotabStatus motab_run_batch(const struct MotabPolicy *student,
                                 const struct MotabPolicy *teacher,
                                 const struct MotabConfig *cfg,
                                 const char *method,
                                 const char *questions_path,
                                 const char *output_path,
                                 char **out_summary);

// Step value `exp(mean(logprobs))`.
//
// # Safety
// `logprobs` must point to `n` doubles; `out` a valid pointer.
enum MotabStatus motab_step_value(const double *logprobs, uintptr_t n, double *out);

// Entropy of the renormalized top-k distribution given its logprobs.
//
// # Safety
// `logprobs` must point to `n` doubles; `out` a valid pointer.
enum MotabStatus motab_renormalized_entropy(const double *logprobs, uintptr_t n, double *out);

// `gamma0 * exp(-alpha * entropy)`.
//
// # Safety
// `out` must be a valid pointer.
enum MotabStatus motab_adaptive_threshold(double gamma0, double alpha, double entropy, double *out);

// Rewind point (1-based) for a breach at step `breach` (1-based).
//
// # Safety
// `values` and `thresholds` must point to `n` doubles; `out` a valid pointer.
enum MotabStatus motab_select_safe_point(const double *values,
                                         const double *thresholds,
                                         uintptr_t n,
                                         uintptr_t breach,
                                         uintptr_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOTAB_H */
