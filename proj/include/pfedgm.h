/* pfedgm — personalized federated learning simulation engine.
 *
 * C API over the C++ core: opaque handles, integer status codes, thread-local
 * error messages. All handles are created and released by this library.
 */
#ifndef PFEDGM_H
#define PFEDGM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define PFEDGM_API __declspec(dllexport)
#else
#define PFEDGM_API __attribute__((visibility("default")))
#endif

typedef enum pfedgm_status {
  PFEDGM_OK = 0,
  PFEDGM_ERR_INVALID_ARG = -1,
  PFEDGM_ERR_CONFIG = -2,
  PFEDGM_ERR_IO = -3,
  PFEDGM_ERR_RUNTIME = -4
} pfedgm_status;

typedef struct pfedgm_experiment pfedgm_experiment; /* opaque */
typedef struct pfedgm_result pfedgm_result;         /* opaque */

PFEDGM_API const char* pfedgm_version(void);

/* Message for the most recent failure on this thread; never NULL. */
PFEDGM_API const char* pfedgm_last_error(void);

/* Experiment configuration (JSON document, see README for the schema). */
PFEDGM_API pfedgm_status pfedgm_experiment_from_file(const char* path, pfedgm_experiment** out);
PFEDGM_API pfedgm_status pfedgm_experiment_from_json(const char* json_text,
                                                     pfedgm_experiment** out);
PFEDGM_API pfedgm_status pfedgm_experiment_set_method(pfedgm_experiment* exp, const char* method);
PFEDGM_API pfedgm_status pfedgm_experiment_set_seed(pfedgm_experiment* exp, uint64_t seed);
PFEDGM_API pfedgm_status pfedgm_experiment_set_output_dir(pfedgm_experiment* exp, const char* dir);
PFEDGM_API void pfedgm_experiment_free(pfedgm_experiment* exp);

/* Runs the configured experiment end to end and writes all artifacts. */
PFEDGM_API pfedgm_status pfedgm_experiment_run(pfedgm_experiment* exp, pfedgm_result** out);

PFEDGM_API int pfedgm_result_client_count(const pfedgm_result* res);
PFEDGM_API double pfedgm_result_mean_accuracy(const pfedgm_result* res);
PFEDGM_API double pfedgm_result_std_accuracy(const pfedgm_result* res);
/* Accuracy of the idx-th aggregated client; NaN when idx is out of range. */
PFEDGM_API double pfedgm_result_client_accuracy(const pfedgm_result* res, int idx);
PFEDGM_API const char* pfedgm_result_output_dir(const pfedgm_result* res);
PFEDGM_API void pfedgm_result_free(pfedgm_result* res);

/* Writes a ready-to-run default experiment configuration. */
PFEDGM_API pfedgm_status pfedgm_write_default_config(const char* path, uint64_t seed);

/* Runs the built-in oracle checks; returns the number of failures. */
PFEDGM_API int pfedgm_selftest(int verbose);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* PFEDGM_H */
