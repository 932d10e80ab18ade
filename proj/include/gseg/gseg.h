/* C interface to the gseg library. Every function returns a gseg_status;
 * on failure a description is available from gseg_last_error() on the same
 * thread until the next call. Handles are opaque and owned by the caller. */
#ifndef GSEG_GSEG_H
#define GSEG_GSEG_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define GSEG_API __declspec(dllexport)
#else
#define GSEG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gseg_status {
  GSEG_OK = 0,
  GSEG_ERR_INVALID_ARGUMENT = 1,
  GSEG_ERR_SHAPE = 2,
  GSEG_ERR_IO = 3,
  GSEG_ERR_FORMAT = 4,
  GSEG_ERR_NUMERIC = 5,
  GSEG_ERR_INTERNAL = 6
} gseg_status;

typedef struct gseg_config gseg_config; /* network + training settings */
typedef struct gseg_net gseg_net;

typedef struct gseg_metrics {
  double ja, di, ac, se, sp;
} gseg_metrics;

typedef struct gseg_epoch_log {
  int epoch;
  double lr;
  double train_loss;
  gseg_metrics val;
} gseg_epoch_log;

typedef struct gseg_check_result {
  const char* name; /* valid only during the callback */
  double max_error;
  double tolerance;
  int passed;
} gseg_check_result;

typedef void (*gseg_epoch_fn)(const gseg_epoch_log* log, void* user);
typedef void (*gseg_check_fn)(const gseg_check_result* result, void* user);

GSEG_API const char* gseg_last_error(void);
GSEG_API const char* gseg_status_name(gseg_status status);

/* ---- configuration ---- */

/* path "default" yields the built-in defaults. */
GSEG_API gseg_status gseg_config_load(const char* path, gseg_config** out);
/* Same grammar as one `key = value` line of a config file. */
GSEG_API gseg_status gseg_config_set(gseg_config* config, const char* key, const char* value);
/* Non-equivariant P1 net with width round(base_width * sqrt(|S|)). */
GSEG_API gseg_status gseg_config_plain_twin(const gseg_config* config, gseg_config** out);
/* Net keys in config-file grammar; *len excludes the terminator. */
GSEG_API gseg_status gseg_config_describe(const gseg_config* config, char* buffer, size_t size,
                                          size_t* len);
GSEG_API void gseg_config_free(gseg_config* config);

/* ---- networks ---- */

GSEG_API gseg_status gseg_net_create(const gseg_config* config, uint64_t seed, gseg_net** out);
GSEG_API gseg_status gseg_net_load(const char* path, gseg_net** out);
GSEG_API gseg_status gseg_net_save(gseg_net* net, const char* path);
GSEG_API void gseg_net_free(gseg_net* net);
GSEG_API gseg_status gseg_net_param_count(const gseg_net* net, int64_t* out);

/* Eval-mode logits. image is [batch, 3, size, size] row-major; each non-null
 * output receives [batch, 1, size, size]. */
GSEG_API gseg_status gseg_net_forward(gseg_net* net, const double* image, int64_t batch,
                                      int64_t size, double* main_logits, double* aux1_logits,
                                      double* aux2_logits);
/* Binary mask [size, size] from fused head probabilities >= 0.5. */
GSEG_API gseg_status gseg_net_predict(gseg_net* net, const double* image, int64_t size,
                                      uint8_t* mask);
/* P6 image in, P5 mask out. */
GSEG_API gseg_status gseg_net_predict_file(gseg_net* net, const char* image_path,
                                           const char* mask_path);

/* ---- data, training, evaluation ---- */

GSEG_API gseg_status gseg_generate_dataset(int n, int size, uint64_t seed, const char* dir);

/* Trains a fresh net seeded from the config's seed. val_dir may be NULL, in
 * which case per-epoch metrics use the training set; on_epoch may be NULL,
 * in which case no per-epoch metrics are computed. */
GSEG_API gseg_status gseg_train(const gseg_config* config, const char* data_dir,
                                const char* val_dir, gseg_epoch_fn on_epoch, void* user,
                                gseg_net** out);

/* pooled != 0 sums confusion counts over the set; otherwise per-image mean. */
GSEG_API gseg_status gseg_evaluate(gseg_net* net, const char* data_dir, int pooled,
                                   gseg_metrics* out);

/* ---- audits ---- */

/* Layer equivariance for the config's group (tolerance layer_tol) and the
 * full network in eval mode on 64x64 inputs or the next valid size
 * (tolerance net_tol). *all_passed is set to 1 iff every check passes. */
GSEG_API gseg_status gseg_check_equivariance(const gseg_config* config, int trials,
                                             double layer_tol, double net_tol, uint64_t seed,
                                             gseg_check_fn report, void* user, int* all_passed);

/* Finite-difference checks of every layer and of the configured net on
 * 16x16 inputs (or the next valid size). */
GSEG_API gseg_status gseg_gradcheck(const gseg_config* config, uint64_t seed, double tolerance,
                                    gseg_check_fn report, void* user, int* all_passed);

#ifdef __cplusplus
}
#endif

#endif /* GSEG_GSEG_H */
