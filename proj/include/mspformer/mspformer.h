#ifndef MSPFORMER_H
#define MSPFORMER_H

/* C interface to the MSP-Former snow-removal library.
 *
 * All functions are thread-compatible: handles must not be shared across
 * threads without external synchronization, and the error message returned
 * by mspf_last_error() is per thread. No exception ever crosses this
 * boundary; failures surface as a status code plus a retrievable message.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MSPF_API __declspec(dllexport)
#else
#define MSPF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mspf_status {
    MSPF_OK = 0,
    MSPF_ERR_CONFIG = 1,   /* invalid configuration key, value, or combination */
    MSPF_ERR_IO = 2,       /* missing or unreadable/unwritable file or directory */
    MSPF_ERR_FORMAT = 3,   /* malformed image or checkpoint payload */
    MSPF_ERR_SHAPE = 4,    /* tensor extent mismatch */
    MSPF_ERR_DOMAIN = 5,   /* argument outside its mathematical domain */
    MSPF_ERR_NUMERIC = 6,  /* non-finite value or failed numeric check */
    MSPF_ERR_CONTRACT = 7, /* API misuse: null handle, bad argument combination */
    MSPF_ERR_UNKNOWN = 8
} mspf_status;

/* Message for the most recent failure on the calling thread; the empty
 * string when the last call succeeded. The pointer stays valid until the
 * next library call on the same thread. */
MSPF_API const char* mspf_last_error(void);

/* Process exit code convention: 0 success, 3 numeric failure, 2 anything
 * else. */
MSPF_API int mspf_exit_code(mspf_status status);

/* ------------------------------------------------------------------ */
/* Run configuration: an INI document with [model], [train], [snow] and
 * [io] sections. Parsing validates every field; mutation via _set defers
 * validation to the command that consumes the handle. */

typedef struct mspf_config mspf_config;

MSPF_API mspf_config* mspf_config_default(void);
MSPF_API mspf_config* mspf_config_load(const char* path);
MSPF_API mspf_config* mspf_config_parse(const char* text);
/* key is dotted section.key, e.g. "train.seed" or "model.variant". */
MSPF_API mspf_status mspf_config_set(mspf_config* cfg, const char* key, const char* value);
/* Returns a NUL-terminated INI document; release with mspf_string_free.
 * NULL on failure. */
MSPF_API char* mspf_config_serialize(const mspf_config* cfg);
MSPF_API void mspf_config_free(mspf_config* cfg);

/* Releases any string returned by this library. */
MSPF_API void mspf_string_free(char* s);

/* ------------------------------------------------------------------ */
/* Model handle: 64-bit reference-precision parameters. */

typedef struct mspf_model mspf_model;

MSPF_API mspf_model* mspf_model_build(const mspf_config* cfg, uint64_t seed);
/* Rebuilds the architecture from the configuration embedded in the
 * checkpoint, then restores its parameters. */
MSPF_API mspf_model* mspf_model_load(const char* ckpt_path);
/* Total learnable scalar count; -1 on null handle. */
MSPF_API int64_t mspf_model_param_count(const mspf_model* m);
/* Multiply-accumulate count of one forward pass at h x w (batch 1).
 * Extents must be multiples of the model's size granule. */
MSPF_API mspf_status mspf_model_macs(const mspf_model* m, int64_t h, int64_t w,
                                     int64_t* out_total);
/* Reads a P6 PPM, restores it (pad, forward, crop, clamp), writes a P6 PPM
 * of identical extents. */
MSPF_API mspf_status mspf_model_restore_image(const mspf_model* m, const char* input_path,
                                              const char* output_path);
MSPF_API void mspf_model_free(mspf_model* m);

/* ------------------------------------------------------------------ */
/* Commands. These mirror the CLI one to one; report strings are returned
 * through optional out-parameters (release with mspf_string_free). Flags
 * such as seeds, thread caps and deterministic mode travel inside the
 * configuration handle ([io] section). */

/* Renders `count` degraded/clean pairs from the PPM images in clean_dir
 * into out_dir plus a manifest; driven by the [snow] section. */
MSPF_API mspf_status mspf_cmd_synth(const mspf_config* cfg, const char* clean_dir,
                                    const char* out_dir, long long count);

/* Trains on the paired dataset in data_dir, writing checkpoints and a
 * `train.log` metrics file into out_dir. resume_ckpt (nullable) restores
 * parameters, optimizer state and the epoch counter. Reference mode
 * (io.deterministic = true) runs single-threaded in 64-bit and is byte
 * reproducible; otherwise training runs in 32-bit. A non-finite loss
 * aborts with MSPF_ERR_NUMERIC, keeping the last good checkpoint. */
MSPF_API mspf_status mspf_cmd_train(const mspf_config* cfg, const char* data_dir,
                                    const char* out_dir, const char* resume_ckpt);

/* Restores one image through the checkpointed model. */
MSPF_API mspf_status mspf_cmd_infer(const char* ckpt_path, const char* input_path,
                                    const char* output_path);

/* Evaluates the checkpointed model on a dataset. The TSV table (name,
 * psnr, ssim, baseline_psnr, baseline_ssim; one row per pair plus a mean
 * row) is written to report_path when non-null and returned through
 * out_report when non-null. */
MSPF_API mspf_status mspf_cmd_eval(const char* ckpt_path, const char* data_dir,
                                   const char* report_path, char** out_report);

/* Trains and evaluates each requested architecture variant under the
 * identical seed and schedule. variants is a comma-separated subset of
 * {msp, ssp, sra, ma, no-lcb, no-cs}. Artifacts land in out_dir/<variant>/
 * and the summary table (variant, params, macs, psnr, ssim) is written to
 * out_dir/ablation.tsv and returned through out_table when non-null. */
MSPF_API mspf_status mspf_cmd_ablate(const mspf_config* cfg, const char* variants,
                                     const char* data_dir, const char* out_dir,
                                     char** out_table);

/* Runs the finite-difference gradient suite in 64-bit mode over the given
 * scope ("ops", "blocks", "model", or "all"). Returns MSPF_OK only when
 * every case passes; the per-case report is returned through out_report
 * when non-null. */
MSPF_API mspf_status mspf_cmd_gradcheck(const char* scope, char** out_report);

/* Prints parameter and multiply-accumulate accounting for the configured
 * architecture at resolution res ("HxW", default "256x256"). */
MSPF_API mspf_status mspf_cmd_cost(const mspf_config* cfg, const char* res, char** out_report);

#ifdef __cplusplus
}
#endif

#endif /* MSPFORMER_H */
