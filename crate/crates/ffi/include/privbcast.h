/* C interface for the privbcast broadcast simulator. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call in this interface.
typedef enum PbStatus {
  // The call succeeded.
  PB_OK = 0,
  // A required pointer argument was null.
  PB_NULL_ARG = 1,
  // An input string was not valid UTF-8.
  PB_UTF8 = 2,
  // The config string was not valid JSON for an experiment config.
  PB_JSON = 3,
  // The config parsed but failed validation, or the graph is infeasible.
  PB_CONFIG = 4,
  // The run itself failed (for example the event budget was exhausted).
  PB_RUNTIME = 5,
} PbStatus;

// One completed simulation run. Opaque; create with [`pb_run_new`], read
// with the accessor functions, release with [`pb_run_free`].
typedef struct PbRun PbRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Runs one trial of the config in `config_json` (same JSON schema as the
// CLI's `--config` file) and stores a new run handle in `*out`. `run_index`
// offsets the seed exactly like the CLI's run ids, so index `i` here
// reproduces row `i` of a `simulate` invocation with the same config.
//
// # Safety
// `config_json` must be a valid NUL-terminated C string and `out` a valid
// pointer to writable memory; both must outlive the call. On `PB_OK` the
// caller owns `*out` and must release it with [`pb_run_free`]. On any other
// status `*out` is left untouched.
enum PbStatus pb_run_new(const char *config_json, uint64_t run_index, struct PbRun **out);

// Releases a run handle. Passing null is a no-op.
//
// # Safety
// `run` must be null or a pointer obtained from [`pb_run_new`] that has not
// already been freed.
void pb_run_free(struct PbRun *run);

// Stores the run's summary row as a JSON object in `*out`.
//
// # Safety
// `run` must be a live handle from [`pb_run_new`] and `out` a valid pointer.
// On `PB_OK` the caller owns `*out` and must release it with
// [`pb_string_free`].
enum PbStatus pb_run_report_json(const struct PbRun *run, char **out);

// Stores the run's summary row as one CSV line (no trailing newline) in
// `*out`. Column order matches [`pb_csv_header`].
//
// # Safety
// Same contract as [`pb_run_report_json`].
enum PbStatus pb_run_report_csv_row(const struct PbRun *run, char **out);

// Stores the run's full wire trace as NDJSON in `*out`: a metadata object
// on the first line, then one delivery record per line.
//
// # Safety
// Same contract as [`pb_run_report_json`].
enum PbStatus pb_run_trace_ndjson(const struct PbRun *run, char **out);

// Writes the run's per-phase message counts (group round, diffusion,
// flood) into `out[0..3]`.
//
// # Safety
// `run` must be a live handle from [`pb_run_new`] and `out` must point to
// an array of at least three `uint64_t`.
enum PbStatus pb_run_phase_messages(const struct PbRun *run, uint64_t *out);

// Builds the graph described by `config_json` and writes its node count,
// edge count, and diameter to the three out-pointers. Only the topology
// fields of the config are consulted, so partial configs work.
//
// # Safety
// `config_json` must be a valid NUL-terminated C string; `out_n`,
// `out_edges`, and `out_diameter` must be valid writable pointers.
enum PbStatus pb_topology_info(const char *config_json,
                               uint64_t *out_n,
                               uint64_t *out_edges,
                               uint64_t *out_diameter);

// Releases a string returned through an out-pointer. Passing null is a
// no-op.
//
// # Safety
// `s` must be null or a pointer obtained from this library's string
// out-parameters that has not already been freed.
void pb_string_free(char *s);

// Returns a copy of the calling thread's most recent error message, or
// null if the last call succeeded. The caller owns the copy and must
// release it with [`pb_string_free`].
char *pb_last_error_message(void);

// Returns the CSV header matching [`pb_run_report_csv_row`]. Static; do
// not free.
const char *pb_csv_header(void);

// Returns the library version as a static string; do not free.
const char *pb_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
