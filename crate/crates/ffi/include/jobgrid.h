#ifndef JOBGRID_H
#define JOBGRID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every call.
typedef enum JgStatus {
  JG_STATUS_OK = 0,
  // Nothing to return: the queue has no visible message.
  JG_STATUS_EMPTY = 1,
  // No candidate satisfies the policy.
  JG_STATUS_NO_TARGET = 2,
  JG_STATUS_NULL_ARGUMENT = -1,
  JG_STATUS_INVALID_ARGUMENT = -2,
  JG_STATUS_UNKNOWN_QUEUE = -3,
  JG_STATUS_UNKNOWN_TAG = -4,
  JG_STATUS_EXPIRED_TAG = -5,
  JG_STATUS_IO = -6,
  JG_STATUS_INVALID_RUN = -7,
  JG_STATUS_INTERNAL = -99,
} JgStatus;

typedef enum JgPolicyKind {
  JG_POLICY_KIND_LEAST_LOAD = 0,
  JG_POLICY_KIND_LEAST_COST = 1,
  JG_POLICY_KIND_MIXED = 2,
  JG_POLICY_KIND_AFFINITY = 3,
} JgPolicyKind;

typedef enum JgExperiment {
  // Every job counts a fixed number of primes.
  JG_EXPERIMENT_FIXED_WORK = 0,
  // Every job searches for primes for a fixed time.
  JG_EXPERIMENT_FIXED_TIME = 1,
} JgExperiment;

// A broker on its own virtual clock.
typedef struct JgBroker JgBroker;

// A leased message. Release `message_json` with [`jg_string_free`].
typedef struct JgDelivery {
  uint64_t tag;
  uint32_t attempt;
  char *message_json;
} JgDelivery;

// A scheduling policy. `alpha` is read for `Mixed` only, `affinity` for
// `Affinity` only.
typedef struct JgPolicy {
  enum JgPolicyKind kind;
  double alpha;
  uint32_t affinity;
} JgPolicy;

// One live candidate for [`jg_select_target`].
typedef struct JgProcessorSnapshot {
  uint32_t id;
  uint32_t capacity_total;
  uint32_t current_load;
  double cost_factor;
} JgProcessorSnapshot;

typedef struct JgExperimentParams {
  uint32_t processors;
  // Concurrent jobs per priority pool.
  uint32_t capacity;
  uint32_t jobs_low;
  uint32_t jobs_high;
  // Primes per job for `FixedWork`, milliseconds per job for `FixedTime`.
  uint64_t workload_amount;
  uint64_t seed;
  uint64_t arrival_spacing_ms;
} JgExperimentParams;

typedef struct JgExperimentSummary {
  uint32_t dispatched;
  uint32_t completed;
  double mean_total_ms_high;
  double mean_total_ms_low;
  double mean_wait_ms_high;
  double mean_wait_ms_low;
  double mean_primes_high;
  double mean_primes_low;
  uint64_t makespan_ms;
} JgExperimentSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length in bytes of the calling thread's last error message, without the
// terminating NUL; 0 when there is none.
size_t jg_last_error_length(void);

// Copies the last error message into `buf` (NUL-terminated, truncated to
// fit) and returns the full message length.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t jg_last_error_message(char *buf, size_t len);

// Library version, a static string.
const char *jg_version(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must be null or a string handed out by this library, not yet freed.
void jg_string_free(char *s);

// Opens a broker whose clock starts at 0 ms. With a non-null
// `storage_dir`, queue logs live there and existing logs are replayed;
// with null, everything stays in memory.
//
// # Safety
// `storage_dir` must be null or NUL-terminated; `out` must be writable.
enum JgStatus jg_broker_open(const char *storage_dir, struct JgBroker **out);

// Closes a broker. Durable queues keep their logs. Null is ignored.
//
// # Safety
// `b` must be null or a handle from [`jg_broker_open`], not yet freed.
void jg_broker_free(struct JgBroker *b);

// Moves the broker's clock forward, letting leases expire.
//
// # Safety
// `b` must be a live handle.
enum JgStatus jg_broker_advance_ms(struct JgBroker *b, uint64_t ms);

// Creates a queue; a durable one needs a broker opened with a directory.
// Creating an existing queue is not an error.
//
// # Safety
// `b` must be a live handle and `queue` NUL-terminated.
enum JgStatus jg_broker_create_queue(struct JgBroker *b, const char *queue, bool durable);

// Appends a message. `payload_json` is a typed payload such as
// `{"kind":"HEARTBEAT","payload":{"processor":"P1","current_load":0,"timestamp":5}}`.
// The new message id is written to `out_msg_id` when that is non-null;
// release it with [`jg_string_free`].
//
// # Safety
// `b` must be a live handle, `queue` and `payload_json` NUL-terminated and
// `out_msg_id` null or writable.
enum JgStatus jg_broker_enqueue(struct JgBroker *b,
                                const char *queue,
                                const char *payload_json,
                                char **out_msg_id);

// Leases the oldest visible message for `visibility_timeout_ms`. Returns
// [`JgStatus::Empty`] when there is none, leaving `out` zeroed.
//
// # Safety
// `b` must be a live handle, `queue` NUL-terminated and `out` writable.
enum JgStatus jg_broker_dequeue(struct JgBroker *b,
                                const char *queue,
                                uint64_t visibility_timeout_ms,
                                struct JgDelivery *out);

// Removes a leased message for good.
//
// # Safety
// `b` must be a live handle and `queue` NUL-terminated.
enum JgStatus jg_broker_ack(struct JgBroker *b, const char *queue, uint64_t tag);

// Number of unacked messages, leased or not.
//
// # Safety
// `b` must be a live handle, `queue` NUL-terminated and `out_len` writable.
enum JgStatus jg_broker_len(struct JgBroker *b, const char *queue, uint64_t *out_len);

// Picks a target among `count` live candidates. Writes the chosen id to
// `out_id` and returns [`JgStatus::Ok`], or returns [`JgStatus::NoTarget`].
//
// # Safety
// `policy` and `out_id` must be valid; `candidates` must point to `count`
// snapshots (it may be null when `count` is 0).
enum JgStatus jg_select_target(const struct JgPolicy *policy_spec,
                               const struct JgProcessorSnapshot *candidates,
                               size_t count,
                               uint32_t *out_id);

// Fills `out` with the reference parameters for `kind`.
//
// # Safety
// `out` must be writable.
enum JgStatus jg_experiment_defaults(enum JgExperiment kind, struct JgExperimentParams *out);

// Fills `out` with the reference parameters for [`jg_run_comparison`]:
// four nodes and one arrival every 50 ms.
//
// # Safety
// `out` must be writable.
enum JgStatus jg_comparison_defaults(struct JgExperimentParams *out);

// Runs one experiment on a virtual clock. With a non-null `out_dir`,
// `jobs.csv` and `summary.csv` are written there. Returns
// [`JgStatus::InvalidRun`] (with `out` still filled) when a job did not
// complete.
//
// # Safety
// `params` and `out` must be valid; `out_dir` null or NUL-terminated.
enum JgStatus jg_run_experiment(enum JgExperiment kind,
                                const struct JgExperimentParams *params,
                                const char *out_dir,
                                struct JgExperimentSummary *out);

// Runs the same fixed-work stream through the scheduler and through
// sender-initiated routing, and writes the relative reduction in mean
// total time to `out_improvement`.
//
// # Safety
// `params` and `out_improvement` must be valid.
enum JgStatus jg_run_comparison(const struct JgExperimentParams *params,
                                uint64_t per_query_latency_ms,
                                double *out_improvement);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JOBGRID_H */
