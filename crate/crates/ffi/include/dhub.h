/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DHUB_H
#define DHUB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DhStatus {
  DH_OK = 0,
  DH_ERR_NULL = 1,
  DH_ERR_INVALID_ARG = 2,
  DH_ERR_BUFFER_TOO_SMALL = 3,
  // More input is needed; `*out_len` holds the total length required.
  DH_ERR_TRUNCATED = 4,
  DH_ERR_DECODE = 5,
  DH_ERR_CODEC = 6,
  DH_ERR_IO = 7,
  DH_ERR_NOT_FOUND = 8,
  DH_ERR_PARTIAL = 9,
  DH_ERR_CORRUPT = 10,
  DH_ERR_INVALID_CONFIG = 11,
  DH_ERR_NO_SYNC = 12,
  DH_ERR_PANIC = 99,
} DhStatus;

// Opaque clock-offset estimator.
typedef struct DhClockEstimator DhClockEstimator;

// Opaque handle to a finalized recording.
typedef struct DhRecording DhRecording;

// Fixed header fields of a FRAME message or a recorded frame.
typedef struct DhFrameHeader {
  uint32_t stream_id;
  uint64_t seq;
  uint64_t capture_ts_ns;
  uint64_t session_ts_ns;
  uint16_t flags;
  uint8_t codec_id;
} DhFrameHeader;

typedef struct DhOffsetEstimate {
  int64_t offset_ns;
  uint64_t rtt_ns;
  uint32_t sample_count;
  uint64_t dispersion_ns;
} DhOffsetEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *dh_version(void);

// Description of the last failure on this thread; empty after a success.
// Valid until the next library call on the same thread.
const char *dh_last_error_message(void);

void dh_string_free(char *s);

// Payload size in bytes of an uncompressed frame for a stream descriptor
// given as JSON.
enum DhStatus dh_payload_size(const char *descriptor_json, size_t *out_size);

// Validates a session configuration. On `DH_ERR_INVALID_CONFIG`,
// `*violations_json` (if non-null) receives a JSON array of violations.
enum DhStatus dh_validate_session_config(const char *config_json, char **violations_json);

// Encodes with a built-in codec (RAW = 0, DRLE = 1).
enum DhStatus dh_codec_encode(uint8_t codec_id,
                              const uint8_t *input,
                              size_t input_len,
                              uint8_t *out,
                              size_t out_cap,
                              size_t *out_len);

// Decodes with a built-in codec; `expected_len` is the raw payload size.
enum DhStatus dh_codec_decode(uint8_t codec_id,
                              const uint8_t *input,
                              size_t input_len,
                              size_t expected_len,
                              uint8_t *out,
                              size_t out_cap,
                              size_t *out_len);

uint32_t dh_crc32c(const uint8_t *data, size_t len);

// Checks the message at the start of `buf`. On success `*msg_type` is the
// type byte and `*out_len` the full message length; on
// `DH_ERR_TRUNCATED`, `*out_len` is the length needed so far.
enum DhStatus dh_wire_peek(const uint8_t *buf, size_t len, uint8_t *msg_type, size_t *out_len);

// Encodes a FRAME message.
enum DhStatus dh_wire_encode_frame(const struct DhFrameHeader *header,
                                   const uint8_t *payload,
                                   size_t payload_len,
                                   uint8_t *out,
                                   size_t out_cap,
                                   size_t *out_len);

// Encodes a PING carrying `nonce`.
enum DhStatus dh_wire_encode_ping(uint64_t nonce, uint8_t *out, size_t out_cap, size_t *out_len);

// Decodes a FRAME message at the start of `buf`. `*payload` points into
// `buf`; `*consumed` is the message length.
enum DhStatus dh_wire_decode_frame(const uint8_t *buf,
                                   size_t len,
                                   struct DhFrameHeader *header,
                                   const uint8_t **payload,
                                   size_t *payload_len,
                                   size_t *consumed);

// Offset and round-trip time of one exchange.
enum DhStatus dh_clock_sample_offset(uint64_t t1,
                                     uint64_t t2,
                                     uint64_t t3,
                                     uint64_t t4,
                                     int64_t *offset_ns,
                                     uint64_t *rtt_ns);

// Creates an estimator over the last `window` samples (0 selects the default).
struct DhClockEstimator *dh_clock_estimator_new(size_t window);

void dh_clock_estimator_free(struct DhClockEstimator *est);

// Adds a sample. `*out` receives the current estimate when one exists.
enum DhStatus dh_clock_estimator_push(struct DhClockEstimator *est,
                                      uint64_t t1,
                                      uint64_t t2,
                                      uint64_t t3,
                                      uint64_t t4,
                                      struct DhOffsetEstimate *out);

enum DhStatus dh_recording_open(const char *path, struct DhRecording **out);

void dh_recording_free(struct DhRecording *rec);

// The manifest as JSON; release with `dh_string_free`.
enum DhStatus dh_recording_manifest_json(const struct DhRecording *rec, char **out);

enum DhStatus dh_recording_frame_count(const struct DhRecording *rec,
                                       uint32_t stream_id,
                                       uint64_t *out);

// Reads and decodes the `index`-th frame (in session-time order) of a
// stream into `out`.
enum DhStatus dh_recording_read_frame(const struct DhRecording *rec,
                                      uint32_t stream_id,
                                      uint64_t index,
                                      struct DhFrameHeader *header,
                                      uint8_t *out,
                                      size_t out_cap,
                                      size_t *out_len);

// Verifies a recording directory. `*report_json` receives the report;
// `*clean` is 1 when there are no findings.
enum DhStatus dh_recording_verify(const char *path, char **report_json, int32_t *clean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DHUB_H */
