#ifndef HOLTER_H
#define HOLTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum HolterStatus {
  HOLTER_STATUS_OK = 0,
  HOLTER_STATUS_NULL_POINTER = 1,
  HOLTER_STATUS_INVALID_ARGUMENT = 2,
  HOLTER_STATUS_IO = 3,
  HOLTER_STATUS_FORMAT = 4,
  HOLTER_STATUS_CONFIG = 5,
  HOLTER_STATUS_MODEL = 6,
  HOLTER_STATUS_DATASET = 7,
  HOLTER_STATUS_PANIC = 8,
} HolterStatus;

// Beat positions with wide/narrow labels.
typedef struct HolterAnnotation HolterAnnotation;

// Loaded models plus the configuration they run with.
typedef struct HolterPipeline HolterPipeline;

// A multi-channel ECG record.
typedef struct HolterRecord HolterRecord;

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *holter_last_error(void);

// Library version as a static NUL-terminated string.
const char *holter_version(void);

// Reads a record file written by the `holter` tools.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum HolterStatus holter_record_read(const char *path, struct HolterRecord **out);

// Builds a record from channel-major samples in millivolts:
// `data[c * n_samples + i]` is sample `i` of channel `c`.
//
// # Safety
// `data` must point to `n_channels * n_samples` floats, `record_id` must be
// NUL-terminated (or null for an empty id) and `out` valid.
enum HolterStatus holter_record_new(const char *record_id,
                                    double fs,
                                    size_t n_channels,
                                    size_t n_samples,
                                    const float *data,
                                    struct HolterRecord **out);

// # Safety
// `record` must come from this library or be null.
void holter_record_free(struct HolterRecord *record);

// Sampling rate in Hz, or 0 for a null handle.
//
// # Safety
// `record` must be a valid handle or null.
double holter_record_fs(const struct HolterRecord *record);

// # Safety
// `record` must be a valid handle or null.
size_t holter_record_n_samples(const struct HolterRecord *record);

// # Safety
// `record` must be a valid handle or null.
size_t holter_record_n_channels(const struct HolterRecord *record);

// Loads the segmentation and classifier checkpoints and, optionally, a
// GBDT model file and a JSON configuration (null for defaults).
//
// # Safety
// Non-null string arguments must be NUL-terminated; `out` must be valid.
enum HolterStatus holter_pipeline_load(const char *seg_path,
                                       const char *cls_path,
                                       const char *gbdt_path,
                                       const char *config_path,
                                       struct HolterPipeline **out);

// # Safety
// `pipeline` must come from this library or be null.
void holter_pipeline_free(struct HolterPipeline *pipeline);

// Runs all stages on a raw record; positions refer to the record's rate.
//
// # Safety
// Handles must be valid; `out` must be a valid pointer.
enum HolterStatus holter_pipeline_run(const struct HolterPipeline *pipeline,
                                      const struct HolterRecord *record,
                                      struct HolterAnnotation **out);

// Pan–Tompkins beat positions on the first channel (all labelled narrow).
//
// # Safety
// `record` must be valid; `out` must be a valid pointer.
enum HolterStatus holter_detect_pan_tompkins(const struct HolterRecord *record,
                                             struct HolterAnnotation **out);

// # Safety
// `ann` must come from this library or be null.
void holter_annotation_free(struct HolterAnnotation *ann);

// Number of beats, or 0 for a null handle.
//
// # Safety
// `ann` must be a valid handle or null.
size_t holter_annotation_len(const struct HolterAnnotation *ann);

// Copies beat positions (sample indices) and labels (0 narrow, 1 wide)
// into caller buffers of `capacity` entries; either buffer may be null.
//
// # Safety
// Non-null buffers must hold `capacity` elements.
enum HolterStatus holter_annotation_copy(const struct HolterAnnotation *ann,
                                         uint64_t *positions,
                                         uint8_t *labels,
                                         size_t capacity);

// Writes the annotation CSV, one `sample_index,label` row per beat.
//
// # Safety
// `ann` must be valid and `path` NUL-terminated.
enum HolterStatus holter_annotation_write(const struct HolterAnnotation *ann, const char *path);

#endif  /* HOLTER_H */
