#ifndef COF_COF_H
#define COF_COF_H

/* C interface to the cardiac digital-twin engine.
 *
 * Every function returns a cof_status. On failure the thread-local message
 * from cof_last_error() describes what went wrong. Strings returned through
 * char** out-parameters are owned by the caller and released with
 * cof_string_free(). Handles are released with their matching *_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define COF_API __declspec(dllexport)
#elif defined(__GNUC__)
#define COF_API __attribute__((visibility("default")))
#else
#define COF_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cof_status {
  COF_OK = 0,
  COF_ERR_INVALID_ARGUMENT = 1,
  COF_ERR_SHAPE = 2,
  COF_ERR_DOMAIN = 3,
  COF_ERR_FORMAT = 4,
  COF_ERR_IO = 5,
  COF_ERR_DIVERGENCE = 6,
  COF_ERR_INSUFFICIENT_SIGNAL = 7,
  COF_ERR_INSUFFICIENT_FRAMES = 8,
  COF_ERR_INSUFFICIENT_DATA = 9,
  COF_ERR_DEGENERATE_INPUT = 10,
  COF_ERR_DEGENERATE_ANATOMY = 11,
  COF_ERR_INTEGRATION_BLOWUP = 12,
  COF_ERR_UNDEFINED_DISTANCE = 13,
  COF_ERR_MANIFEST = 14,
  COF_ERR_INTERNAL = 99
} cof_status;

COF_API const char* cof_version(void);
COF_API const char* cof_status_name(cof_status status);
/* Message of the last failure on this thread; empty after a success. */
COF_API const char* cof_last_error(void);
COF_API void cof_string_free(char* s);

typedef void (*cof_log_fn)(const char* message, void* user);

/* Runs one pipeline command ("phantom", "ecg-prep", "register", "train-flow",
 * "infer", "evaluate", "analyze") from a JSON request. On success
 * *response_json receives the JSON response. log may be NULL. */
COF_API cof_status cof_run_command(const char* name, const char* request_json, cof_log_fn log, void* user,
                                   char** response_json);

/* ---- volumes (a single-frame file reads as one frame) */
typedef struct cof_volume cof_volume;
COF_API cof_status cof_volume_read(const char* path, cof_volume** out);
COF_API cof_status cof_volume_info(const cof_volume* v, int dims[3], double spacing_mm[3], size_t* frames);
COF_API cof_status cof_volume_frame_time(const cof_volume* v, size_t frame, double* t);
/* Borrowed pointer into the handle, x-fastest, valid until the handle is freed. */
COF_API cof_status cof_volume_frame_data(const cof_volume* v, size_t frame, const double** data, size_t* count);
COF_API cof_status cof_volume_write(const cof_volume* v, const char* path);
COF_API void cof_volume_free(cof_volume* v);

/* ---- label sequences */
typedef struct cof_labels cof_labels;
COF_API cof_status cof_labels_read(const char* path, cof_labels** out);
COF_API cof_status cof_labels_info(const cof_labels* l, int dims[3], double spacing_mm[3], size_t* frames);
COF_API cof_status cof_labels_frame_data(const cof_labels* l, size_t frame, const uint8_t** data, size_t* count);
/* Physical volume of class cls in one frame, millilitres. */
COF_API cof_status cof_labels_class_volume_ml(const cof_labels* l, size_t frame, int cls, double* ml);
COF_API cof_status cof_labels_write(const cof_labels* l, const char* path);
COF_API void cof_labels_free(cof_labels* l);

/* ---- ECG recordings */
typedef struct cof_ecg cof_ecg;
COF_API cof_status cof_ecg_read(const char* path, double sample_rate_hz, cof_ecg** out);
COF_API cof_status cof_ecg_info(const cof_ecg* e, size_t* samples, double* sample_rate_hz);
/* lead in 0..11 in the standard order I, II, III, aVR, aVL, aVF, V1..V6. */
COF_API cof_status cof_ecg_lead(const cof_ecg* e, int lead, const double** data, size_t* count);
/* R peaks, selected cycle and embedding as JSON; config_json may be NULL. */
COF_API cof_status cof_ecg_summary(const cof_ecg* e, const char* config_json, char** summary_json);
COF_API void cof_ecg_free(cof_ecg* e);

/* ---- deformation sets (registration output) */
typedef struct cof_deformation cof_deformation;
COF_API cof_status cof_deformation_read(const char* path, cof_deformation** out);
COF_API cof_status cof_deformation_info(const cof_deformation* d, int dims[3], size_t* frames);
/* Displacement of frame k as interleaved xyz per voxel, voxel units. */
COF_API cof_status cof_deformation_field(const cof_deformation* d, size_t frame, const double** xyz, size_t* voxels);
/* Fraction of interior voxels with positive Jacobian determinant. */
COF_API cof_status cof_deformation_topology(const cof_deformation* d, size_t frame, double* positive_fraction);
COF_API void cof_deformation_free(cof_deformation* d);

/* ---- trained flow models */
typedef struct cof_flow cof_flow;
COF_API cof_status cof_flow_read(const char* path, cof_flow** out);
COF_API cof_status cof_flow_write(const cof_flow* f, const char* path);
/* Network configuration and velocity scale as JSON. */
COF_API cof_status cof_flow_info(const cof_flow* f, char** info_json);
/* Velocities at n voxel positions (interleaved xyz) for one time and condition. */
COF_API cof_status cof_flow_velocity(const cof_flow* f, const double* c_ecg, size_t ecg_len, const double* c_rea,
                                     size_t rea_len, double t, const double* positions, size_t n, double* velocities);
COF_API void cof_flow_free(cof_flow* f);

#ifdef __cplusplus
}
#endif

#endif
