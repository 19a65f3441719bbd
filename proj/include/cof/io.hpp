#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cof/ecg.hpp"
#include "cof/flowmatch.hpp"
#include "cof/toppr.hpp"
#include "cof/volgrid.hpp"
#include "json.hpp"

namespace cof {

using Json = nlohmann::json;

inline constexpr const char* kCvolSchema = "cvol/1";
inline constexpr const char* kCheckpointSchema = "cof-checkpoint/1";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

/// Strips a trailing ".cvol.json", ".cvol.raw" or ".cvol" so any of the three spellings name the pair.
std::string cvol_stem(const std::string& path);

struct CvolHeader {
  Index3 dims{1, 1, 1};
  Vec3 spacing_mm{1.0, 1.0, 1.0};
  std::string dtype;  // "f32" or "u8"
  std::size_t frames = 1;
  std::vector<double> frame_times;  // empty for single volumes
  Json meta;                        // free-form provenance, may be null
};

CvolHeader read_cvol_header(const std::string& path);

// Intensities are stored as f32; values that are not float-representable are rounded.
void write_volume(const std::string& path, const Volume3D& vol, const Json& meta = {});
void write_volume(const std::string& path, const Volume4D& vol, const Json& meta = {});
void write_labels(const std::string& path, const LabelVolume& labels, const Json& meta = {});
void write_label_sequence(const std::string& path, const std::vector<LabelVolume>& seq,
                          const std::vector<double>& frame_times, const Json& meta = {});

Volume3D read_volume(const std::string& path);
Volume4D read_volume4d(const std::string& path);
LabelVolume read_labels(const std::string& path);
std::vector<LabelVolume> read_label_sequence(const std::string& path, std::vector<double>* frame_times = nullptr);

/// CSV with header time_s,I,II,III,aVR,aVL,aVF,V1..V6 (seconds, millivolts).
void write_ecg(const std::string& path, const EcgRecord& rec);
EcgRecord read_ecg(const std::string& path, double sample_rate_hz = kDefaultSampleRateHz);

/// JSON metadata at `path` plus a little-endian float64 blob at `path`.bin.
void write_checkpoint(const std::string& path, const VelocityNet& net, const Json& meta = {});
void write_checkpoint(const std::string& path, const VelocityGrid& grid, const Json& meta = {});
void write_checkpoint(const std::string& path, const DeformationSet& defs, const Json& meta = {});
std::string checkpoint_kind(const std::string& path);
VelocityNet read_velocity_net(const std::string& path, Json* meta = nullptr);
VelocityGrid read_velocity_grid(const std::string& path, Json* meta = nullptr);
DeformationSet read_deformation_set(const std::string& path, Json* meta = nullptr);

Json velocity_net_config_to_json(const VelocityNetConfig& cfg);
VelocityNetConfig velocity_net_config_from_json(const Json& j);

struct ManifestRow {
  std::string subject_id;
  std::string volume_path;
  std::string labels_path;
  std::string ecg_path;
  std::string category;
  std::optional<Vec3> spacing_mm;
  std::string defs_path;        // optional columns, empty when absent
  std::string gen_volume_path;
  std::string gen_labels_path;
};

/// Relative paths resolve against the manifest's directory. Every problem
/// (missing columns, duplicate ids, dangling paths) is collected into one error.
std::vector<ManifestRow> read_manifest(const std::string& path, bool check_paths = true);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);

/// Minimal RFC 4180 reader: quoted fields, doubled quotes, CRLF tolerated.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);
std::string csv_escape(const std::string& field);

}  // namespace cof
