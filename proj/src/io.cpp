#include "cof/io.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cof/error.hpp"

namespace cof {

namespace fs = std::filesystem;

namespace {

template <typename T>
void append_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(bytes, sizeof(T));
}

template <typename T>
T load_le(const char* p) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

Json parse_json(const std::string& text, const std::string& path) {
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    fail(ErrorCode::format, path + ": invalid JSON (" + e.what() + ")");
  }
}

template <typename T>
T field(const Json& j, const char* name, const std::string& path) {
  require(j.is_object() && j.contains(name), ErrorCode::format, path + ": missing field '" + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const Json::exception&) {
    fail(ErrorCode::format, path + ": field '" + name + "' has the wrong type");
  }
}

Json grid_json(const Grid& g) {
  return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}}, {"spacing_mm", {g.spacing_mm[0], g.spacing_mm[1], g.spacing_mm[2]}}};
}

Grid grid_from_json(const Json& j, const std::string& path) {
  const auto dims = field<std::vector<int>>(j, "dims", path);
  const auto sp = field<std::vector<double>>(j, "spacing_mm", path);
  require(dims.size() == 3, ErrorCode::format, path + ": field 'dims' must have 3 entries");
  require(sp.size() == 3, ErrorCode::format, path + ": field 'spacing_mm' must have 3 entries");
  Grid g{{dims[0], dims[1], dims[2]}, {sp[0], sp[1], sp[2]}};
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, ErrorCode::format, path + ": field 'dims' must be positive");
    require(std::isfinite(sp[a]) && sp[a] > 0.0, ErrorCode::format, path + ": field 'spacing_mm' must be finite and positive");
  }
  return g;
}

std::string raw_path(const std::string& stem) { return stem + ".cvol.raw"; }
std::string json_path(const std::string& stem) { return stem + ".cvol.json"; }

void write_cvol(const std::string& path, const Grid& g, const char* dtype, std::size_t frames,
                const std::vector<double>& frame_times, const std::string& blob, const Json& meta) {
  const std::string stem = cvol_stem(path);
  if (const fs::path parent = fs::path(stem).parent_path(); !parent.empty()) fs::create_directories(parent);
  Json h = grid_json(g);
  h["schema"] = kCvolSchema;
  h["dtype"] = dtype;
  h["frames"] = frames;
  h["frame_times"] = frame_times;
  h["order"] = "x-fastest";
  h["byte_order"] = "little";
  if (!meta.is_null()) h["meta"] = meta;
  write_file_atomic(raw_path(stem), blob);
  write_file_atomic(json_path(stem), h.dump(2) + "\n");
}

struct CvolData {
  CvolHeader header;
  std::string blob;
};

CvolData read_cvol(const std::string& path, const char* expect_dtype) {
  CvolData d;
  d.header = read_cvol_header(path);
  const std::string stem = cvol_stem(path);
  require(d.header.dtype == expect_dtype, ErrorCode::format,
          json_path(stem) + ": field 'dtype' is '" + d.header.dtype + "', expected '" + expect_dtype + "'");
  d.blob = read_file(raw_path(stem));
  const std::size_t elem = d.header.dtype == "f32" ? 4 : 1;
  const std::size_t expected = elem * static_cast<std::size_t>(d.header.dims[0]) * d.header.dims[1] *
                               d.header.dims[2] * d.header.frames;
  require(d.blob.size() == expected, ErrorCode::format,
          raw_path(stem) + ": expected " + std::to_string(expected) + " bytes, found " + std::to_string(d.blob.size()));
  return d;
}

std::vector<Volume3D> decode_f32(const CvolData& d, const std::string& path) {
  const Grid g{d.header.dims, d.header.spacing_mm};
  const std::size_t n = g.voxel_count();
  std::vector<Volume3D> frames;
  for (std::size_t k = 0; k < d.header.frames; ++k) {
    Volume3D v = Volume3D::filled(g, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const float f = load_le<float>(d.blob.data() + 4 * (k * n + i));
      require(std::isfinite(f), ErrorCode::format,
              path + ": field 'data' has a non-finite value at frame " + std::to_string(k) + ", voxel " + std::to_string(i));
      v.data[i] = f;
    }
    frames.push_back(std::move(v));
  }
  return frames;
}

std::vector<LabelVolume> decode_u8(const CvolData& d, const std::string& path) {
  const Grid g{d.header.dims, d.header.spacing_mm};
  const std::size_t n = g.voxel_count();
  std::vector<LabelVolume> frames;
  for (std::size_t k = 0; k < d.header.frames; ++k) {
    LabelVolume l = LabelVolume::empty(g);
    std::memcpy(l.labels.data(), d.blob.data() + k * n, n);
    for (std::size_t i = 0; i < n; ++i)
      require(l.labels[i] < kClassCount, ErrorCode::format,
              path + ": field 'data' has unknown label " + std::to_string(l.labels[i]) + " at voxel " + std::to_string(i));
    frames.push_back(std::move(l));
  }
  return frames;
}

void check_4d_times(const std::vector<double>& t, const std::string& path) {
  require(t.size() >= 2, ErrorCode::format, path + ": field 'frames' must be >= 2 for a sequence");
  require(t[0] == 0.0, ErrorCode::format, path + ": field 'frame_times' must start at 0");
  for (std::size_t k = 1; k < t.size(); ++k)
    require(t[k] > t[k - 1] && t[k] < 1.0, ErrorCode::format,
            path + ": field 'frame_times' must increase strictly within [0, 1)");
}

std::string encode_f32(const std::vector<const Volume3D*>& frames) {
  std::string blob;
  blob.reserve(frames.size() * frames[0]->data.size() * 4);
  for (const Volume3D* v : frames)
    for (double x : v->data) {
      require(std::isfinite(x), ErrorCode::domain, "cannot write non-finite intensities");
      append_le(blob, static_cast<float>(x));
    }
  return blob;
}

// Checkpoint plumbing.
std::string blob_path(const std::string& path) { return path + ".bin"; }

void write_ckpt(const std::string& path, const char* kind, Json header, const std::vector<double>& blob_values,
                const Json& meta) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::string blob;
  blob.reserve(blob_values.size() * 8);
  for (double v : blob_values) append_le(blob, v);
  header["schema"] = kCheckpointSchema;
  header["kind"] = kind;
  header["blob"] = fs::path(blob_path(path)).filename().string();
  header["blob_bytes"] = blob.size();
  header["byte_order"] = "little";
  header["dtype"] = "f64";
  if (!meta.is_null()) header["meta"] = meta;
  write_file_atomic(blob_path(path), blob);
  write_file_atomic(path, header.dump(2) + "\n");
}

struct Ckpt {
  Json header;
  std::vector<double> values;
};

Ckpt read_ckpt(const std::string& path, const char* kind) {
  Ckpt c;
  c.header = parse_json(read_file(path), path);
  require(c.header.is_object(), ErrorCode::format, path + ": checkpoint header must be a JSON object");
  const auto schema = field<std::string>(c.header, "schema", path);
  require(schema == kCheckpointSchema, ErrorCode::format, path + ": unknown schema '" + schema + "'");
  const auto k = field<std::string>(c.header, "kind", path);
  require(k == kind, ErrorCode::format, path + ": field 'kind' is '" + k + "', expected '" + kind + "'");
  const std::string blob = read_file(blob_path(path));
  const auto declared = field<std::size_t>(c.header, "blob_bytes", path);
  require(blob.size() == declared && blob.size() % 8 == 0, ErrorCode::format,
          blob_path(path) + ": expected " + std::to_string(declared) + " bytes, found " + std::to_string(blob.size()));
  c.values.resize(blob.size() / 8);
  for (std::size_t i = 0; i < c.values.size(); ++i) c.values[i] = load_le<double>(blob.data() + 8 * i);
  return c;
}

void expect_count(const Ckpt& c, std::size_t n, const std::string& path) {
  require(c.values.size() == n, ErrorCode::format,
          blob_path(path) + ": shape mismatch, metadata implies " + std::to_string(n) + " values, blob holds " +
              std::to_string(c.values.size()));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

double parse_double(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  require(!t.empty() && end == t.c_str() + t.size(), ErrorCode::format, what + ": '" + s + "' is not a number");
  return v;
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io, "cannot open '" + tmp + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(out.good(), ErrorCode::io, "failed writing '" + tmp + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorCode::io, "cannot move '" + tmp + "' to '" + path + "'");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string cvol_stem(const std::string& path) {
  for (const char* suffix : {".cvol.json", ".cvol.raw", ".cvol"}) {
    const std::string s = suffix;
    if (path.size() > s.size() && path.compare(path.size() - s.size(), s.size(), s) == 0)
      return path.substr(0, path.size() - s.size());
  }
  return path;
}

CvolHeader read_cvol_header(const std::string& path) {
  const std::string jp = json_path(cvol_stem(path));
  const Json j = parse_json(read_file(jp), jp);
  require(j.is_object(), ErrorCode::format, jp + ": header must be a JSON object");
  const auto schema = field<std::string>(j, "schema", jp);
  require(schema == kCvolSchema, ErrorCode::format, jp + ": unknown schema '" + schema + "'");
  CvolHeader h;
  const Grid g = grid_from_json(j, jp);
  h.dims = g.dims;
  h.spacing_mm = g.spacing_mm;
  h.dtype = field<std::string>(j, "dtype", jp);
  require(h.dtype == "f32" || h.dtype == "u8", ErrorCode::format, jp + ": field 'dtype' must be f32 or u8");
  h.frames = field<std::size_t>(j, "frames", jp);
  require(h.frames >= 1, ErrorCode::format, jp + ": field 'frames' must be >= 1");
  if (j.contains("frame_times")) h.frame_times = field<std::vector<double>>(j, "frame_times", jp);
  for (double t : h.frame_times) require(std::isfinite(t), ErrorCode::format, jp + ": field 'frame_times' is non-finite");
  require(h.frame_times.empty() ? h.frames == 1 : h.frame_times.size() == h.frames, ErrorCode::format,
          jp + ": field 'frame_times' must have one entry per frame");
  if (j.contains("order"))
    require(field<std::string>(j, "order", jp) == "x-fastest", ErrorCode::format, jp + ": field 'order' must be x-fastest");
  if (j.contains("byte_order"))
    require(field<std::string>(j, "byte_order", jp) == "little", ErrorCode::format,
            jp + ": field 'byte_order' must be little");
  if (j.contains("meta")) h.meta = j["meta"];
  return h;
}

void write_volume(const std::string& path, const Volume3D& vol, const Json& meta) {
  vol.validate();
  write_cvol(path, vol.grid, "f32", 1, {}, encode_f32({&vol}), meta);
}

void write_volume(const std::string& path, const Volume4D& vol, const Json& meta) {
  vol.validate();
  std::vector<const Volume3D*> frames;
  for (const auto& f : vol.frames) frames.push_back(&f);
  write_cvol(path, vol.grid(), "f32", vol.frame_count(), vol.frame_times, encode_f32(frames), meta);
}

void write_labels(const std::string& path, const LabelVolume& labels, const Json& meta) {
  labels.validate();
  write_cvol(path, labels.grid, "u8", 1, {}, std::string(labels.labels.begin(), labels.labels.end()), meta);
}

void write_label_sequence(const std::string& path, const std::vector<LabelVolume>& seq,
                          const std::vector<double>& frame_times, const Json& meta) {
  require(!seq.empty() && seq.size() == frame_times.size(), ErrorCode::shape,
          "label sequence needs one frame time per frame");
  std::string blob;
  for (const auto& l : seq) {
    l.validate();
    require_same_grid(seq[0].grid, l.grid, "write_label_sequence");
    blob.append(l.labels.begin(), l.labels.end());
  }
  write_cvol(path, seq[0].grid, "u8", seq.size(), frame_times, blob, meta);
}

Volume3D read_volume(const std::string& path) {
  const CvolData d = read_cvol(path, "f32");
  require(d.header.frames == 1, ErrorCode::format,
          json_path(cvol_stem(path)) + ": field 'frames' is " + std::to_string(d.header.frames) + ", expected 1");
  return std::move(decode_f32(d, raw_path(cvol_stem(path)))[0]);
}

Volume4D read_volume4d(const std::string& path) {
  const CvolData d = read_cvol(path, "f32");
  check_4d_times(d.header.frame_times, json_path(cvol_stem(path)));
  Volume4D v;
  v.frames = decode_f32(d, raw_path(cvol_stem(path)));
  v.frame_times = d.header.frame_times;
  return v;
}

LabelVolume read_labels(const std::string& path) {
  const CvolData d = read_cvol(path, "u8");
  require(d.header.frames == 1, ErrorCode::format,
          json_path(cvol_stem(path)) + ": field 'frames' is " + std::to_string(d.header.frames) + ", expected 1");
  return std::move(decode_u8(d, raw_path(cvol_stem(path)))[0]);
}

std::vector<LabelVolume> read_label_sequence(const std::string& path, std::vector<double>* frame_times) {
  const CvolData d = read_cvol(path, "u8");
  check_4d_times(d.header.frame_times, json_path(cvol_stem(path)));
  if (frame_times) *frame_times = d.header.frame_times;
  return decode_u8(d, raw_path(cvol_stem(path)));
}

void write_ecg(const std::string& path, const EcgRecord& rec) {
  rec.validate();
  std::string out = "time_s";
  for (const char* name : lead_names()) out += std::string(",") + name;
  out += "\n";
  char buf[64];
  for (std::size_t i = 0; i < rec.sample_count(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(i) / rec.sample_rate_hz);
    out += buf;
    for (int l = 0; l < kLeadCount; ++l) {
      std::snprintf(buf, sizeof buf, ",%.17g", rec.leads[l][i]);
      out += buf;
    }
    out += "\n";
  }
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_file_atomic(path, out);
}

EcgRecord read_ecg(const std::string& path, double sample_rate_hz) {
  require(sample_rate_hz > 0.0, ErrorCode::invalid_argument, "sample rate must be positive");
  const auto rows = parse_csv(read_file(path));
  require(!rows.empty(), ErrorCode::format, path + ": empty ECG file");
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < rows[0].size(); ++c) col[trim(rows[0][c])] = c;
  require(col.count("time_s"), ErrorCode::format, path + ": missing column 'time_s'");
  std::array<std::size_t, kLeadCount> lead_col{};
  for (int l = 0; l < kLeadCount; ++l) {
    const auto it = col.find(lead_names()[l]);
    require(it != col.end(), ErrorCode::format, path + ": missing lead column '" + lead_names()[l] + "'");
    lead_col[l] = it->second;
  }
  EcgRecord rec;
  rec.sample_rate_hz = sample_rate_hz;
  double t0 = 0.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() == 1 && trim(rows[r][0]).empty()) continue;
    const std::string where = path + ": row " + std::to_string(r + 1);
    require(rows[r].size() == rows[0].size(), ErrorCode::format, where + " has " + std::to_string(rows[r].size()) +
                                                                     " fields, expected " + std::to_string(rows[0].size()));
    const double t = parse_double(rows[r][col["time_s"]], where + " time_s");
    const std::size_t i = rec.leads[0].size();
    if (i == 0) t0 = t;
    require(std::abs(t - (t0 + static_cast<double>(i) / sample_rate_hz)) <= 1e-9, ErrorCode::format,
            where + ": irregular time grid (expected spacing " + std::to_string(1.0 / sample_rate_hz) + " s)");
    for (int l = 0; l < kLeadCount; ++l) rec.leads[l].push_back(parse_double(rows[r][lead_col[l]], where + " " + lead_names()[l]));
  }
  rec.validate();
  return rec;
}

Json velocity_net_config_to_json(const VelocityNetConfig& c) {
  return {{"ecg_features", c.ecg_features},
          {"rea_features", c.rea_features},
          {"time_dim", c.time_dim},
          {"rea_dim", c.rea_dim},
          {"width", c.width},
          {"hidden_layers", c.hidden_layers},
          {"domain_dims", {c.domain_dims[0], c.domain_dims[1], c.domain_dims[2]}},
          {"seed", c.seed},
          {"zero_head", c.zero_head}};
}

VelocityNetConfig velocity_net_config_from_json(const Json& j) {
  VelocityNetConfig c;
  const std::string what = "velocity net config";
  c.ecg_features = field<std::size_t>(j, "ecg_features", what);
  c.rea_features = field<std::size_t>(j, "rea_features", what);
  c.time_dim = field<int>(j, "time_dim", what);
  c.rea_dim = field<int>(j, "rea_dim", what);
  c.width = field<int>(j, "width", what);
  c.hidden_layers = field<int>(j, "hidden_layers", what);
  const auto d = field<std::vector<int>>(j, "domain_dims", what);
  require(d.size() == 3, ErrorCode::format, what + ": field 'domain_dims' must have 3 entries");
  c.domain_dims = {d[0], d[1], d[2]};
  c.seed = field<std::uint64_t>(j, "seed", what);
  c.zero_head = field<bool>(j, "zero_head", what);
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::format, what + ": " + e.what());
  }
  return c;
}

void write_checkpoint(const std::string& path, const VelocityNet& net, const Json& meta) {
  Json h;
  h["config"] = velocity_net_config_to_json(net.config());
  h["parameter_count"] = net.parameter_count();
  h["velocity_scale"] = net.velocity_scale();
  Json blocks = Json::array();
  for (const auto& b : net.blocks()) blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}, {"offset", b.offset}});
  h["blocks"] = blocks;
  h["layout"] = "velocity_scale, then parameters (column-major blocks)";
  std::vector<double> values{net.velocity_scale()};
  values.insert(values.end(), net.parameters().begin(), net.parameters().end());
  write_ckpt(path, "velocity_net", h, values, meta);
}

VelocityNet read_velocity_net(const std::string& path, Json* meta) {
  const Ckpt c = read_ckpt(path, "velocity_net");
  VelocityNet net(velocity_net_config_from_json(field<Json>(c.header, "config", path)));
  require(field<std::size_t>(c.header, "parameter_count", path) == net.parameter_count(), ErrorCode::format,
          path + ": field 'parameter_count' does not match the configured architecture");
  expect_count(c, net.parameter_count() + 1, path);
  net.set_velocity_scale(c.values[0]);
  std::copy(c.values.begin() + 1, c.values.end(), net.parameters().begin());
  if (meta) *meta = c.header.value("meta", Json());
  return net;
}

void write_checkpoint(const std::string& path, const VelocityGrid& grid, const Json& meta) {
  grid.validate();
  Json h;
  h["control_dims"] = {grid.control_dims[0], grid.control_dims[1], grid.control_dims[2]};
  h["stride"] = grid.stride;
  std::vector<double> values;
  for (const auto& v : grid.vectors) values.insert(values.end(), v.begin(), v.end());
  write_ckpt(path, "velocity_grid", h, values, meta);
}

VelocityGrid read_velocity_grid(const std::string& path, Json* meta) {
  const Ckpt c = read_ckpt(path, "velocity_grid");
  const auto d = field<std::vector<int>>(c.header, "control_dims", path);
  require(d.size() == 3 && d[0] > 0 && d[1] > 0 && d[2] > 0, ErrorCode::format, path + ": bad field 'control_dims'");
  VelocityGrid g;
  g.control_dims = {d[0], d[1], d[2]};
  g.stride = field<int>(c.header, "stride", path);
  expect_count(c, 3 * g.control_count(), path);
  g.vectors.resize(g.control_count());
  for (std::size_t i = 0; i < g.vectors.size(); ++i) g.vectors[i] = {c.values[3 * i], c.values[3 * i + 1], c.values[3 * i + 2]};
  if (meta) *meta = c.header.value("meta", Json());
  return g;
}

void write_checkpoint(const std::string& path, const DeformationSet& defs, const Json& meta) {
  defs.validate();
  Json h = grid_json(defs.grid());
  h["frames"] = defs.frame_count();
  h["frame_times"] = defs.frame_times;
  const bool has_v = !defs.velocities.empty();
  h["has_velocities"] = has_v;
  if (has_v) {
    const auto& v0 = defs.velocities[0];
    h["control_dims"] = {v0.control_dims[0], v0.control_dims[1], v0.control_dims[2]};
    h["stride"] = v0.stride;
  }
  h["layout"] = "frame_times, fields (frame, voxel, component), velocities (frame, control point, component)";
  std::vector<double> values(defs.frame_times);
  for (const auto& f : defs.fields)
    for (const auto& v : f.vectors) values.insert(values.end(), v.begin(), v.end());
  for (const auto& g : defs.velocities) {
    require(g.control_dims == defs.velocities[0].control_dims && g.stride == defs.velocities[0].stride, ErrorCode::shape,
            "velocity grids in a deformation set must share one lattice");
    for (const auto& v : g.vectors) values.insert(values.end(), v.begin(), v.end());
  }
  write_ckpt(path, "deformation_set", h, values, meta);
}

DeformationSet read_deformation_set(const std::string& path, Json* meta) {
  const Ckpt c = read_ckpt(path, "deformation_set");
  const Grid g = grid_from_json(c.header, path);
  const auto frames = field<std::size_t>(c.header, "frames", path);
  const bool has_v = field<bool>(c.header, "has_velocities", path);
  VelocityGrid proto;
  if (has_v) {
    const auto d = field<std::vector<int>>(c.header, "control_dims", path);
    require(d.size() == 3 && d[0] > 0 && d[1] > 0 && d[2] > 0, ErrorCode::format, path + ": bad field 'control_dims'");
    proto.control_dims = {d[0], d[1], d[2]};
    proto.stride = field<int>(c.header, "stride", path);
  }
  const std::size_t n = g.voxel_count();
  expect_count(c, frames + frames * 3 * n + (has_v ? frames * 3 * proto.control_count() : 0), path);
  DeformationSet defs;
  std::size_t at = 0;
  defs.frame_times.assign(c.values.begin(), c.values.begin() + static_cast<std::ptrdiff_t>(frames));
  at = frames;
  for (std::size_t k = 0; k < frames; ++k) {
    DisplacementField f = DisplacementField::zeros(g);
    for (auto& v : f.vectors) {
      v = {c.values[at], c.values[at + 1], c.values[at + 2]};
      at += 3;
    }
    defs.fields.push_back(std::move(f));
  }
  if (has_v)
    for (std::size_t k = 0; k < frames; ++k) {
      VelocityGrid vg = proto;
      vg.vectors.resize(vg.control_count());
      for (auto& v : vg.vectors) {
        v = {c.values[at], c.values[at + 1], c.values[at + 2]};
        at += 3;
      }
      defs.velocities.push_back(std::move(vg));
    }
  try {
    defs.validate();
  } catch (const Error& e) {
    fail(ErrorCode::format, path + ": " + e.what());
  }
  if (meta) *meta = c.header.value("meta", Json());
  return defs;
}

std::string checkpoint_kind(const std::string& path) {
  const Json h = parse_json(read_file(path), path);
  return field<std::string>(h, "kind", path);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
      continue;
    }
    any = true;
    if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      row.push_back(std::move(cell));
      cell.clear();
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(cell));
      cell.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      cell += ch;
    }
  }
  require(!quoted, ErrorCode::format, "unterminated quoted CSV field");
  if (any || !cell.empty() || !row.empty()) {
    row.push_back(std::move(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_escape(const std::string& f) {
  if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::vector<ManifestRow> read_manifest(const std::string& path, bool check_paths) {
  const auto rows = parse_csv(read_file(path));
  require(!rows.empty(), ErrorCode::manifest, path + ": empty manifest");
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < rows[0].size(); ++c) col[trim(rows[0][c])] = c;

  std::vector<std::string> problems;
  for (const char* req : {"subject_id", "volume_path", "labels_path", "ecg_path", "category"})
    if (!col.count(req)) problems.push_back(std::string("missing required column '") + req + "'");
  if (!problems.empty()) {
    std::string msg = path + ": ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    fail(ErrorCode::manifest, msg);
  }

  const fs::path base = fs::path(path).parent_path();
  const auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    const fs::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
  };
  const auto get = [&](const std::vector<std::string>& r, const char* name) -> std::string {
    const auto it = col.find(name);
    return it == col.end() || it->second >= r.size() ? std::string() : trim(r[it->second]);
  };
  const auto cvol_exists = [](const std::string& p) { return fs::exists(cvol_stem(p) + ".cvol.json"); };

  std::vector<ManifestRow> out;
  std::map<std::string, int> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() == 1 && trim(rows[r][0]).empty()) continue;
    const std::string where = "row " + std::to_string(r + 1);
    if (rows[r].size() != rows[0].size()) {
      problems.push_back(where + ": expected " + std::to_string(rows[0].size()) + " fields, found " +
                         std::to_string(rows[r].size()));
      continue;
    }
    ManifestRow m;
    m.subject_id = get(rows[r], "subject_id");
    m.volume_path = resolve(get(rows[r], "volume_path"));
    m.labels_path = resolve(get(rows[r], "labels_path"));
    m.ecg_path = resolve(get(rows[r], "ecg_path"));
    m.category = get(rows[r], "category");
    m.defs_path = resolve(get(rows[r], "defs_path"));
    m.gen_volume_path = resolve(get(rows[r], "gen_volume_path"));
    m.gen_labels_path = resolve(get(rows[r], "gen_labels_path"));
    if (m.subject_id.empty()) problems.push_back(where + ": empty subject_id");
    if (++seen[m.subject_id] == 2) problems.push_back("duplicate subject_id '" + m.subject_id + "'");
    if (const std::string sp = get(rows[r], "spacing_mm"); !sp.empty()) {
      std::vector<double> vals;
      std::string tok;
      std::istringstream ss(sp);
      try {
        while (ss >> tok)
          for (std::size_t p = 0, q; p <= tok.size(); p = q + 1) {
            q = tok.find(';', p);
            if (q == std::string::npos) q = tok.size();
            if (q > p) vals.push_back(parse_double(tok.substr(p, q - p), "spacing_mm"));
          }
      } catch (const Error&) {
        vals.clear();
      }
      if (vals.size() == 1) vals = {vals[0], vals[0], vals[0]};
      if (vals.size() == 3 && vals[0] > 0 && vals[1] > 0 && vals[2] > 0)
        m.spacing_mm = Vec3{vals[0], vals[1], vals[2]};
      else
        problems.push_back(where + ": spacing_mm '" + sp + "' must be one or three positive numbers");
    }
    if (check_paths) {
      const auto dangling = [&](const char* name, const std::string& p, bool cvol) {
        if (p.empty()) {
          problems.push_back(where + ": empty " + name);
        } else if (cvol ? !cvol_exists(p) : !fs::exists(p)) {
          problems.push_back(where + ": " + name + " '" + p + "' does not exist");
        }
      };
      dangling("volume_path", m.volume_path, true);
      dangling("labels_path", m.labels_path, true);
      dangling("ecg_path", m.ecg_path, false);
      if (!m.defs_path.empty()) dangling("defs_path", m.defs_path, false);
      if (!m.gen_volume_path.empty()) dangling("gen_volume_path", m.gen_volume_path, true);
      if (!m.gen_labels_path.empty()) dangling("gen_labels_path", m.gen_labels_path, true);
    }
    out.push_back(std::move(m));
  }
  if (!problems.empty()) {
    std::string msg = path + ": ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    fail(ErrorCode::manifest, msg);
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  const fs::path base = fs::path(path).parent_path();
  const auto rel = [&](const std::string& p) {
    if (p.empty()) return p;
    return fs::path(p).lexically_relative(base.empty() ? fs::path(".") : base).string();
  };
  std::string out = "subject_id,volume_path,labels_path,ecg_path,category,spacing_mm,defs_path,gen_volume_path,gen_labels_path\n";
  char buf[96];
  for (const auto& m : rows) {
    std::string sp;
    if (m.spacing_mm) {
      std::snprintf(buf, sizeof buf, "%.17g;%.17g;%.17g", (*m.spacing_mm)[0], (*m.spacing_mm)[1], (*m.spacing_mm)[2]);
      sp = buf;
    }
    for (const std::string& f : {m.subject_id, rel(m.volume_path), rel(m.labels_path), rel(m.ecg_path), m.category, sp,
                                 rel(m.defs_path), rel(m.gen_volume_path), rel(m.gen_labels_path)})
      out += csv_escape(f) + ",";
    out.back() = '\n';
  }
  if (!base.empty()) fs::create_directories(base);
  write_file_atomic(path, out);
}

}  // namespace cof
