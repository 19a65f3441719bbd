#include "cof/cof.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>

#include "cof/analysis.hpp"
#include "cof/error.hpp"
#include "cof/metrics.hpp"
#include "cof/pipeline.hpp"

struct cof_volume {
  cof::Volume4D v;
};
struct cof_labels {
  std::vector<cof::LabelVolume> seq;
  std::vector<double> times;
};
struct cof_ecg {
  cof::EcgRecord rec;
};
struct cof_deformation {
  cof::DeformationSet defs;
  cof::Json meta;
  std::vector<double> topology;
};
struct cof_flow {
  cof::VelocityNet net;
  cof::Json meta;
};

static_assert(sizeof(cof::Vec3) == 3 * sizeof(double), "Vec3 must be tightly packed");

namespace {

thread_local std::string g_last_error;

cof_status status_of(cof::ErrorCode code) { return static_cast<cof_status>(static_cast<int>(code) + 1); }

template <typename F>
cof_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return COF_OK;
  } catch (const cof::Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const cof::Json::exception& e) {
    g_last_error = std::string("invalid JSON: ") + e.what();
    return COF_ERR_FORMAT;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return COF_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return COF_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  cof::require(p != nullptr, cof::ErrorCode::invalid_argument, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

cof::Json parse_json(const char* text, const char* what) {
  if (!text || !*text) return cof::Json::object();
  try {
    return cof::Json::parse(text);
  } catch (const cof::Json::exception& e) {
    cof::fail(cof::ErrorCode::format, std::string(what) + " is not valid JSON: " + e.what());
  }
}

void check_frame(std::size_t frame, std::size_t count) {
  cof::require(frame < count, cof::ErrorCode::invalid_argument,
               "frame " + std::to_string(frame) + " out of range (" + std::to_string(count) + " frames)");
}

void copy_grid(const cof::Grid& g, int dims[3], double spacing[3]) {
  for (int a = 0; a < 3; ++a) {
    if (dims) dims[a] = g.dims[a];
    if (spacing) spacing[a] = g.spacing_mm[a];
  }
}

}  // namespace

extern "C" {

const char* cof_version(void) { return COF_VERSION_STRING; }

const char* cof_status_name(cof_status status) {
  if (status == COF_OK) return "ok";
  if (status == COF_ERR_INTERNAL) return "internal";
  const int i = static_cast<int>(status) - 1;
  if (i >= 0 && i <= static_cast<int>(cof::ErrorCode::manifest))
    return cof::error_code_name(static_cast<cof::ErrorCode>(i));
  return "unknown";
}

const char* cof_last_error(void) { return g_last_error.c_str(); }

void cof_string_free(char* s) { std::free(s); }

cof_status cof_run_command(const char* name, const char* request_json, cof_log_fn log, void* user,
                           char** response_json) {
  return guarded([&] {
    need(name, "name");
    need(response_json, "response_json");
    *response_json = nullptr;
    const cof::Json req = parse_json(request_json, "request");
    cof::pipeline::Log sink;
    if (log) sink = [log, user](const std::string& m) { log(m.c_str(), user); };
    *response_json = dup_string(cof::pipeline::run_command(name, req, sink).dump(2));
  });
}

// ---- volumes

cof_status cof_volume_read(const char* path, cof_volume** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<cof_volume>();
    if (cof::read_cvol_header(path).frames == 1) {
      h->v.frames.push_back(cof::read_volume(path));
      h->v.frame_times = {0.0};
    } else {
      h->v = cof::read_volume4d(path);
    }
    *out = h.release();
  });
}

cof_status cof_volume_info(const cof_volume* v, int dims[3], double spacing_mm[3], size_t* frames) {
  return guarded([&] {
    need(v, "volume");
    copy_grid(v->v.grid(), dims, spacing_mm);
    if (frames) *frames = v->v.frame_count();
  });
}

cof_status cof_volume_frame_time(const cof_volume* v, size_t frame, double* t) {
  return guarded([&] {
    need(v, "volume");
    need(t, "t");
    check_frame(frame, v->v.frame_count());
    *t = v->v.frame_times[frame];
  });
}

cof_status cof_volume_frame_data(const cof_volume* v, size_t frame, const double** data, size_t* count) {
  return guarded([&] {
    need(v, "volume");
    need(data, "data");
    check_frame(frame, v->v.frame_count());
    *data = v->v.frames[frame].data.data();
    if (count) *count = v->v.frames[frame].data.size();
  });
}

cof_status cof_volume_write(const cof_volume* v, const char* path) {
  return guarded([&] {
    need(v, "volume");
    need(path, "path");
    if (v->v.frame_count() == 1)
      cof::write_volume(path, v->v.frames.front());
    else
      cof::write_volume(path, v->v);
  });
}

void cof_volume_free(cof_volume* v) { delete v; }

// ---- labels

cof_status cof_labels_read(const char* path, cof_labels** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<cof_labels>();
    if (cof::read_cvol_header(path).frames == 1) {
      h->seq.push_back(cof::read_labels(path));
      h->times = {0.0};
    } else {
      h->seq = cof::read_label_sequence(path, &h->times);
    }
    *out = h.release();
  });
}

cof_status cof_labels_info(const cof_labels* l, int dims[3], double spacing_mm[3], size_t* frames) {
  return guarded([&] {
    need(l, "labels");
    copy_grid(l->seq.front().grid, dims, spacing_mm);
    if (frames) *frames = l->seq.size();
  });
}

cof_status cof_labels_frame_data(const cof_labels* l, size_t frame, const uint8_t** data, size_t* count) {
  return guarded([&] {
    need(l, "labels");
    need(data, "data");
    check_frame(frame, l->seq.size());
    *data = l->seq[frame].labels.data();
    if (count) *count = l->seq[frame].labels.size();
  });
}

cof_status cof_labels_class_volume_ml(const cof_labels* l, size_t frame, int cls, double* ml) {
  return guarded([&] {
    need(l, "labels");
    need(ml, "ml");
    check_frame(frame, l->seq.size());
    *ml = cof::chamber_volume(l->seq[frame], cls);
  });
}

cof_status cof_labels_write(const cof_labels* l, const char* path) {
  return guarded([&] {
    need(l, "labels");
    need(path, "path");
    if (l->seq.size() == 1)
      cof::write_labels(path, l->seq.front());
    else
      cof::write_label_sequence(path, l->seq, l->times);
  });
}

void cof_labels_free(cof_labels* l) { delete l; }

// ---- ECG

cof_status cof_ecg_read(const char* path, double sample_rate_hz, cof_ecg** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<cof_ecg>();
    h->rec = cof::read_ecg(path, sample_rate_hz);
    *out = h.release();
  });
}

cof_status cof_ecg_info(const cof_ecg* e, size_t* samples, double* sample_rate_hz) {
  return guarded([&] {
    need(e, "ecg");
    if (samples) *samples = e->rec.sample_count();
    if (sample_rate_hz) *sample_rate_hz = e->rec.sample_rate_hz;
  });
}

cof_status cof_ecg_lead(const cof_ecg* e, int lead, const double** data, size_t* count) {
  return guarded([&] {
    need(e, "ecg");
    need(data, "data");
    cof::require(lead >= 0 && lead < cof::kLeadCount, cof::ErrorCode::invalid_argument,
                 "lead index " + std::to_string(lead) + " out of range");
    *data = e->rec.leads[lead].data();
    if (count) *count = e->rec.leads[lead].size();
  });
}

cof_status cof_ecg_summary(const cof_ecg* e, const char* config_json, char** summary_json) {
  return guarded([&] {
    need(e, "ecg");
    need(summary_json, "summary_json");
    *summary_json = nullptr;
    cof::pipeline::EcgPrepConfig base;
    base.sample_rate_hz = e->rec.sample_rate_hz;
    const auto cfg = cof::pipeline::ecg_config_from_json(parse_json(config_json, "config"), base);
    const auto s = cof::pipeline::summarize_ecg(e->rec, cfg);
    const cof::Json j = {{"config", cof::pipeline::to_json(cfg)},
                         {"r_peaks", s.peaks},
                         {"rr_seconds", s.cycle.rr_seconds},
                         {"heart_rate_bpm", 60.0 / s.cycle.rr_seconds},
                         {"cycle_start_sample", s.cycle.start_sample},
                         {"embedding", s.embedding}};
    *summary_json = dup_string(j.dump());
  });
}

void cof_ecg_free(cof_ecg* e) { delete e; }

// ---- deformations

cof_status cof_deformation_read(const char* path, cof_deformation** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<cof_deformation>();
    h->defs = cof::read_deformation_set(path, &h->meta);
    *out = h.release();
  });
}

cof_status cof_deformation_info(const cof_deformation* d, int dims[3], size_t* frames) {
  return guarded([&] {
    need(d, "deformation");
    copy_grid(d->defs.grid(), dims, nullptr);
    if (frames) *frames = d->defs.frame_count();
  });
}

cof_status cof_deformation_field(const cof_deformation* d, size_t frame, const double** xyz, size_t* voxels) {
  return guarded([&] {
    need(d, "deformation");
    need(xyz, "xyz");
    check_frame(frame, d->defs.frame_count());
    const auto& f = d->defs.fields[frame];
    *xyz = f.vectors.front().data();
    if (voxels) *voxels = f.vectors.size();
  });
}

cof_status cof_deformation_topology(const cof_deformation* d, size_t frame, double* positive_fraction) {
  return guarded([&] {
    need(d, "deformation");
    need(positive_fraction, "positive_fraction");
    check_frame(frame, d->defs.frame_count());
    // Computed once per handle; the handle is otherwise immutable.
    auto* mut = const_cast<cof_deformation*>(d);
    if (mut->topology.empty()) mut->topology = cof::topology_report(d->defs);
    *positive_fraction = d->topology[frame];
  });
}

void cof_deformation_free(cof_deformation* d) { delete d; }

// ---- flow models

cof_status cof_flow_read(const char* path, cof_flow** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto h = std::make_unique<cof_flow>();
    h->net = cof::read_velocity_net(path, &h->meta);
    *out = h.release();
  });
}

cof_status cof_flow_write(const cof_flow* f, const char* path) {
  return guarded([&] {
    need(f, "flow");
    need(path, "path");
    cof::write_checkpoint(path, f->net, f->meta);
  });
}

cof_status cof_flow_info(const cof_flow* f, char** info_json) {
  return guarded([&] {
    need(f, "flow");
    need(info_json, "info_json");
    *info_json = nullptr;
    const cof::Json j = {{"network", cof::velocity_net_config_to_json(f->net.config())},
                         {"velocity_scale", f->net.velocity_scale()},
                         {"parameter_count", f->net.parameter_count()},
                         {"meta", f->meta}};
    *info_json = dup_string(j.dump());
  });
}

cof_status cof_flow_velocity(const cof_flow* f, const double* c_ecg, size_t ecg_len, const double* c_rea,
                             size_t rea_len, double t, const double* positions, size_t n, double* velocities) {
  return guarded([&] {
    need(f, "flow");
    need(positions, "positions");
    need(velocities, "velocities");
    const auto& cfg = f->net.config();
    cof::require(ecg_len == cfg.ecg_features && (c_ecg || ecg_len == 0), cof::ErrorCode::shape,
                 "c_ecg length " + std::to_string(ecg_len) + " != " + std::to_string(cfg.ecg_features));
    cof::require(rea_len == cfg.rea_features && (c_rea || rea_len == 0), cof::ErrorCode::shape,
                 "c_rea length " + std::to_string(rea_len) + " != " + std::to_string(cfg.rea_features));
    cof::ConditionEmbedding cond{std::vector<double>(c_ecg, c_ecg + ecg_len), std::vector<double>(c_rea, c_rea + rea_len)};
    std::vector<cof::Vec3> pts(n);
    std::memcpy(pts.data(), positions, n * sizeof(cof::Vec3));
    const auto v = cof::velocity_forward_batch(f->net, pts, t, cond);
    std::memcpy(velocities, v.data(), n * sizeof(cof::Vec3));
  });
}

void cof_flow_free(cof_flow* f) { delete f; }

}  // extern "C"
