#include "cof/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <set>

#include "cof/error.hpp"
#include "cof/metrics.hpp"

namespace cof::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr const char* kCine = "cine.cvol";
constexpr const char* kLabels = "labels.cvol";
constexpr const char* kEcg = "ecg.csv";

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

// Strict reader over one config section.
class Section {
 public:
  Section(Json j, std::string name) : j_(std::move(j)), name_(std::move(name)) {
    require(j_.is_null() || j_.is_object(), ErrorCode::invalid_argument, "config section '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (j_.is_null() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      fail(ErrorCode::invalid_argument, "config key '" + name_ + "." + key + "' has the wrong type");
    }
  }

  const Json* raw(const char* key) {
    used_.insert(key);
    if (j_.is_null() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    if (j_.is_null()) return;
    for (const auto& item : j_.items())
      require(used_.count(item.key()) > 0, ErrorCode::invalid_argument,
              "unknown config key '" + name_ + "." + item.key() + "'");
  }

 private:
  Json j_;
  std::string name_;
  std::set<std::string> used_;
};

const Json& sub(const Json& cfg, const char* key) {
  static const Json null_json;
  if (!cfg.is_object() || !cfg.contains(key)) return null_json;
  return cfg.at(key);
}

std::string need_string(const Json& req, const char* key) {
  require(req.contains(key) && req.at(key).is_string() && !req.at(key).get<std::string>().empty(),
          ErrorCode::invalid_argument, std::string("missing required argument '") + key + "'");
  return req.at(key).get<std::string>();
}

void need_cvol(const std::string& path, const char* what) {
  require(fs::exists(cvol_stem(path) + ".cvol.json"), ErrorCode::io,
          std::string(what) + " '" + path + "' not found (expected " + cvol_stem(path) + ".cvol.json)");
}

void need_file(const std::string& path, const char* what) {
  require(fs::exists(path), ErrorCode::io, std::string(what) + " '" + path + "' not found");
}

Volume3D read_reference_volume(const std::string& path) {
  need_cvol(path, "volume");
  return read_cvol_header(path).frames == 1 ? read_volume(path) : read_volume4d(path).frames.front();
}

LabelVolume read_reference_labels(const std::string& path) {
  need_cvol(path, "labels");
  return read_cvol_header(path).frames == 1 ? read_labels(path) : read_label_sequence(path).front();
}

Json optional_json(const std::optional<double>& v) { return v && std::isfinite(*v) ? Json(*v) : Json(); }

Json indices_json(const FunctionalIndices& f) {
  return {{"edv_ml", f.edv_ml},
          {"esv_ml", f.esv_ml},
          {"sv_ml", f.sv_ml},
          {"ef", f.ef},
          {"co_l_per_min", f.co_l_per_min},
          {"heart_rate_bpm", f.heart_rate_bpm},
          {"ed_frame", f.ed_frame},
          {"es_frame", f.es_frame},
          {"edv_anchor", edv_anchor_name(f.anchor)},
          {"volume_curve_ml", f.volume_curve_ml}};
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

// Sibling path in the directory holding `path`.
std::string beside(const std::string& path, const std::string& name) {
  return (fs::path(path).parent_path() / name).string();
}

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  char fmt_buf[32];
  std::snprintf(fmt_buf, sizeof fmt_buf, "%.17g", v);
  return fmt_buf;
}
std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

void write_json(const std::string& path, const Json& j) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_file_atomic(path, j.dump(2) + "\n");
}

Json base_response(const char* command, const Json& config, std::uint64_t seed) {
  return {{"command", command}, {"seed", seed}, {"config", config}};
}

}  // namespace

// ---------------------------------------------------------------- configs

Json to_json(const RegConfig& c) {
  return {{"lambda_rec", c.lambda_rec},     {"lambda_seg", c.lambda_seg},   {"lambda_smooth", c.lambda_smooth},
          {"ncc_window", c.ncc_window},     {"squaring_steps", c.squaring_steps}, {"iters", c.iters},
          {"lr", c.lr},                     {"weight_decay", c.weight_decay}, {"dice_eps", c.dice_eps},
          {"stride", c.stride},             {"stop_window", c.stop_window}, {"stop_rel_tol", c.stop_rel_tol},
          {"min_iters", c.min_iters}};
}

RegConfig reg_config_from_json(const Json& j, RegConfig c) {
  Section s(j, "registration");
  s.get("lambda_rec", c.lambda_rec);
  s.get("lambda_seg", c.lambda_seg);
  s.get("lambda_smooth", c.lambda_smooth);
  s.get("ncc_window", c.ncc_window);
  s.get("squaring_steps", c.squaring_steps);
  s.get("iters", c.iters);
  s.get("lr", c.lr);
  s.get("weight_decay", c.weight_decay);
  s.get("dice_eps", c.dice_eps);
  s.get("stride", c.stride);
  s.get("stop_window", c.stop_window);
  s.get("stop_rel_tol", c.stop_rel_tol);
  s.get("min_iters", c.min_iters);
  s.finish();
  c.validate();
  return c;
}

Json to_json(const FlowConfig& c) {
  return {{"network",
           {{"time_dim", c.network.time_dim},
            {"rea_dim", c.network.rea_dim},
            {"width", c.network.width},
            {"hidden_layers", c.network.hidden_layers},
            {"zero_head", c.network.zero_head}}},
          {"training",
           {{"iters", c.training.iters},
            {"batch", c.training.batch},
            {"lr", c.training.lr},
            {"weight_decay", c.training.weight_decay},
            {"cosine_decay", c.training.cosine_decay}}},
          {"sample_mask", c.mask_foreground ? "foreground" : "all"},
          {"mask_dilation", c.mask_dilation},
          {"zero_rea", c.zero_rea}};
}

FlowConfig flow_config_from_json(const Json& j, FlowConfig c) {
  Section s(j, "flow");
  {
    Section n(s.raw("network") ? *s.raw("network") : Json(), "flow.network");
    n.get("time_dim", c.network.time_dim);
    n.get("rea_dim", c.network.rea_dim);
    n.get("width", c.network.width);
    n.get("hidden_layers", c.network.hidden_layers);
    n.get("zero_head", c.network.zero_head);
    n.finish();
  }
  {
    Section t(s.raw("training") ? *s.raw("training") : Json(), "flow.training");
    t.get("iters", c.training.iters);
    t.get("batch", c.training.batch);
    t.get("lr", c.training.lr);
    t.get("weight_decay", c.training.weight_decay);
    t.get("cosine_decay", c.training.cosine_decay);
    t.finish();
  }
  std::string mask = c.mask_foreground ? "foreground" : "all";
  s.get("sample_mask", mask);
  require(mask == "foreground" || mask == "all", ErrorCode::invalid_argument,
          "flow.sample_mask must be 'foreground' or 'all'");
  c.mask_foreground = mask == "foreground";
  s.get("mask_dilation", c.mask_dilation);
  s.get("zero_rea", c.zero_rea);
  s.finish();
  require(c.mask_dilation >= 0, ErrorCode::invalid_argument, "flow.mask_dilation must be >= 0");
  c.network.validate();
  c.training.validate();
  return c;
}

Json to_json(const InferenceConfig& c) {
  return {{"frames", c.frames}, {"solver", ode_solver_name(c.solver)}, {"substeps", c.substeps}, {"save_defs", c.save_defs}};
}

InferenceConfig inference_config_from_json(const Json& j, InferenceConfig c) {
  Section s(j, "inference");
  s.get("frames", c.frames);
  std::string solver = ode_solver_name(c.solver);
  s.get("solver", solver);
  c.solver = parse_ode_solver(solver);
  s.get("substeps", c.substeps);
  s.get("save_defs", c.save_defs);
  s.finish();
  require(c.frames >= 2, ErrorCode::invalid_argument, "inference.frames must be >= 2");
  require(c.substeps >= 1, ErrorCode::invalid_argument, "inference.substeps must be >= 1");
  return c;
}

Json to_json(const EcgPrepConfig& c) {
  return {{"sample_rate_hz", c.sample_rate_hz},
          {"phase_samples", c.phase_samples},
          {"cycle", c.cycle < 0 ? Json("median") : Json(c.cycle)}};
}

EcgPrepConfig ecg_config_from_json(const Json& j, EcgPrepConfig c) {
  Section s(j, "ecg");
  s.get("sample_rate_hz", c.sample_rate_hz);
  s.get("phase_samples", c.phase_samples);
  if (const Json* cyc = s.raw("cycle")) {
    if (cyc->is_string()) {
      require(cyc->get<std::string>() == "median", ErrorCode::invalid_argument, "ecg.cycle must be 'median' or an index");
      c.cycle = -1;
    } else {
      require(cyc->is_number_integer() && cyc->get<long>() >= 0, ErrorCode::invalid_argument,
              "ecg.cycle must be 'median' or a non-negative index");
      c.cycle = cyc->get<long>();
    }
  }
  s.finish();
  require(c.sample_rate_hz > 0.0, ErrorCode::invalid_argument, "ecg.sample_rate_hz must be positive");
  require(c.phase_samples >= 2, ErrorCode::invalid_argument, "ecg.phase_samples must be >= 2");
  return c;
}

Json to_json(const AnalysisConfig& c) {
  return {{"bins", c.bins}, {"bootstrap", c.bootstrap}, {"edv_anchor", edv_anchor_name(c.anchor)}};
}

AnalysisConfig analysis_config_from_json(const Json& j, AnalysisConfig c) {
  Section s(j, "analysis");
  s.get("bins", c.bins);
  s.get("bootstrap", c.bootstrap);
  std::string anchor = edv_anchor_name(c.anchor);
  s.get("edv_anchor", anchor);
  c.anchor = parse_edv_anchor(anchor);
  s.finish();
  require(c.bins >= 1, ErrorCode::invalid_argument, "analysis.bins must be >= 1");
  require(c.bootstrap >= 1, ErrorCode::invalid_argument, "analysis.bootstrap must be >= 1");
  return c;
}

Json resolve_config(const Json& request) {
  require(request.is_object(), ErrorCode::invalid_argument, "request must be a JSON object");
  Json cfg = Json::object();
  if (request.contains("config_path") && !request.at("config_path").is_null()) {
    const std::string path = request.at("config_path").get<std::string>();
    need_file(path, "config file");
    try {
      cfg = Json::parse(read_file(path));
    } catch (const Json::exception& e) {
      fail(ErrorCode::format, path + ": invalid JSON (" + e.what() + ")");
    }
    require(cfg.is_object(), ErrorCode::format, path + ": config must be a JSON object");
  }
  if (request.contains("config") && !request.at("config").is_null()) {
    require(request.at("config").is_object(), ErrorCode::invalid_argument, "inline config must be an object");
    cfg.merge_patch(request.at("config"));
  }
  static const std::set<std::string> known{"seed", "phantom", "ecg", "registration", "flow", "inference", "analysis"};
  for (const auto& item : cfg.items())
    require(known.count(item.key()) > 0, ErrorCode::invalid_argument, "unknown config section '" + item.key() + "'");
  return cfg;
}

std::uint64_t resolve_seed(const Json& request, const Json& config) {
  const auto as_seed = [](const Json& j, const std::string& what) -> std::uint64_t {
    require(j.is_number_unsigned() || (j.is_number_integer() && j.get<long long>() >= 0), ErrorCode::invalid_argument,
            what + " must be a non-negative integer");
    return j.get<std::uint64_t>();
  };
  if (request.contains("seed") && !request.at("seed").is_null()) return as_seed(request.at("seed"), "seed");
  if (config.contains("seed") && !config.at("seed").is_null()) return as_seed(config.at("seed"), "config seed");
  if (const char* env = std::getenv("COF_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    require(end && *end == '\0' && env[0] != '-', ErrorCode::invalid_argument,
            std::string("COF_SEED '") + env + "' is not a non-negative integer");
    return v;
  }
  return 0;
}

EcgSummary summarize_ecg(const EcgRecord& rec, const EcgPrepConfig& cfg) {
  EcgSummary s;
  s.peaks = detect_r_peaks(rec);
  const CycleSelector which = cfg.cycle < 0 ? CycleSelector{MedianCycle{}} : CycleSelector{static_cast<std::size_t>(cfg.cycle)};
  s.cycle = extract_cycle(rec, s.peaks, which, cfg.phase_samples);
  s.embedding = embed_ecg(s.cycle);
  return s;
}

// ---------------------------------------------------------------- phantom

Json run_phantom(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  const std::string out_dir = need_string(request, "out");

  // Cohort-wide defaults, overridable per subject.
  struct Defaults {
    int dim = 48;
    std::size_t frames = 20;
    double heart_rate_bpm = 60.0;
    double contraction_fraction = 0.15;
    double noise_sigma = 0.02;
    std::optional<double> systole_peak_phase;
    std::size_t ecg_cycles = 8;
    std::optional<double> ecg_snr_db;
    std::string category = "normal";
  };
  const auto read_fields = [](Section& s, Defaults& d) {
    s.get("dim", d.dim);
    s.get("frames", d.frames);
    s.get("heart_rate_bpm", d.heart_rate_bpm);
    s.get("contraction_fraction", d.contraction_fraction);
    s.get("noise_sigma", d.noise_sigma);
    if (const Json* p = s.raw("systole_peak_phase"); p && !p->is_null()) d.systole_peak_phase = p->get<double>();
    s.get("ecg_cycles", d.ecg_cycles);
    if (const Json* p = s.raw("ecg_snr_db"); p && !p->is_null()) d.ecg_snr_db = p->get<double>();
    s.get("category", d.category);
  };
  Defaults base;
  Json subjects = Json::array();
  {
    Section s(sub(cfg, "phantom"), "phantom");
    read_fields(s, base);
    if (const Json* subj = s.raw("subjects")) {
      require(subj->is_array() && !subj->empty(), ErrorCode::invalid_argument, "phantom.subjects must be a non-empty array");
      subjects = *subj;
    }
    s.finish();
  }
  if (subjects.empty()) subjects.push_back(Json::object());

  std::vector<ManifestRow> rows;
  Json resolved_subjects = Json::array();
  std::set<std::string> ids;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    Defaults d = base;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "phantom_%03zu", i);
    std::string id = idbuf;
    {
      Section s(subjects[i], "phantom.subjects[" + std::to_string(i) + "]");
      s.get("id", id);
      read_fields(s, d);
      s.finish();
    }
    require(!id.empty() && id.find_first_of("/\\") == std::string::npos, ErrorCode::invalid_argument,
            "phantom subject id '" + id + "' is not a valid directory name");
    require(ids.insert(id).second, ErrorCode::invalid_argument, "duplicate phantom subject id '" + id + "'");
    require(d.dim >= 8, ErrorCode::invalid_argument, "phantom dim must be >= 8");

    PhantomSpec spec = PhantomSpec::standard(d.dim, d.heart_rate_bpm);
    spec.frames = d.frames;
    spec.contraction_fraction = d.contraction_fraction;
    spec.noise_sigma = d.noise_sigma;
    if (d.systole_peak_phase) spec.systole_peak_phase = *d.systole_peak_phase;
    spec.ecg_cycles = d.ecg_cycles;
    spec.ecg_snr_db = d.ecg_snr_db ? *d.ecg_snr_db : std::numeric_limits<double>::infinity();
    spec.seed = derive_seed(seed, i);
    say(log, "phantom " + id + ": " + std::to_string(d.dim) + "^3, " + std::to_string(d.frames) + " frames, HR " +
                 num(d.heart_rate_bpm));
    const PhantomTruth truth = generate_phantom(spec);

    Json sj = {{"id", id},
               {"category", d.category},
               {"dim", d.dim},
               {"spacing_mm", spec.grid.spacing_mm[0]},
               {"frames", d.frames},
               {"heart_rate_bpm", d.heart_rate_bpm},
               {"rr_seconds", 60.0 / d.heart_rate_bpm},
               {"contraction_fraction", d.contraction_fraction},
               {"noise_sigma", d.noise_sigma},
               {"systole_peak_phase", spec.systole_peak_phase},
               {"ecg_cycles", d.ecg_cycles},
               {"ecg_snr_db", d.ecg_snr_db ? Json(*d.ecg_snr_db) : Json()},
               {"seed", spec.seed}};
    const Json meta = {{"command", "phantom"}, {"seed", seed}, {"subject", sj}};
    const fs::path dir = fs::path(out_dir) / id;
    fs::create_directories(dir);
    write_volume((dir / kCine).string(), truth.volumes, meta);
    write_label_sequence((dir / kLabels).string(), truth.labels, truth.volumes.frame_times, meta);
    write_ecg((dir / kEcg).string(), truth.ecg);
    Json tj = sj;
    tj["frame_times"] = truth.volumes.frame_times;
    tj["lv_cavity_volume_ml"] = truth.lv_cavity_volume_ml;
    tj["contraction_scale"] = truth.contraction_scale;
    tj["analytic_ef"] = truth.analytic_ef;
    tj["true_r_peaks"] = truth.ecg.true_r_peaks;
    tj["config"] = cfg;
    tj["root_seed"] = seed;
    write_json((dir / "truth.json").string(), tj);

    ManifestRow row;
    row.subject_id = id;
    row.volume_path = (dir / kCine).string();
    row.labels_path = (dir / kLabels).string();
    row.ecg_path = (dir / kEcg).string();
    row.category = d.category;
    rows.push_back(row);
    resolved_subjects.push_back(sj);
  }
  const std::string manifest = (fs::path(out_dir) / "manifest.csv").string();
  write_manifest(manifest, rows);

  Json resolved = cfg;
  resolved["phantom"] = {{"subjects", resolved_subjects}};
  Json resp = base_response("phantom", resolved, seed);
  resp["manifest"] = manifest;
  resp["subjects"] = resolved_subjects;
  return resp;
}

// ---------------------------------------------------------------- ecg-prep

Json run_ecg_prep(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  const EcgPrepConfig ec = ecg_config_from_json(sub(cfg, "ecg"));
  const std::string in = need_string(request, "in");
  need_file(in, "ECG file");
  const EcgRecord rec = read_ecg(in, ec.sample_rate_hz);
  const EcgSummary s = summarize_ecg(rec, ec);
  say(log, "ecg-prep: " + std::to_string(s.peaks.size()) + " R peaks, RR " + num(s.cycle.rr_seconds) + " s");

  Json resp = base_response("ecg-prep", {{"ecg", to_json(ec)}}, seed);
  resp["input"] = in;
  resp["r_peaks"] = s.peaks;
  std::vector<double> times;
  for (std::size_t p : s.peaks) times.push_back(static_cast<double>(p) / rec.sample_rate_hz);
  resp["r_peak_times_s"] = times;
  resp["rr_seconds"] = s.cycle.rr_seconds;
  resp["heart_rate_bpm"] = 60.0 / s.cycle.rr_seconds;
  resp["cycle_start_sample"] = s.cycle.start_sample;
  resp["phase_grid"] = s.cycle.phase_grid;
  Json leads = Json::object();
  for (int l = 0; l < kLeadCount; ++l) leads[lead_names()[l]] = s.cycle.resampled[l];
  resp["resampled_leads"] = leads;
  resp["embedding"] = s.embedding;
  if (request.contains("out") && request.at("out").is_string()) {
    const std::string out = request.at("out").get<std::string>();
    write_json(out, resp);
    resp["output"] = out;
  }
  return resp;
}

// ---------------------------------------------------------------- register

Json run_register(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  RegConfig rc = reg_config_from_json(sub(cfg, "registration"));
  rc.seed = seed;
  const std::string vol_path = need_string(request, "volume");
  const std::string lab_path = need_string(request, "labels");
  const std::string out = need_string(request, "out");
  need_cvol(vol_path, "volume");
  need_cvol(lab_path, "labels");
  const Volume4D vol = read_volume4d(vol_path);
  std::vector<double> label_times;
  const std::vector<LabelVolume> labels = read_label_sequence(lab_path, &label_times);
  require(label_times == vol.frame_times, ErrorCode::shape, "volume and label sequences have different frame times");

  Json frames = Json::array();
  const DeformationSet defs = register_sequence(vol, labels, rc, [&](std::size_t k, const PairResult& r) {
    frames.push_back({{"frame", k},
                      {"iterations", r.loss_trace.size()},
                      {"total", r.final_terms.total},
                      {"rec", r.final_terms.rec},
                      {"seg", r.final_terms.seg},
                      {"smooth", r.final_terms.smooth}});
    say(log, "register: frame " + std::to_string(k) + "/" + std::to_string(vol.frame_count() - 1) + " after " +
                 std::to_string(r.loss_trace.size()) + " iterations, loss " + num(r.final_terms.total));
  });
  const std::vector<double> topo = topology_report(defs);

  Json resolved = {{"registration", to_json(rc)}, {"seed", seed}};
  Json resp = base_response("register", resolved, seed);
  resp["volume"] = vol_path;
  resp["labels"] = lab_path;
  resp["frames"] = frames;
  resp["topology_positive_fraction"] = topo;
  resp["min_topology_positive_fraction"] = *std::min_element(topo.begin(), topo.end());
  write_checkpoint(out, defs, resp);
  resp["output"] = out;
  return resp;
}

// ---------------------------------------------------------------- train-flow

Json run_train_flow(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  FlowConfig fc = flow_config_from_json(sub(cfg, "flow"));
  if (request.contains("zero_rea") && request.at("zero_rea").is_boolean() && request.at("zero_rea").get<bool>())
    fc.zero_rea = true;
  const EcgPrepConfig ec = ecg_config_from_json(sub(cfg, "ecg"));
  const std::string manifest = need_string(request, "manifest");
  const std::string out = need_string(request, "out");
  need_file(manifest, "manifest");
  auto rows = read_manifest(manifest);

  std::vector<std::string> missing;
  for (auto& r : rows) {
    if (r.defs_path.empty()) r.defs_path = beside(r.volume_path, "defs.ckpt");
    if (!fs::exists(r.defs_path)) missing.push_back(r.subject_id);
  }
  require(missing.empty(), ErrorCode::manifest,
          manifest + ": train-flow needs registered deformations (a defs_path column or defs.ckpt beside the volume) "
                     "for subjects: " + join(missing, ", "));

  std::vector<ReferenceFlow> refs;
  std::vector<ConditionEmbedding> conds;
  Json subjects = Json::array();
  Index3 dims{};
  for (std::size_t s = 0; s < rows.size(); ++s) {
    const auto& r = rows[s];
    const DeformationSet defs = read_deformation_set(r.defs_path);
    const Volume3D ref_vol = read_reference_volume(r.volume_path);
    const LabelVolume ref_lab = read_reference_labels(r.labels_path);
    require_same_grid(ref_vol.grid, defs.grid(), ("subject " + r.subject_id + " deformations").c_str());
    require_same_grid(ref_vol.grid, ref_lab.grid, ("subject " + r.subject_id + " labels").c_str());
    if (s == 0) dims = ref_vol.grid.dims;
    require(ref_vol.grid.dims == dims, ErrorCode::shape,
            "subject " + r.subject_id + " has different volume dimensions; one flow model covers one grid size");
    ReferenceFlow ref = derive_reference_velocities(defs, fc.mask_foreground ? &ref_lab : nullptr, fc.mask_dilation);
    ref.subject = s;
    const EcgSummary es = summarize_ecg(read_ecg(r.ecg_path, ec.sample_rate_hz), ec);
    ConditionEmbedding c{es.embedding, rea_features(ref_vol)};
    if (fc.zero_rea) std::fill(c.c_rea.begin(), c.c_rea.end(), 0.0);
    subjects.push_back({{"id", r.subject_id},
                        {"category", r.category},
                        {"trajectories", ref.trajectory_count()},
                        {"frames", ref.frames()},
                        {"rr_seconds", es.cycle.rr_seconds}});
    say(log, "train-flow: subject " + r.subject_id + ", " + std::to_string(ref.trajectory_count()) + " trajectories");
    refs.push_back(std::move(ref));
    conds.push_back(std::move(c));
  }

  VelocityNetConfig nc = fc.network;
  nc.ecg_features = conds[0].c_ecg.size();
  nc.rea_features = conds[0].c_rea.size();
  nc.domain_dims = dims;
  nc.seed = derive_seed(seed, 1);
  FlowTrainConfig tc = fc.training;
  tc.seed = derive_seed(seed, 2);
  say(log, "train-flow: " + std::to_string(tc.iters) + " iterations, batch " + std::to_string(tc.batch));
  const FlowTrainResult res = train_flow(VelocityNet(nc), refs, conds, tc);

  const auto window_mean = [&](bool lead) {
    const std::size_t n = std::min<std::size_t>(100, res.loss_trace.size());
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += lead ? res.loss_trace[i] : res.loss_trace[res.loss_trace.size() - 1 - i];
    return s / static_cast<double>(n);
  };

  Json resolved = {{"flow", to_json(fc)}, {"ecg", to_json(ec)}, {"seed", seed}};
  Json resp = base_response("train-flow", resolved, seed);
  resp["manifest"] = manifest;
  resp["subjects"] = subjects;
  resp["zero_rea"] = fc.zero_rea;
  resp["network_seed"] = nc.seed;
  resp["training_seed"] = tc.seed;
  resp["velocity_scale"] = res.net.velocity_scale();
  resp["loss_first"] = res.loss_trace.front();
  resp["loss_last"] = res.loss_trace.back();
  resp["loss_leading_mean"] = window_mean(true);
  resp["loss_trailing_mean"] = window_mean(false);
  write_checkpoint(out, res.net, resp);
  resp["output"] = out;
  return resp;
}

// ---------------------------------------------------------------- infer

Json run_infer(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  const InferenceConfig ic = inference_config_from_json(sub(cfg, "inference"));
  const std::string flow_path = need_string(request, "flow");
  const std::string ref_path = need_string(request, "reference");
  const std::string lab_path = need_string(request, "labels");
  const std::string ecg_path = need_string(request, "ecg");
  const std::string out = need_string(request, "out");
  need_file(flow_path, "flow checkpoint");
  need_file(ecg_path, "ECG file");

  Json flow_meta;
  const VelocityNet net = read_velocity_net(flow_path, &flow_meta);
  // The ECG pipeline and REA ablation must match what the model was trained with.
  EcgPrepConfig ec;
  bool zero_rea = false;
  if (flow_meta.is_object() && flow_meta.contains("config")) {
    const Json& fcfg = flow_meta["config"];
    if (fcfg.contains("ecg")) ec = ecg_config_from_json(fcfg["ecg"]);
  }
  if (flow_meta.is_object() && flow_meta.contains("zero_rea")) zero_rea = flow_meta["zero_rea"].get<bool>();

  const Volume3D ref = read_reference_volume(ref_path);
  const LabelVolume lab = read_reference_labels(lab_path);
  require_same_grid(ref.grid, lab.grid, "infer reference labels");
  require(ref.grid.dims == net.config().domain_dims, ErrorCode::shape,
          "reference dimensions do not match the flow model's training grid");
  const EcgSummary es = summarize_ecg(read_ecg(ecg_path, ec.sample_rate_hz), ec);
  ConditionEmbedding cond{es.embedding, rea_features(ref)};
  if (zero_rea) std::fill(cond.c_rea.begin(), cond.c_rea.end(), 0.0);

  const std::vector<double> times = uniform_frame_times(ic.frames);
  say(log, "infer: integrating " + std::to_string(ic.frames) + " frames with " + ode_solver_name(ic.solver));
  const DeformationSet defs = ode_integrate(net, cond, ref.grid, times, ic.solver, ic.substeps);
  const Synthesis syn = synthesize_4d(ref, lab, defs);
  const FunctionalIndices fi = functional_indices(syn.labels, times, es.cycle.rr_seconds);
  const std::vector<double> topo = topology_report(defs);

  Json resolved = {{"inference", to_json(ic)}, {"ecg", to_json(ec)}, {"seed", seed}};
  Json resp = base_response("infer", resolved, seed);
  resp["flow"] = flow_path;
  resp["reference"] = ref_path;
  resp["labels"] = lab_path;
  resp["ecg"] = ecg_path;
  resp["zero_rea"] = zero_rea;
  resp["rr_seconds"] = es.cycle.rr_seconds;
  resp["functional_indices"] = indices_json(fi);
  resp["topology_positive_fraction"] = topo;

  fs::create_directories(out);
  const Json meta = {{"command", "infer"}, {"seed", seed}, {"config", resolved}, {"flow", flow_path}};
  write_volume((fs::path(out) / kCine).string(), syn.volumes, meta);
  write_label_sequence((fs::path(out) / kLabels).string(), syn.labels, times, meta);
  if (ic.save_defs) write_checkpoint((fs::path(out) / "defs.ckpt").string(), defs, meta);
  write_json((fs::path(out) / "summary.json").string(), resp);
  resp["output"] = out;
  return resp;
}

// ---------------------------------------------------------------- evaluate

namespace {

double rr_for_dir(const fs::path& real, const fs::path& gen, const EcgPrepConfig& ec, std::string& source) {
  if (fs::exists(real / kEcg)) {
    source = (real / kEcg).string();
    return summarize_ecg(read_ecg(source, ec.sample_rate_hz), ec).cycle.rr_seconds;
  }
  if (fs::exists(gen / "summary.json")) {
    const Json s = Json::parse(read_file((gen / "summary.json").string()));
    if (s.contains("rr_seconds")) {
      source = (gen / "summary.json").string();
      return s["rr_seconds"].get<double>();
    }
  }
  source = "default";
  return 1.0;
}

}  // namespace

Json run_evaluate(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  const EcgPrepConfig ec = ecg_config_from_json(sub(cfg, "ecg"));
  const AnalysisConfig ac = analysis_config_from_json(sub(cfg, "analysis"));
  const fs::path real_dir = need_string(request, "real");
  const fs::path gen_dir = need_string(request, "gen");
  for (const fs::path& d : {real_dir, gen_dir}) {
    need_cvol((d / kCine).string(), "cine volume");
    need_cvol((d / kLabels).string(), "label sequence");
  }
  const Volume4D real = read_volume4d((real_dir / kCine).string());
  const Volume4D gen = read_volume4d((gen_dir / kCine).string());
  const auto real_lab = read_label_sequence((real_dir / kLabels).string());
  const auto gen_lab = read_label_sequence((gen_dir / kLabels).string());
  require(real.frame_count() == gen.frame_count(), ErrorCode::shape,
          "real and generated sequences have " + std::to_string(real.frame_count()) + " and " +
              std::to_string(gen.frame_count()) + " frames; infer with a matching --frames");
  require(real_lab.size() == real.frame_count() && gen_lab.size() == gen.frame_count(), ErrorCode::shape,
          "label sequences must match their cine frame counts");
  require_same_grid(real.grid(), gen.grid(), "evaluate");

  say(log, "evaluate: " + std::to_string(real.frame_count()) + " frames");
  const std::size_t T = real.frame_count();
  Json per_frame = Json::array();
  double ssim_sum = 0.0, psnr_sum = 0.0;
  std::array<double, 3> dice_sum{}, iou_sum{}, hd_sum{};
  std::array<std::size_t, 3> hd_n{};
  for (std::size_t k = 0; k < T; ++k) {
    Json f = {{"frame", k}, {"t", real.frame_times[k]}};
    const double s = ssim(real.frames[k], gen.frames[k]);
    const double p = psnr(real.frames[k], gen.frames[k]);
    f["ssim"] = s;
    f["psnr_db"] = p;
    ssim_sum += s;
    psnr_sum += p;
    for (int ci = 0; ci < 3; ++ci) {
      const int cls = kForegroundClasses[ci];
      const Overlap o = dice_iou(gen_lab[k], real_lab[k], cls);
      Json cj = {{"dice", o.dice}, {"iou", o.iou}, {"hd95_mm", nullptr}};
      dice_sum[ci] += o.dice;
      iou_sum[ci] += o.iou;
      try {
        const double h = hd95(class_mask(gen_lab[k], cls), class_mask(real_lab[k], cls), SurfaceMode::surface3d);
        cj["hd95_mm"] = h;
        hd_sum[ci] += h;
        ++hd_n[ci];
      } catch (const Error& e) {
        if (e.code() != ErrorCode::undefined_distance) throw;
      }
      f[label_class_name(cls)] = cj;
    }
    per_frame.push_back(f);
  }
  Json mean = {{"ssim", ssim_sum / T}, {"psnr_db", psnr_sum / T}};
  for (int ci = 0; ci < 3; ++ci)
    mean[label_class_name(kForegroundClasses[ci])] = {
        {"dice", dice_sum[ci] / T}, {"iou", iou_sum[ci] / T}, {"hd95_mm", hd_n[ci] ? Json(hd_sum[ci] / hd_n[ci]) : Json()}};
  const MotionMetrics mm = motion_metrics(real, gen);

  std::string rr_source;
  const double rr = rr_for_dir(real_dir, gen_dir, ec, rr_source);
  const FunctionalIndices fr = functional_indices(real_lab, real.frame_times, rr, ac.anchor);
  const FunctionalIndices fg = functional_indices(gen_lab, gen.frame_times, rr, ac.anchor);
  const auto r = curve_correlation(fr, fg);
  const std::size_t es = fr.es_frame;
  const Overlap es_lv = dice_iou(gen_lab[es], real_lab[es], kLV);

  Json resolved = {{"ecg", to_json(ec)}, {"analysis", to_json(ac)}, {"seed", seed}};
  Json resp = base_response("evaluate", resolved, seed);
  resp["real"] = real_dir.string();
  resp["gen"] = gen_dir.string();
  resp["frames"] = per_frame;
  resp["mean"] = mean;
  resp["motion"] = {{"m_corr", mm.m_corr}, {"m_ssim", mm.m_ssim}};
  resp["rr_seconds"] = rr;
  resp["rr_source"] = rr_source;
  resp["real_indices"] = indices_json(fr);
  resp["gen_indices"] = indices_json(fg);
  resp["curve_pearson_r"] = optional_json(r);
  resp["ef_abs_error"] = std::abs(fg.ef - fr.ef);
  resp["es_frame"] = es;
  resp["es_lv_dice"] = es_lv.dice;
  if (request.contains("out") && request.at("out").is_string()) {
    const std::string out = request.at("out").get<std::string>();
    write_json(out, resp);
    resp["output"] = out;
  }
  return resp;
}

// ---------------------------------------------------------------- analyze

Json run_analyze(const Json& request, const Log& log) {
  const Json cfg = resolve_config(request);
  const std::uint64_t seed = resolve_seed(request, cfg);
  const AnalysisConfig ac = analysis_config_from_json(sub(cfg, "analysis"));
  const EcgPrepConfig ec = ecg_config_from_json(sub(cfg, "ecg"));
  const std::string manifest = need_string(request, "manifest");
  const fs::path out = need_string(request, "out");
  need_file(manifest, "manifest");
  auto rows = read_manifest(manifest);
  std::vector<std::string> missing;
  for (auto& r : rows) {
    if (r.gen_labels_path.empty()) r.gen_labels_path = beside(r.volume_path, "gen/" + std::string(kLabels));
    if (!fs::exists(cvol_stem(r.gen_labels_path) + ".cvol.json")) missing.push_back(r.subject_id);
  }
  require(missing.empty(), ErrorCode::manifest,
          manifest + ": analyze needs generated labels (a gen_labels_path column or gen/" + kLabels +
              " beside the volume) for subjects: " + join(missing, ", "));

  struct Subject {
    const ManifestRow* row;
    FunctionalIndices real, gen;
    std::optional<double> r;
  };
  std::vector<Subject> subjects;
  std::vector<SliceProfile> profiles;
  std::vector<SweepCase> sweep_cases;
  std::string subjects_csv = "subject_id,category,spacing_x_mm,rr_seconds,index,real,gen\n";
  std::string curves_csv = "subject_id,category,frame,t,real_ml,gen_ml\n";
  std::string corr_csv = "subject_id,category,curve_pearson_r\n";

  for (const auto& row : rows) {
    std::vector<double> rt, gt;
    auto real_lab = read_label_sequence(row.labels_path, &rt);
    auto gen_lab = read_label_sequence(row.gen_labels_path, &gt);
    require(real_lab.size() == gen_lab.size(), ErrorCode::shape,
            "subject " + row.subject_id + ": real and generated label sequences differ in length");
    if (row.spacing_mm)
      for (auto* seq : {&real_lab, &gen_lab})
        for (auto& l : *seq) l.grid.spacing_mm = *row.spacing_mm;
    const double rr = summarize_ecg(read_ecg(row.ecg_path, ec.sample_rate_hz), ec).cycle.rr_seconds;
    Subject s{&row, functional_indices(real_lab, rt, rr, ac.anchor), functional_indices(gen_lab, rt, rr, ac.anchor), {}};
    s.r = curve_correlation(s.real, s.gen);
    say(log, "analyze: subject " + row.subject_id + " EF real " + num(s.real.ef) + " gen " + num(s.gen.ef));

    const std::string head = csv_escape(row.subject_id) + "," + csv_escape(row.category) + ",";
    const std::array<std::pair<const char*, std::pair<double, double>>, 5> idx{{
        {"edv_ml", {s.real.edv_ml, s.gen.edv_ml}},
        {"esv_ml", {s.real.esv_ml, s.gen.esv_ml}},
        {"sv_ml", {s.real.sv_ml, s.gen.sv_ml}},
        {"ef", {s.real.ef, s.gen.ef}},
        {"co_l_per_min", {s.real.co_l_per_min, s.gen.co_l_per_min}},
    }};
    for (const auto& [name, v] : idx)
      subjects_csv += head + num(real_lab[0].grid.spacing_mm[0]) + "," + num(rr) + "," + name + "," + num(v.first) + "," +
                      num(v.second) + "\n";
    for (std::size_t k = 0; k < rt.size(); ++k)
      curves_csv += head + std::to_string(k) + "," + num(rt[k]) + "," + num(s.real.volume_curve_ml[k]) + "," +
                    num(s.gen.volume_curve_ml[k]) + "\n";
    corr_csv += head + num(s.r) + "\n";

    profiles.push_back(slice_profile(gen_lab, real_lab, s.real.ed_frame, s.real.es_frame));
    sweep_cases.push_back({std::move(gen_lab), std::move(real_lab)});
    subjects.push_back(std::move(s));
  }

  // Per-category agreement and bootstrap of each functional index.
  std::map<std::string, std::vector<const Subject*>> by_cat;
  for (const auto& s : subjects) {
    by_cat[s.row->category].push_back(&s);
    by_cat["all"].push_back(&s);
  }
  std::string cat_csv =
      "category,index,n,mae,rmse,pearson,spearman,bootstrap_r_point,bootstrap_replicate_mean,bootstrap_ci_low,"
      "bootstrap_ci_high,bootstrap_missing,note\n";
  std::string boot_csv = "category,index,replicate,r\n";
  Json categories = Json::object();
  std::uint64_t boot_stream = 16;
  for (const auto& [cat, members] : by_cat) {
    const std::array<std::pair<const char*, double FunctionalIndices::*>, 5> fields{{
        {"edv_ml", &FunctionalIndices::edv_ml},
        {"esv_ml", &FunctionalIndices::esv_ml},
        {"sv_ml", &FunctionalIndices::sv_ml},
        {"ef", &FunctionalIndices::ef},
        {"co_l_per_min", &FunctionalIndices::co_l_per_min},
    }};
    Json cj = Json::object();
    for (const auto& [name, ptr] : fields) {
      std::vector<double> a, b;
      for (const Subject* s : members) {
        a.push_back(s->real.*ptr);
        b.push_back(s->gen.*ptr);
      }
      const AgreementStats st = agreement(a, b);
      std::string line = csv_escape(cat) + "," + name + "," + std::to_string(st.n) + "," + num(st.mae) + "," +
                         num(st.rmse) + "," + num(st.pearson) + "," + num(st.spearman) + ",";
      Json ij = {{"n", st.n}, {"mae", st.mae}, {"rmse", st.rmse}, {"pearson", optional_json(st.pearson)},
                 {"spearman", optional_json(st.spearman)}};
      const std::uint64_t bseed = derive_seed(seed, boot_stream++);
      try {
        const BootstrapResult br = bootstrap_correlation(a, b, ac.bootstrap, bseed);
        line += num(br.r_point) + "," + num(br.replicate_mean) + "," + num(br.ci_low) + "," + num(br.ci_high) + "," +
                std::to_string(br.missing) + ",\n";
        ij["bootstrap"] = {{"r_point", br.r_point}, {"replicate_mean", br.replicate_mean}, {"ci_low", br.ci_low},
                           {"ci_high", br.ci_high}, {"missing", br.missing}, {"seed", bseed}};
        for (std::size_t i = 0; i < br.replicates.size(); ++i)
          boot_csv += csv_escape(cat) + "," + name + "," + std::to_string(i) + "," + num(br.replicates[i]) + "\n";
      } catch (const Error& e) {
        if (e.code() != ErrorCode::insufficient_data && e.code() != ErrorCode::degenerate_input) throw;
        line += ",,,,," + csv_escape(e.what()) + "\n";
        ij["bootstrap"] = nullptr;
        ij["bootstrap_note"] = e.what();
      }
      cat_csv += line;
      cj[name] = ij;
    }
    categories[cat] = cj;
  }

  // Slice-wise profile over subjects.
  const SliceProfile agg = aggregate_slice_profiles(profiles);
  std::string slice_csv = "rank,phase,class,subjects,dice,iou,hd95_mm,hd95_count\n";
  for (const auto& r : agg.ranks)
    for (int ph = 0; ph < 2; ++ph)
      for (int ci = 0; ci < 3; ++ci)
        slice_csv += std::to_string(r.rank) + "," + (ph ? "ES" : "ED") + "," + label_class_name(kForegroundClasses[ci]) +
                     "," + std::to_string(r.subjects) + "," + num(r.dice[ph][ci]) + "," + num(r.iou[ph][ci]) + "," +
                     num(r.hd95[ph][ci]) + "," + std::to_string(r.hd95_count[ph][ci]) + "\n";

  // Resolution sweep.
  const ResolutionSweep sweep = resolution_sweep(sweep_cases, ac.bins);
  static const char* metric_names[kSweepMetricCount] = {"dice", "iou", "hd95_mm"};
  std::string bins_csv = "bin,lo_mm,hi_mm,count,metric,class,mean,std\n";
  for (std::size_t b = 0; b < sweep.bins.size(); ++b)
    for (int m = 0; m < kSweepMetricCount; ++m)
      for (int ci = 0; ci < 3; ++ci)
        bins_csv += std::to_string(b) + "," + num(sweep.bins[b].lo) + "," + num(sweep.bins[b].hi) + "," +
                    std::to_string(sweep.bins[b].count) + "," + metric_names[m] + "," +
                    label_class_name(kForegroundClasses[ci]) + "," + num(sweep.bins[b].mean[m][ci]) + "," +
                    num(sweep.bins[b].stddev[m][ci]) + "\n";
  std::string slope_csv = "metric,class,slope_per_mm\n";
  for (int m = 0; m < kSweepMetricCount; ++m)
    for (int ci = 0; ci < 3; ++ci)
      slope_csv += std::string(metric_names[m]) + "," + label_class_name(kForegroundClasses[ci]) + "," +
                   (sweep.slope ? num((*sweep.slope)[m][ci]) : std::string()) + "\n";
  std::string cases_csv = "subject_id,spacing_x_mm,bin,metric,class,value\n";
  for (std::size_t i = 0; i < sweep.cases.size(); ++i)
    for (int m = 0; m < kSweepMetricCount; ++m)
      for (int ci = 0; ci < 3; ++ci)
        cases_csv += csv_escape(subjects[i].row->subject_id) + "," + num(sweep.cases[i].spacing_x) + "," +
                     std::to_string(sweep.cases[i].bin) + "," + metric_names[m] + "," +
                     label_class_name(kForegroundClasses[ci]) + "," + num(sweep.cases[i].value[m][ci]) + "\n";

  fs::create_directories(out);
  const std::vector<std::pair<const char*, const std::string*>> files{
      {"subjects.csv", &subjects_csv},       {"curves.csv", &curves_csv},         {"curve_correlation.csv", &corr_csv},
      {"categories.csv", &cat_csv},          {"bootstrap_replicates.csv", &boot_csv}, {"slice_profile.csv", &slice_csv},
      {"resolution_bins.csv", &bins_csv},    {"resolution_slopes.csv", &slope_csv}, {"resolution_cases.csv", &cases_csv}};
  Json outputs = Json::array();
  for (const auto& [name, text] : files) {
    write_file_atomic((out / name).string(), *text);
    outputs.push_back((out / name).string());
  }

  Json resolved = {{"analysis", to_json(ac)}, {"ecg", to_json(ec)}, {"seed", seed}};
  Json resp = base_response("analyze", resolved, seed);
  resp["manifest"] = manifest;
  resp["subjects"] = subjects.size();
  resp["categories"] = categories;
  Json corr = Json::object();
  for (const auto& s : subjects) corr[s.row->subject_id] = optional_json(s.r);
  resp["curve_pearson_r"] = corr;
  resp["outputs"] = outputs;
  write_json((out / "analysis.json").string(), resp);
  resp["output"] = out.string();
  return resp;
}

Json run_command(const std::string& name, const Json& request, const Log& log) {
  if (name == "phantom") return run_phantom(request, log);
  if (name == "ecg-prep") return run_ecg_prep(request, log);
  if (name == "register") return run_register(request, log);
  if (name == "train-flow") return run_train_flow(request, log);
  if (name == "infer") return run_infer(request, log);
  if (name == "evaluate") return run_evaluate(request, log);
  if (name == "analyze") return run_analyze(request, log);
  fail(ErrorCode::invalid_argument, "unknown command '" + name + "'");
}

}  // namespace cof::pipeline
