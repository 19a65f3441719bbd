#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "cof/analysis.hpp"
#include "cof/flowmatch.hpp"
#include "cof/io.hpp"
#include "cof/phantom.hpp"
#include "cof/toppr.hpp"
#include "cof/twin.hpp"

/// Command-level orchestration shared by the C API and the CLI. Every command
/// takes a JSON request and returns a JSON response that echoes the resolved
/// configuration and seed.
///
/// Request keys common to all commands:
///   config_path  optional JSON config file
///   config       optional inline config, merge-patched over the file
///   seed         optional; falls back to config.seed, then $COF_SEED, then 0
namespace cof::pipeline {

using Log = std::function<void(const std::string&)>;

struct InferenceConfig {
  std::size_t frames = 50;
  OdeSolver solver = OdeSolver::rk4;
  int substeps = 2;
  bool save_defs = false;
};

struct EcgPrepConfig {
  double sample_rate_hz = kDefaultSampleRateHz;
  std::size_t phase_samples = kDefaultPhaseSamples;
  long cycle = -1;  // -1 selects the median cycle
};

struct FlowConfig {
  VelocityNetConfig network;
  FlowTrainConfig training;
  bool mask_foreground = true;
  int mask_dilation = 2;
  bool zero_rea = false;
};

struct AnalysisConfig {
  int bins = 4;
  int bootstrap = 1000;
  EdvAnchor anchor = EdvAnchor::first_frame;
};

Json to_json(const RegConfig& c);
Json to_json(const FlowConfig& c);
Json to_json(const InferenceConfig& c);
Json to_json(const EcgPrepConfig& c);
Json to_json(const AnalysisConfig& c);

// Unknown keys and wrongly typed values are invalid_argument errors.
RegConfig reg_config_from_json(const Json& j, RegConfig base = {});
FlowConfig flow_config_from_json(const Json& j, FlowConfig base = {});
InferenceConfig inference_config_from_json(const Json& j, InferenceConfig base = {});
EcgPrepConfig ecg_config_from_json(const Json& j, EcgPrepConfig base = {});
AnalysisConfig analysis_config_from_json(const Json& j, AnalysisConfig base = {});

/// Resolved top-level config: file, then inline patch.
Json resolve_config(const Json& request);
std::uint64_t resolve_seed(const Json& request, const Json& config);

/// Median (or chosen) cycle of a recording and its embedding.
struct EcgSummary {
  std::vector<std::size_t> peaks;
  CardiacCycle cycle;
  std::vector<double> embedding;
};
EcgSummary summarize_ecg(const EcgRecord& rec, const EcgPrepConfig& cfg);

Json run_phantom(const Json& request, const Log& log = {});
Json run_ecg_prep(const Json& request, const Log& log = {});
Json run_register(const Json& request, const Log& log = {});
Json run_train_flow(const Json& request, const Log& log = {});
Json run_infer(const Json& request, const Log& log = {});
Json run_evaluate(const Json& request, const Log& log = {});
Json run_analyze(const Json& request, const Log& log = {});

/// Dispatch by command name ("phantom", "ecg-prep", "register", "train-flow",
/// "infer", "evaluate", "analyze").
Json run_command(const std::string& name, const Json& request, const Log& log = {});

}  // namespace cof::pipeline
