// Command-line front end. Talks to the engine only through the C interface.
#include <cstdio>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cof/cof.h"

using Json = nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void print_error(const char* status, const std::string& message) {
  const Json j = {{"ok", false}, {"error", {{"status", status}, {"message", message}}}};
  std::printf("%s\n", j.dump(2).c_str());
  std::fprintf(stderr, "error (%s): %s\n", status, message.c_str());
}

void log_to_stderr(const char* msg, void*) { std::fprintf(stderr, "%s\n", msg); }

// Sets j[path...] = value, creating intermediate objects.
template <typename T>
void put(Json& j, std::initializer_list<const char*> path, const T& value) {
  Json* cur = &j;
  for (const char* key : path) cur = &(*cur)[key];
  *cur = value;
}

struct Command {
  CLI::App* app = nullptr;
  Json request = Json::object();
  Json overrides = Json::object();
  std::map<std::string, std::string> paths;
  std::optional<std::uint64_t> seed;
  std::string config_path;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chain of Flow: ECG-driven 4D cardiac digital twins"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress messages on stderr");
  app.set_version_flag("--version", std::string(cof_version()));

  std::map<std::string, Command> cmds;
  const auto add = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
    c.app->add_option("--seed", c.seed, "root seed (falls back to config seed, then COF_SEED)");
    return c;
  };
  const auto path = [](Command& c, const std::string& flag, const std::string& key, const std::string& help,
                       bool required = true) {
    auto* opt = c.app->add_option(flag, c.paths[key], help);
    if (required) opt->required();
  };

  Command& phantom = add("phantom", "generate a phantom cohort");
  path(phantom, "--out", "out", "output directory");

  Command& ecg = add("ecg-prep", "detect R peaks, select a cycle and embed it");
  path(ecg, "--in", "in", "ECG CSV");
  path(ecg, "--out", "out", "output JSON", false);
  std::optional<double> ecg_rate;
  ecg.app->add_option("--sample-rate", ecg_rate, "sampling rate in Hz");

  Command& reg = add("register", "register every frame to the reference frame");
  path(reg, "--volume", "volume", "4D cine volume (.cvol)");
  path(reg, "--labels", "labels", "4D label sequence (.cvol)");
  path(reg, "--out", "out", "deformation checkpoint");
  std::optional<double> lambda_seg;
  std::optional<int> reg_iters;
  reg.app->add_option("--lambda-seg", lambda_seg, "segmentation loss weight");
  reg.app->add_option("--iters", reg_iters, "iteration cap per frame");

  Command& train = add("train-flow", "train the conditional velocity network");
  path(train, "--manifest", "manifest", "subject manifest CSV (defs_path column, else defs.ckpt beside each volume)");
  path(train, "--out", "out", "flow checkpoint");
  std::optional<int> flow_iters, flow_batch;
  bool zero_rea = false;
  train.app->add_option("--iters", flow_iters, "training iterations");
  train.app->add_option("--batch", flow_batch, "batch size");
  train.app->add_flag("--zero-rea", zero_rea, "zero the reference-anatomy condition");

  Command& infer = add("infer", "synthesize a 4D sequence from an ECG and a reference frame");
  path(infer, "--flow", "flow", "flow checkpoint");
  path(infer, "--reference", "reference", "reference volume (.cvol, 3D or 4D)");
  path(infer, "--labels", "labels", "reference labels (.cvol, 3D or 4D)");
  path(infer, "--ecg", "ecg", "ECG CSV");
  path(infer, "--out", "out", "output directory");
  std::optional<std::size_t> frames;
  std::optional<std::string> solver;
  std::optional<int> substeps;
  bool save_defs = false;
  infer.app->add_option("--frames", frames, "number of output frames (default 50)");
  infer.app->add_option("--solver", solver, "euler or rk4")->check(CLI::IsMember({"euler", "rk4"}));
  infer.app->add_option("--substeps", substeps, "integration steps per frame interval");
  infer.app->add_flag("--save-defs", save_defs, "also write the integrated deformations");

  Command& eval = add("evaluate", "compare generated and real sequences");
  path(eval, "--real", "real", "directory with cine.cvol and labels.cvol");
  path(eval, "--gen", "gen", "directory with cine.cvol and labels.cvol");
  path(eval, "--out", "out", "report JSON", false);

  Command& analyze = add("analyze", "cohort tables and plot data");
  path(analyze, "--manifest", "manifest", "manifest CSV (gen_labels_path column, else gen/labels.cvol beside each volume)");
  path(analyze, "--out", "out", "output directory");
  std::optional<int> bins, bootstrap;
  std::optional<std::string> anchor;
  analyze.app->add_option("--bins", bins, "resolution bins");
  analyze.app->add_option("--bootstrap", bootstrap, "bootstrap replicates");
  analyze.app->add_option("--edv-anchor", anchor, "first_frame or extrema")
      ->check(CLI::IsMember({"first_frame", "extrema"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return kExitUsage;
  }

  if (ecg_rate) put(ecg.overrides, {"ecg", "sample_rate_hz"}, *ecg_rate);
  if (lambda_seg) put(reg.overrides, {"registration", "lambda_seg"}, *lambda_seg);
  if (reg_iters) put(reg.overrides, {"registration", "iters"}, *reg_iters);
  if (flow_iters) put(train.overrides, {"flow", "training", "iters"}, *flow_iters);
  if (flow_batch) put(train.overrides, {"flow", "training", "batch"}, *flow_batch);
  if (zero_rea) put(train.overrides, {"flow", "zero_rea"}, true);
  if (frames) put(infer.overrides, {"inference", "frames"}, *frames);
  if (solver) put(infer.overrides, {"inference", "solver"}, *solver);
  if (substeps) put(infer.overrides, {"inference", "substeps"}, *substeps);
  if (save_defs) put(infer.overrides, {"inference", "save_defs"}, true);
  if (bins) put(analyze.overrides, {"analysis", "bins"}, *bins);
  if (bootstrap) put(analyze.overrides, {"analysis", "bootstrap"}, *bootstrap);
  if (anchor) put(analyze.overrides, {"analysis", "edv_anchor"}, *anchor);

  for (auto& [name, c] : cmds) {
    if (!c.app->parsed()) continue;
    Json& req = c.request;
    for (const auto& [key, value] : c.paths)
      if (!value.empty()) req[key] = value;
    if (!c.config_path.empty()) req["config_path"] = c.config_path;
    if (c.seed) req["seed"] = *c.seed;
    if (!c.overrides.empty()) req["config"] = c.overrides;

    char* response = nullptr;
    const cof_status st =
        cof_run_command(name.c_str(), req.dump().c_str(), quiet ? nullptr : log_to_stderr, nullptr, &response);
    if (st != COF_OK) {
      print_error(cof_status_name(st), cof_last_error());
      return st == COF_ERR_INVALID_ARGUMENT ? kExitUsage : kExitFailure;
    }
    Json out = Json::parse(response);
    cof_string_free(response);
    out["ok"] = true;
    std::printf("%s\n", out.dump(2).c_str());
    return 0;
  }
  return kExitUsage;
}
