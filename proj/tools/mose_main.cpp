// Command-line front end. Links against the shared library through the C
// interface in mose/mose_c.h; all numerical work happens behind it.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mose/mose_c.h"

namespace {

using nlohmann::json;

struct PolicyFlags {
  std::string policy = "uniform";
  double width = 1.0;
  std::string gamma = "1.0";  // number or sidecar file
  std::string gamma_variant = "shared";
  double budget = 0.0;
  bool discretize = true;
  int k_override = 0;
};

[[noreturn]] void die(mose_status status) {
  const json err{{"error", {{"code", mose_status_name(status)}, {"message", mose_last_error()}}}};
  std::fprintf(stderr, "%s\n", err.dump().c_str());
  std::exit(1);
}

void check(mose_status status) {
  if (status != MOSE_OK) die(status);
}

[[noreturn]] void die_msg(const std::string& code, const std::string& message) {
  const json err{{"error", {{"code", code}, {"message", message}}}};
  std::fprintf(stderr, "%s\n", err.dump().c_str());
  std::exit(1);
}

// --gamma accepts a literal number or a sidecar JSON written by `ttt`.
std::vector<double> parse_gamma(const std::string& arg, bool layerwise, int n_layers) {
  try {
    size_t used = 0;
    const double value = std::stod(arg, &used);
    if (used == arg.size()) {
      return std::vector<double>(layerwise ? static_cast<size_t>(n_layers) : 1, value);
    }
  } catch (const std::exception&) {
    // fall through to file handling
  }
  std::ifstream in(arg);
  if (!in) die_msg("io", "cannot open gamma file: " + arg);
  json j;
  try {
    in >> j;
    return j.at("gamma_values").get<std::vector<double>>();
  } catch (const json::exception& e) {
    die_msg("format", "bad gamma file " + arg + ": " + e.what());
  }
}

struct BuiltPolicy {
  mose_policy policy{};
  std::vector<double> gamma_storage;
};

BuiltPolicy build_policy(const PolicyFlags& flags, const mose_run* run) {
  BuiltPolicy out;
  mose_policy& p = out.policy;
  p.k_override = flags.k_override;
  p.discretize = flags.discretize ? 1 : 0;
  if (flags.policy == "uniform") {
    p.mode = MOSE_POLICY_UNIFORM;
    p.width = flags.width;
    return out;
  }
  if (flags.policy != "routercond") {
    die_msg("invalid_arg", "--policy must be uniform or routercond");
  }
  p.mode = MOSE_POLICY_ROUTER_CONDITIONED;
  p.layerwise = flags.gamma_variant == "layerwise" ? 1 : 0;
  p.budget = flags.budget > 0.0 ? flags.budget : static_cast<double>(mose_run_top_k(run));
  out.gamma_storage = parse_gamma(flags.gamma, p.layerwise != 0, mose_run_n_layers(run));
  p.gamma = out.gamma_storage.data();
  p.gamma_count = static_cast<int>(out.gamma_storage.size());
  return out;
}

json policy_json(const PolicyFlags& flags, const BuiltPolicy& built) {
  json j{{"mode", flags.policy}};
  if (flags.policy == "uniform") {
    j["width"] = built.policy.width;
  } else {
    j["budget"] = built.policy.budget;
    j["gamma_variant"] = flags.gamma_variant;
    j["gamma_values"] = built.gamma_storage;
    j["discretize"] = flags.discretize;
  }
  if (flags.k_override > 0) j["k_override"] = flags.k_override;
  return j;
}

mose_run* load_run(const std::string& config_path, uint64_t seed, bool seed_set,
                   const std::string& out_dir) {
  mose_run* run = nullptr;
  check(mose_run_load(config_path.c_str(), &run));
  if (seed_set) check(mose_run_set_seed(run, seed));
  if (!out_dir.empty()) check(mose_run_set_out_dir(run, out_dir.c_str()));
  return run;
}

mose_model* load_checkpoint(const std::string& flag_path, const mose_run* run) {
  std::string path = flag_path;
  if (path.empty()) path = mose_run_checkpoint_path(run);
  if (path.empty()) die_msg("invalid_arg", "--checkpoint required (or set paths.checkpoint)");
  mose_model* model = nullptr;
  check(mose_model_load(path.c_str(), &model));
  check(mose_model_check_config(model, run));
  return model;
}

mose_corpus* open_corpus(const mose_run* run) {
  const std::string path = mose_run_corpus_path(run);
  if (path.empty()) die_msg("invalid_arg", "config paths.corpus is required for this command");
  mose_corpus* corpus = nullptr;
  check(mose_corpus_open(path.c_str(), run, &corpus));
  return corpus;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoSE laboratory: train and evaluate slimmable-expert language models"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  PolicyFlags flags;
  double ttt_budget = 1.0;
  std::vector<double> budgets;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config JSON")->required();
    cmd->add_option("--seed", seed, "override the run seed")->each([&](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--out", out_dir, "output directory override");
  };
  auto add_policy = [&](CLI::App* cmd) {
    cmd->add_option("--policy", flags.policy, "uniform | routercond");
    cmd->add_option("--width", flags.width, "uniform width in [w_min, 1]");
    cmd->add_option("--gamma", flags.gamma, "sharpness value or sidecar JSON file");
    cmd->add_option("--gamma-variant", flags.gamma_variant, "shared | layerwise");
    cmd->add_option("--budget", flags.budget, "width budget in full-expert units");
    cmd->add_option("--k-override", flags.k_override, "activate fewer experts at inference");
    cmd->add_flag("--discretize,!--no-discretize", flags.discretize,
                  "snap router-conditioned widths to the grid");
  };

  CLI::App* cmd_train = app.add_subcommand("train", "pre-train a MoSE model");
  add_common(cmd_train);

  CLI::App* cmd_eval = app.add_subcommand("eval", "held-out evaluation under a width policy");
  add_common(cmd_eval);
  add_policy(cmd_eval);
  cmd_eval->add_option("--checkpoint", checkpoint_path, "model checkpoint");

  CLI::App* cmd_ttt = app.add_subcommand("ttt", "calibrate the sharpness parameter");
  add_common(cmd_ttt);
  cmd_ttt->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  cmd_ttt->add_option("--budget", ttt_budget, "width budget")->required();
  cmd_ttt->add_option("--gamma-variant", flags.gamma_variant, "shared | layerwise");

  CLI::App* cmd_sweep = app.add_subcommand("sweep", "budget x mode frontier sweep");
  add_common(cmd_sweep);
  cmd_sweep->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  cmd_sweep->add_option("--budgets", budgets, "comma-separated width budgets")
      ->required()
      ->delimiter(',');

  CLI::App* cmd_flops = app.add_subcommand("flops", "analytic FLOPs report (no weights)");
  add_common(cmd_flops);
  add_policy(cmd_flops);

  CLI11_PARSE(app, argc, argv);

  mose_run* run = load_run(config_path, seed, seed_set, out_dir);
  const std::string out = mose_run_out_dir(run);

  if (cmd_train->parsed()) {
    mose_model* model = nullptr;
    check(mose_model_init(run, &model));
    mose_corpus* corpus = open_corpus(run);
    check(mose_train(model, corpus, run, nullptr));
    std::printf("%s\n",
                json{{"checkpoint", out + "/checkpoint_final.mose"},
                     {"train_log", out + "/train_log.csv"}}
                    .dump()
                    .c_str());
    mose_corpus_free(corpus);
    mose_model_free(model);
  } else if (cmd_eval->parsed()) {
    mose_model* model = load_checkpoint(checkpoint_path, run);
    mose_corpus* corpus = open_corpus(run);
    BuiltPolicy built = build_policy(flags, run);
    mose_eval_result result{};
    check(mose_evaluate(model, corpus, &built.policy, &result));
    json point{{"policy", policy_json(flags, built)},
               {"mflops_per_token", result.mflops_per_token},
               {"perplexity", result.perplexity},
               {"accuracy", result.accuracy},
               {"nll", result.nll},
               {"dropped_token_rate", result.dropped_rate},
               {"flops",
                {{"moe_mflops", result.moe_mflops},
                 {"attention_mflops", result.attention_mflops},
                 {"other_mflops", result.other_mflops},
                 {"total_mflops", result.mflops_per_token}}}};
    std::filesystem::create_directories(out);
    std::ofstream(out + "/eval_point.json") << point.dump(2) << "\n";
    std::printf("%s\n", point.dump().c_str());
    mose_corpus_free(corpus);
    mose_model_free(model);
  } else if (cmd_ttt->parsed()) {
    mose_model* model = load_checkpoint(checkpoint_path, run);
    mose_corpus* corpus = open_corpus(run);
    const bool layerwise = flags.gamma_variant == "layerwise";
    std::vector<double> gamma(static_cast<size_t>(std::max(1, mose_run_n_layers(run))));
    int count = 0;
    double calib_loss = 0.0;
    check(mose_calibrate_gamma(model, corpus, run, ttt_budget, layerwise ? 1 : 0, gamma.data(),
                               static_cast<int>(gamma.size()), &count, &calib_loss));
    gamma.resize(static_cast<size_t>(count));
    const json sidecar{{"variant", flags.gamma_variant},
                       {"budget", ttt_budget},
                       {"gamma_values", gamma},
                       {"calib_loss", calib_loss}};
    char name[128];
    std::snprintf(name, sizeof(name), "/gamma_%s_%.4g.json", flags.gamma_variant.c_str(),
                  ttt_budget);
    std::filesystem::create_directories(out);
    std::ofstream(out + name) << sidecar.dump(2) << "\n";
    std::printf("%s\n", sidecar.dump().c_str());
    mose_corpus_free(corpus);
    mose_model_free(model);
  } else if (cmd_sweep->parsed()) {
    mose_model* model = load_checkpoint(checkpoint_path, run);
    mose_corpus* corpus = open_corpus(run);
    std::filesystem::create_directories(out);
    const std::string csv = out + "/sweep.csv";
    check(mose_sweep(model, corpus, run, budgets.data(), static_cast<int>(budgets.size()),
                     csv.c_str()));
    std::printf("%s\n", json{{"sweep_csv", csv}, {"budgets", budgets}}.dump().c_str());
    mose_corpus_free(corpus);
    mose_model_free(model);
  } else if (cmd_flops->parsed()) {
    BuiltPolicy built = build_policy(flags, run);
    char buffer[1024];
    check(mose_flops(run, &built.policy, buffer, sizeof(buffer)));
    std::printf("%s\n", buffer);
  }

  mose_run_free(run);
  return 0;
}
