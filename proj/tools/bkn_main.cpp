// bkn: train, compare, gradcheck and vargap front end over the C interface.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bkn/bkn.h"

namespace {

// Exit codes: 0 success, 2 configuration, 3 numeric failure, 4 I/O.
int exit_code(bkn_status s) {
  switch (s) {
    case BKN_OK: return 0;
    case BKN_ERR_CONFIG:
    case BKN_ERR_DIMENSION:
    case BKN_ERR_INVALID_ARGUMENT: return 2;
    case BKN_ERR_NUMERIC: return 3;
    case BKN_ERR_IO: return 4;
    default: return 1;
  }
}

int fail(bkn_status s) {
  std::fprintf(stderr, "bkn: %s\n", bkn_last_error());
  return exit_code(s);
}

void print_owned(char* text) {
  if (!text) return;
  std::fputs(text, stdout);
  bkn_string_free(text);
}

struct TrainArgs {
  std::string config;
  std::string preset;
  std::string out;
  long long seed = -1;
  std::vector<std::string> overrides;
};

int run_train(const TrainArgs& a) {
  bkn_config cfg = nullptr;
  bkn_status s = a.preset.empty() ? bkn_config_new(&cfg)
                                  : bkn_config_from_preset(a.preset.c_str(), &cfg);
  if (s != BKN_OK) return fail(s);
  auto finish = [&](bkn_status st) {
    const int code = st == BKN_OK ? 0 : fail(st);
    bkn_config_free(cfg);
    return code;
  };
  if (!a.config.empty() && (s = bkn_config_load(cfg, a.config.c_str())) != BKN_OK) return finish(s);
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "bkn: --set expects key=value, got '%s'\n", kv.c_str());
      bkn_config_free(cfg);
      return 2;
    }
    s = bkn_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
    if (s != BKN_OK) return finish(s);
  }
  if (a.seed >= 0 && (s = bkn_config_set(cfg, "seed", std::to_string(a.seed).c_str())) != BKN_OK) {
    return finish(s);
  }
  if (!a.out.empty() && (s = bkn_config_set(cfg, "out", a.out.c_str())) != BKN_OK) return finish(s);

  char* out_dir = nullptr;
  char* hash = nullptr;
  if ((s = bkn_config_get(cfg, "out", &out_dir)) != BKN_OK) return finish(s);
  if ((s = bkn_config_hash(cfg, &hash)) != BKN_OK) {
    bkn_string_free(out_dir);
    return finish(s);
  }
  std::printf("run %s  config %s\n", out_dir, hash);
  bkn_string_free(out_dir);
  bkn_string_free(hash);

  bkn_run_summary sum{};
  s = bkn_run_experiment(cfg, &sum);
  if (s == BKN_OK) {
    std::printf("steps %llu  passes %llu  loss %.4f  acc(moving) %.4f  acc(batch) %.4f  "
                "%.1f examples/sec\n",
                static_cast<unsigned long long>(sum.steps),
                static_cast<unsigned long long>(sum.passes), sum.final_train_loss,
                sum.final_acc_moving, sum.final_acc_batch, sum.examples_per_sec);
  }
  return finish(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch Kalman Normalization experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(bkn_version()));

  TrainArgs train;
  CLI::App* train_cmd = app.add_subcommand("train", "train the desk network");
  train_cmd->add_option("--config", train.config, "key=value or JSON config file");
  train_cmd->add_option("--preset", train.preset,
                        "256x4 | 256x1 | 64x8 | 16x4 | 8x2 | baseline (applied before --config)");
  train_cmd->add_option("--seed", train.seed, "overrides the config seed");
  train_cmd->add_option("--out", train.out, "run directory");
  train_cmd->add_option("--set", train.overrides, "extra key=value settings")->take_all();

  std::vector<std::string> compare_dirs;
  std::vector<double> thresholds;
  std::string compare_csv;
  CLI::App* compare_cmd = app.add_subcommand("compare", "align and compare finished runs");
  compare_cmd->add_option("dirs", compare_dirs, "run directories")->required()->expected(2, -1);
  compare_cmd->add_option("--threshold", thresholds, "accuracy thresholds for steps-to-threshold");
  compare_cmd->add_option("--csv", compare_csv, "write the aligned series here");

  std::string layer = "bkn";
  unsigned long long gc_seed = 1;
  std::string gc_csv;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of one layer");
  gc_cmd->add_option("--layer", layer, "bkn | bn | brn")
      ->check(CLI::IsMember({"bkn", "bn", "brn"}));
  gc_cmd->add_option("--seed", gc_seed, "instance seed");
  gc_cmd->add_option("--csv", gc_csv, "per-parameter report");

  std::string run_dir;
  CLI::App* vg_cmd = app.add_subcommand("vargap", "batch vs moving variance gap of a run");
  vg_cmd->add_option("--run", run_dir, "finished run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (train_cmd->parsed()) {
    if (train.config.empty() && train.preset.empty()) {
      std::fprintf(stderr, "bkn: train needs --config or --preset\n");
      return 2;
    }
    return run_train(train);
  }

  if (compare_cmd->parsed()) {
    std::vector<const char*> dirs;
    for (const std::string& d : compare_dirs) dirs.push_back(d.c_str());
    char* text = nullptr;
    const bkn_status s = bkn_compare_runs(
        dirs.data(), dirs.size(), thresholds.empty() ? nullptr : thresholds.data(),
        thresholds.size(), compare_csv.empty() ? nullptr : compare_csv.c_str(), &text);
    if (s != BKN_OK) return fail(s);
    print_owned(text);
    return 0;
  }

  if (gc_cmd->parsed()) {
    bkn_gradcheck_summary sum{};
    char* text = nullptr;
    const bkn_status s = bkn_gradcheck(layer.c_str(), gc_seed,
                                       gc_csv.empty() ? nullptr : gc_csv.c_str(), &sum, &text);
    if (s != BKN_OK) return fail(s);
    print_owned(text);
    std::printf("%s: max relative error %.3e (tolerance %.0e)\n", sum.passed ? "PASS" : "FAIL",
                sum.max_rel, sum.tolerance);
    return sum.passed ? 0 : 3;
  }

  if (vg_cmd->parsed()) {
    bkn_vargap_summary sum{};
    const bkn_status s = bkn_vargap(run_dir.c_str(), &sum);
    if (s != BKN_OK) return fail(s);
    std::printf("layers %zu  batches %zu  mean gap %.6g  max gap %.6g  (written to %s/vargap.csv)\n",
                sum.layers, sum.batches, sum.mean, sum.max, run_dir.c_str());
    return 0;
  }
  return 2;
}
