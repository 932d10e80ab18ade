// Command-line front end. Talks to the library only through the C API.
//
// Exit codes: 0 success, 1 failure (error or failed check), 2 usage error.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "gseg/gseg.h"

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct ConfigDeleter {
  void operator()(gseg_config* c) const { gseg_config_free(c); }
};
struct NetDeleter {
  void operator()(gseg_net* n) const { gseg_net_free(n); }
};
using ConfigPtr = std::unique_ptr<gseg_config, ConfigDeleter>;
using NetPtr = std::unique_ptr<gseg_net, NetDeleter>;

// Thrown by check() after the message has been printed.
struct Failure {};

void check(gseg_status status, const std::string& what) {
  if (status == GSEG_OK) return;
  std::fprintf(stderr, "error: %s: %s (%s)\n", what.c_str(), gseg_last_error(),
               gseg_status_name(status));
  throw Failure{};
}

ConfigPtr load_config(const std::string& path) {
  gseg_config* raw = nullptr;
  check(gseg_config_load(path.c_str(), &raw), "loading config '" + path + "'");
  return ConfigPtr(raw);
}

NetPtr load_net(const std::string& path) {
  gseg_net* raw = nullptr;
  check(gseg_net_load(path.c_str(), &raw), "loading model '" + path + "'");
  return NetPtr(raw);
}

std::int64_t param_count(const gseg_config* config) {
  gseg_net* raw = nullptr;
  check(gseg_net_create(config, 0, &raw), "building network");
  NetPtr net(raw);
  std::int64_t n = 0;
  check(gseg_net_param_count(net.get(), &n), "counting parameters");
  return n;
}

void print_check(const gseg_check_result* r, void*) {
  std::printf("%-40s max_error=%.3e tol=%.1e %s\n", r->name, r->max_error, r->tolerance,
              r->passed ? "PASS" : "FAIL");
  std::fflush(stdout);
}

void print_epoch(const gseg_epoch_log* log, void* user) {
  std::FILE* csv = static_cast<std::FILE*>(user);
  const gseg_metrics& m = log->val;
  std::printf("%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", log->epoch, log->lr, log->train_loss,
              m.ja, m.di, m.ac, m.se, m.sp);
  std::fflush(stdout);
  if (csv != nullptr)
    std::fprintf(csv, "%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", log->epoch, log->lr,
                 log->train_loss, m.ja, m.di, m.ac, m.se, m.sp);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-equivariant (p4/p4m) segmentation networks", "gseg"};
  app.require_subcommand(1, 1);

  int n = 0, size = 0;
  std::uint64_t seed = 1;
  std::string out, data, config = "default", model, image, val, log_path;
  bool augment = false, pooled = false;
  int trials = 5;
  double tol = -1.0;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic lesion dataset");
  gen->add_option("--n", n, "Number of image/mask pairs")->required();
  gen->add_option("--size", size, "Image side (even, >= 32)")->required();
  gen->add_option("--seed", seed, "Generator seed")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a network and save it");
  train->add_option("--config", config, "Config file or 'default'")->required();
  train->add_option("--data", data, "Training data directory")->required();
  train->add_option("--out", out, "Model file to write")->required();
  train->add_flag("--augment", augment, "Random p4m transforms of each training sample");
  train->add_option("--val", val, "Validation directory for per-epoch metrics");
  train->add_option("--log", log_path, "Also write the per-epoch CSV here");

  auto* eval = app.add_subcommand("eval", "Segmentation metrics of a saved model");
  eval->add_option("--model", model, "Model file")->required();
  eval->add_option("--data", data, "Data directory")->required();
  eval->add_flag("--pooled", pooled, "Metrics of summed confusion counts instead of per-image mean");

  auto* predict = app.add_subcommand("predict", "Predict a binary mask for one image");
  predict->add_option("--model", model, "Model file")->required();
  predict->add_option("--image", image, "Input P6 image")->required();
  predict->add_option("--out", out, "Output P5 mask")->required();

  auto* equiv = app.add_subcommand("check-equivariance", "Layer and network equivariance audit");
  equiv->add_option("--config", config, "Config file or 'default'")->required();
  equiv->add_option("--trials", trials, "Random inputs per check")->check(CLI::PositiveNumber);
  equiv->add_option("--tol", tol, "Tolerance for every check (default 1e-10 layers, 1e-8 net)")
      ->check(CLI::PositiveNumber);
  equiv->add_option("--seed", seed, "Seed for the random inputs");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  grad->add_option("--config", config, "Config file or 'default'")->required();
  grad->add_option("--seed", seed, "Seed for inputs and weights")->required();

  auto* params = app.add_subcommand("params", "Parameter counts of the net and its plain twin");
  params->add_option("--config", config, "Config file or 'default'")->required();

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const CLI::App* sub : app.get_subcommands({})) known = known || sub->get_name() == argv[1];
    if (!known) {
      std::fprintf(stderr, "unknown subcommand '%s'\n\n%s", argv[1], app.help().c_str());
      return kUsage;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (e.get_exit_code() != 0) std::fprintf(stderr, "\n%s", app.help().c_str());
    return kUsage;
  }

  try {
    if (*gen) {
      check(gseg_generate_dataset(n, size, seed, out.c_str()), "generating dataset");
      std::printf("wrote %d samples to %s\n", n, out.c_str());
      return kOk;
    }

    if (*train) {
      ConfigPtr cfg = load_config(config);
      if (augment) check(gseg_config_set(cfg.get(), "augment", "true"), "enabling augmentation");
      std::FILE* csv = nullptr;
      if (!log_path.empty()) {
        csv = std::fopen((log_path + ".tmp").c_str(), "w");
        if (csv == nullptr) {
          std::fprintf(stderr, "error: cannot open '%s' for writing\n", log_path.c_str());
          return kFailed;
        }
      }
      std::printf("epoch,lr,train_loss,JA,DI,AC,SE,SP\n");
      gseg_net* raw = nullptr;
      const gseg_status status = gseg_train(cfg.get(), data.c_str(),
                                            val.empty() ? nullptr : val.c_str(), print_epoch, csv,
                                            &raw);
      NetPtr net(raw);
      const gseg_status saved = status == GSEG_OK ? gseg_net_save(net.get(), out.c_str()) : status;
      if (csv != nullptr) std::fclose(csv);
      if (saved != GSEG_OK && csv != nullptr) std::remove((log_path + ".tmp").c_str());
      check(status, "training");
      check(saved, "saving model");
      if (csv != nullptr && std::rename((log_path + ".tmp").c_str(), log_path.c_str()) != 0) {
        std::fprintf(stderr, "error: cannot write '%s'\n", log_path.c_str());
        return kFailed;
      }
      return kOk;
    }

    if (*eval) {
      NetPtr net = load_net(model);
      gseg_metrics m{};
      check(gseg_evaluate(net.get(), data.c_str(), pooled ? 1 : 0, &m), "evaluating");
      std::printf("JA %.6f\nDI %.6f\nAC %.6f\nSE %.6f\nSP %.6f\n", m.ja, m.di, m.ac, m.se, m.sp);
      return kOk;
    }

    if (*predict) {
      NetPtr net = load_net(model);
      check(gseg_net_predict_file(net.get(), image.c_str(), out.c_str()), "predicting");
      return kOk;
    }

    if (*equiv) {
      ConfigPtr cfg = load_config(config);
      const double layer_tol = tol > 0 ? tol : 1e-10;
      const double net_tol = tol > 0 ? tol : 1e-8;
      int passed = 0;
      check(gseg_check_equivariance(cfg.get(), trials, layer_tol, net_tol, seed, print_check,
                                    nullptr, &passed),
            "equivariance check");
      std::printf("%s\n", passed ? "all checks passed" : "equivariance check FAILED");
      return passed ? kOk : kFailed;
    }

    if (*grad) {
      ConfigPtr cfg = load_config(config);
      int passed = 0;
      check(gseg_gradcheck(cfg.get(), seed, 1e-4, print_check, nullptr, &passed), "gradcheck");
      std::printf("%s\n", passed ? "all checks passed" : "gradient check FAILED");
      return passed ? kOk : kFailed;
    }

    if (*params) {
      ConfigPtr cfg = load_config(config);
      gseg_config* twin_raw = nullptr;
      check(gseg_config_plain_twin(cfg.get(), &twin_raw), "building plain twin");
      ConfigPtr twin(twin_raw);
      const std::int64_t a = param_count(cfg.get());
      const std::int64_t b = param_count(twin.get());
      std::printf("equivariant %lld\nplain %lld\nratio %.4f\n", static_cast<long long>(a),
                  static_cast<long long>(b), static_cast<double>(a) / static_cast<double>(b));
      return kOk;
    }
  } catch (const Failure&) {
    return kFailed;
  }
  return kUsage;
}
