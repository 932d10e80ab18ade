#include "gseg/gseg.h"

#include <algorithm>
#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <string>

#include "gseg/audit.hpp"
#include "gseg/error.hpp"
#include "gseg/io.hpp"

struct gseg_config {
  gseg::RunConfig value;
};

struct gseg_net {
  std::unique_ptr<gseg::SegNet> value;
};

namespace {

thread_local std::string last_error;

gseg_status status_of(gseg::ErrorKind kind) {
  switch (kind) {
    case gseg::ErrorKind::invalid_argument: return GSEG_ERR_INVALID_ARGUMENT;
    case gseg::ErrorKind::shape: return GSEG_ERR_SHAPE;
    case gseg::ErrorKind::io: return GSEG_ERR_IO;
    case gseg::ErrorKind::format: return GSEG_ERR_FORMAT;
    case gseg::ErrorKind::numeric: return GSEG_ERR_NUMERIC;
  }
  return GSEG_ERR_INTERNAL;
}

// Runs body, translating every exception into a status; nothing escapes the
// C boundary.
template <class F>
gseg_status guarded(F&& body) {
  try {
    last_error.clear();
    body();
    return GSEG_OK;
  } catch (const gseg::Error& e) {
    last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
    return GSEG_ERR_INTERNAL;
  } catch (const std::exception& e) {
    last_error = e.what();
    return GSEG_ERR_INTERNAL;
  } catch (...) {
    last_error = "unknown error";
    return GSEG_ERR_INTERNAL;
  }
}

void require_arg(const void* p, const char* what) {
  gseg::require(p != nullptr, gseg::ErrorKind::invalid_argument,
                std::string(what) + " must not be null");
}

gseg::SegNet& net_of(gseg_net* net) {
  require_arg(net, "net");
  require_arg(net->value.get(), "net");
  return *net->value;
}

// Smallest admissible square side >= floor.
int check_size(const gseg::SegNetConfig& config, int floor) {
  const int m = config.size_multiple();
  return std::max(m, (floor + m - 1) / m * m);
}

void report(gseg_check_fn fn, void* user, const gseg::CheckResult& r, int& all_passed) {
  if (!r.passed()) all_passed = 0;
  if (fn == nullptr) return;
  const gseg_check_result c{r.name.c_str(), r.max_error, r.tolerance, r.passed() ? 1 : 0};
  fn(&c, user);
}

gseg_metrics to_c(const gseg::Metrics& m) { return {m.ja, m.di, m.ac, m.se, m.sp}; }

}  // namespace

extern "C" {

const char* gseg_last_error(void) { return last_error.c_str(); }

const char* gseg_status_name(gseg_status status) {
  switch (status) {
    case GSEG_OK: return "ok";
    case GSEG_ERR_INVALID_ARGUMENT: return "invalid argument";
    case GSEG_ERR_SHAPE: return "shape mismatch";
    case GSEG_ERR_IO: return "i/o error";
    case GSEG_ERR_FORMAT: return "format error";
    case GSEG_ERR_NUMERIC: return "numeric error";
    case GSEG_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

gseg_status gseg_config_load(const char* path, gseg_config** out) {
  return guarded([&] {
    require_arg(path, "path");
    require_arg(out, "out");
    *out = new gseg_config{gseg::parse_config(path)};
  });
}

gseg_status gseg_config_set(gseg_config* config, const char* key, const char* value) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(key, "key");
    require_arg(value, "value");
    gseg::RunConfig next = config->value;
    gseg::apply_config_entry(next, key, value);
    next.net.validate();
    next.train.validate();
    config->value = next;
  });
}

gseg_status gseg_config_plain_twin(const gseg_config* config, gseg_config** out) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(out, "out");
    gseg::RunConfig twin = config->value;
    twin.net = twin.net.plain_twin();
    *out = new gseg_config{twin};
  });
}

gseg_status gseg_config_describe(const gseg_config* config, char* buffer, size_t size,
                                 size_t* len) {
  return guarded([&] {
    require_arg(config, "config");
    const std::string text = gseg::format_net_config(config->value.net);
    if (len != nullptr) *len = text.size();
    if (buffer != nullptr && size > 0) {
      const size_t n = std::min(size - 1, text.size());
      std::memcpy(buffer, text.data(), n);
      buffer[n] = '\0';
    }
  });
}

void gseg_config_free(gseg_config* config) { delete config; }

gseg_status gseg_net_create(const gseg_config* config, uint64_t seed, gseg_net** out) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(out, "out");
    *out = new gseg_net{std::make_unique<gseg::SegNet>(config->value.net, seed)};
  });
}

gseg_status gseg_net_load(const char* path, gseg_net** out) {
  return guarded([&] {
    require_arg(path, "path");
    require_arg(out, "out");
    *out = new gseg_net{gseg::load_model(path)};
  });
}

gseg_status gseg_net_save(gseg_net* net, const char* path) {
  return guarded([&] {
    require_arg(path, "path");
    gseg::save_model(net_of(net), path);
  });
}

void gseg_net_free(gseg_net* net) { delete net; }

gseg_status gseg_net_param_count(const gseg_net* net, int64_t* out) {
  return guarded([&] {
    require_arg(out, "out");
    *out = net_of(const_cast<gseg_net*>(net)).count_params();
  });
}

gseg_status gseg_net_forward(gseg_net* net, const double* image, int64_t batch, int64_t size,
                             double* main_logits, double* aux1_logits, double* aux2_logits) {
  return guarded([&] {
    gseg::SegNet& n = net_of(net);
    require_arg(image, "image");
    gseg::require(batch >= 1 && size >= 1, gseg::ErrorKind::invalid_argument,
                  "batch and size must be positive");
    const gseg::Shape shape{batch, 3, size, size};
    gseg::Tensor x(shape, std::vector<double>(image, image + gseg::num_elements(shape)));
    gseg::Tape tape(false);
    const gseg::SegOutput out = n.forward(tape, tape.constant(std::move(x)), gseg::Mode::eval);
    auto copy = [](const gseg::Var& v, double* dst) {
      if (dst != nullptr) std::copy_n(v.value().ptr(), v.value().size(), dst);
    };
    copy(out.main, main_logits);
    copy(out.aux1, aux1_logits);
    copy(out.aux2, aux2_logits);
  });
}

gseg_status gseg_net_predict(gseg_net* net, const double* image, int64_t size, uint8_t* mask) {
  return guarded([&] {
    gseg::SegNet& n = net_of(net);
    require_arg(image, "image");
    require_arg(mask, "mask");
    gseg::require(size >= 1, gseg::ErrorKind::invalid_argument, "size must be positive");
    const gseg::Shape shape{1, 3, size, size};
    const gseg::Tensor x(shape, std::vector<double>(image, image + gseg::num_elements(shape)));
    const gseg::Tensor pred = gseg::predict(n, x);
    for (std::int64_t i = 0; i < pred.size(); ++i) mask[i] = pred[i] != 0.0 ? 1 : 0;
  });
}

gseg_status gseg_net_predict_file(gseg_net* net, const char* image_path, const char* mask_path) {
  return guarded([&] {
    gseg::SegNet& n = net_of(net);
    require_arg(image_path, "image_path");
    require_arg(mask_path, "mask_path");
    const gseg::Tensor image = gseg::read_image(image_path);
    const gseg::Tensor batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
    const gseg::Tensor pred = gseg::predict(n, batch);
    gseg::write_mask(mask_path, pred.reshaped({1, pred.dim(2), pred.dim(3)}));
  });
}

gseg_status gseg_generate_dataset(int n, int size, uint64_t seed, const char* dir) {
  return guarded([&] {
    require_arg(dir, "dir");
    gseg::gen_synthetic(n, size, seed, dir);
  });
}

gseg_status gseg_train(const gseg_config* config, const char* data_dir, const char* val_dir,
                       gseg_epoch_fn on_epoch, void* user, gseg_net** out) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(data_dir, "data_dir");
    require_arg(out, "out");
    const gseg::RunConfig& cfg = config->value;
    const gseg::Dataset data = gseg::load_dataset(data_dir);
    const gseg::Dataset val = val_dir != nullptr ? gseg::load_dataset(val_dir) : gseg::Dataset{};
    auto net = std::make_unique<gseg::SegNet>(cfg.net, cfg.train.seed);
    gseg::EpochCallback callback;
    if (on_epoch != nullptr)
      callback = [&](const gseg::EpochLog& log) {
        const gseg_epoch_log c{log.epoch, log.lr, log.train_loss, to_c(log.val)};
        on_epoch(&c, user);
      };
    gseg::train(*net, data, cfg.train, val, callback);
    *out = new gseg_net{std::move(net)};
  });
}

gseg_status gseg_evaluate(gseg_net* net, const char* data_dir, int pooled, gseg_metrics* out) {
  return guarded([&] {
    gseg::SegNet& n = net_of(net);
    require_arg(data_dir, "data_dir");
    require_arg(out, "out");
    const gseg::Dataset data = gseg::load_dataset(data_dir);
    *out = to_c(gseg::evaluate(
        n, data, pooled != 0 ? gseg::MetricAveraging::pooled : gseg::MetricAveraging::per_image));
  });
}

gseg_status gseg_check_equivariance(const gseg_config* config, int trials, double layer_tol,
                                    double net_tol, uint64_t seed, gseg_check_fn fn, void* user,
                                    int* all_passed) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(all_passed, "all_passed");
    gseg::require(trials >= 1, gseg::ErrorKind::invalid_argument, "trials must be >= 1");
    const gseg::SegNetConfig& net = config->value.net;
    int passed = 1;
    for (const auto& r :
         gseg::layer_equivariance_checks(net.effective_group(), trials, layer_tol, seed))
      report(fn, user, r, passed);
    report(fn, user,
           gseg::network_equivariance_check(net, trials, check_size(net, 64), net_tol, seed + 1),
           passed);
    *all_passed = passed;
  });
}

gseg_status gseg_gradcheck(const gseg_config* config, uint64_t seed, double tolerance,
                           gseg_check_fn fn, void* user, int* all_passed) {
  return guarded([&] {
    require_arg(config, "config");
    require_arg(all_passed, "all_passed");
    const gseg::SegNetConfig& net = config->value.net;
    int passed = 1;
    for (const auto& r : gseg::layer_gradient_checks(seed, tolerance)) report(fn, user, r, passed);
    report(fn, user, gseg::network_gradient_check(net, check_size(net, 16), seed + 1, tolerance),
           passed);
    *all_passed = passed;
  });
}

}  // extern "C"
