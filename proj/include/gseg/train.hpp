#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gseg/autograd.hpp"
#include "gseg/segnet.hpp"

namespace gseg {

/// One image/mask pair: image [3, H, W] in [0, 1], mask [1, H, W] in {0, 1}.
struct Sample {
  Tensor image;
  Tensor mask;
  std::string id;
};

using Dataset = std::vector<Sample>;

// ---- metrics ---------------------------------------------------------------

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  double ja = 0.0;  // Jaccard index
  double di = 0.0;  // Dice coefficient
  double ac = 0.0;  // pixel accuracy
  double se = 0.0;  // sensitivity
  double sp = 0.0;  // specificity
};

/// Both masks must hold only 0 and 1 and share a shape.
ConfusionCounts confusion(const Tensor& pred, const Tensor& gt);

/// A ratio whose denominator is zero scores 1.0 when the prediction is
/// error free (fp + fn == 0) and 0.0 otherwise.
Metrics metrics(const ConfusionCounts& counts);

enum class MetricAveraging { per_image, pooled };

/// per_image: arithmetic mean of per-image metrics. pooled: metrics of the
/// summed confusion counts.
Metrics evaluate(SegNet& net, const Dataset& data,
                 MetricAveraging averaging = MetricAveraging::per_image);

// ---- optimization ----------------------------------------------------------

struct TrainSettings {
  int epochs = 70;
  double lr = 0.01;
  int decay_epoch = 60;
  double decay_factor = 0.1;
  double momentum = 0.9;
  int batch_size = 8;
  std::uint64_t seed = 1;
  bool augment = false;
  MetricAveraging averaging = MetricAveraging::per_image;

  void validate() const;
};

struct OptimState {
  std::vector<Tensor> velocity;  // one per parameter, allocated on first step
  double learning_rate = 0.01;
  double momentum = 0.9;
  int epoch = 0;
};

/// Classical momentum: v <- momentum * v + g; w <- w - lr * v. A non-finite
/// gradient anywhere aborts before any parameter is touched.
void sgd_step(std::span<Parameter* const> params, OptimState& state);

/// lr for epoch < decay_epoch, lr * decay_factor afterwards.
double lr_schedule(int epoch, const TrainSettings& settings);

/// Applies one uniformly drawn p4m element jointly to image and mask.
std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, Rng& rng);
std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, std::uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  Metrics val;  // left zero when no callback is attached
};

std::string format_log_line(const EpochLog& log);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Shuffled mini-batch SGD. When `on_epoch` is set, metrics are computed
/// after every epoch on `validation` if non-empty, otherwise on the training
/// set. Deterministic for a fixed seed. A non-finite loss aborts with the
/// epoch index.
std::vector<EpochLog> train(SegNet& net, const Dataset& data, const TrainSettings& settings,
                            const Dataset& validation = {}, const EpochCallback& on_epoch = {});

/// Stacks samples [idx...] into [B,3,H,W] images and [B,1,H,W] masks.
std::pair<Tensor, Tensor> make_batch(const Dataset& data, std::span<const std::size_t> idx);

}  // namespace gseg
