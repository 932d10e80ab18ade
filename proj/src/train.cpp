#include "gseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "gseg/equivariant.hpp"
#include "gseg/error.hpp"

namespace gseg {

ConfusionCounts confusion(const Tensor& pred, const Tensor& gt) {
  require(pred.shape() == gt.shape(), ErrorKind::shape,
          "confusion: shape mismatch " + shape_string(pred.shape()) + " vs " +
              shape_string(gt.shape()));
  ConfusionCounts c;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = gt[i];
    require((p == 0.0 || p == 1.0) && (g == 0.0 || g == 1.0), ErrorKind::invalid_argument,
            "confusion: masks must be binary");
    if (p == 1.0)
      (g == 1.0 ? c.tp : c.fp) += 1;
    else
      (g == 1.0 ? c.fn : c.tn) += 1;
  }
  return c;
}

Metrics metrics(const ConfusionCounts& c) {
  const bool error_free = c.fp + c.fn == 0;
  auto ratio = [error_free](double num, double den) {
    if (den == 0.0) return error_free ? 1.0 : 0.0;
    return num / den;
  };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const double tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  Metrics m;
  m.ja = ratio(tp, tp + fp + fn);
  m.di = ratio(2 * tp, 2 * tp + fp + fn);
  m.ac = ratio(tp + tn, tp + fp + tn + fn);
  m.se = ratio(tp, tp + fn);
  m.sp = ratio(tn, tn + fp);
  return m;
}

std::pair<Tensor, Tensor> make_batch(const Dataset& data, std::span<const std::size_t> idx) {
  require(!idx.empty(), ErrorKind::invalid_argument, "make_batch: empty batch");
  const Shape& is = data[idx[0]].image.shape();
  const Shape& ms = data[idx[0]].mask.shape();
  const auto b = static_cast<std::int64_t>(idx.size());
  Tensor images(Shape{b, is[0], is[1], is[2]});
  Tensor masks(Shape{b, ms[0], ms[1], ms[2]});
  const std::int64_t isz = num_elements(is), msz = num_elements(ms);
  for (std::int64_t n = 0; n < b; ++n) {
    const Sample& s = data[idx[static_cast<size_t>(n)]];
    require(s.image.shape() == is && s.mask.shape() == ms, ErrorKind::shape,
            "make_batch: samples differ in shape");
    std::copy_n(s.image.ptr(), isz, images.ptr() + n * isz);
    std::copy_n(s.mask.ptr(), msz, masks.ptr() + n * msz);
  }
  return {std::move(images), std::move(masks)};
}

Metrics evaluate(SegNet& net, const Dataset& data, MetricAveraging averaging) {
  require(!data.empty(), ErrorKind::invalid_argument, "evaluate: empty dataset");
  constexpr std::size_t kBatch = 8;
  Metrics sum;
  ConfusionCounts pooled;
  std::vector<std::size_t> idx;
  // Batches are runs of consecutive same-shape samples, so mixed sizes work.
  for (std::size_t first = 0; first < data.size(); first += idx.size()) {
    idx.assign(1, first);
    while (idx.size() < kBatch && first + idx.size() < data.size() &&
           data[first + idx.size()].image.shape() == data[first].image.shape())
      idx.push_back(first + idx.size());
    auto [images, masks] = make_batch(data, idx);
    const Tensor pred = predict(net, images);
    const std::int64_t plane = pred.size() / static_cast<std::int64_t>(idx.size());
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const Shape one{1, pred.dim(1), pred.dim(2), pred.dim(3)};
      Tensor p(one), g(one);
      std::copy_n(pred.ptr() + static_cast<std::int64_t>(n) * plane, plane, p.ptr());
      std::copy_n(masks.ptr() + static_cast<std::int64_t>(n) * plane, plane, g.ptr());
      const ConfusionCounts c = confusion(p, g);
      pooled += c;
      const Metrics m = metrics(c);
      sum.ja += m.ja;
      sum.di += m.di;
      sum.ac += m.ac;
      sum.se += m.se;
      sum.sp += m.sp;
    }
  }
  if (averaging == MetricAveraging::pooled) return metrics(pooled);
  const double n = static_cast<double>(data.size());
  return Metrics{sum.ja / n, sum.di / n, sum.ac / n, sum.se / n, sum.sp / n};
}

void TrainSettings::validate() const {
  require(epochs >= 0, ErrorKind::invalid_argument, "epochs must be >= 0");
  require(lr >= 0.0 && std::isfinite(lr), ErrorKind::invalid_argument, "lr must be >= 0");
  require(decay_epoch >= 0, ErrorKind::invalid_argument, "decay_epoch must be >= 0");
  require(decay_factor > 0.0, ErrorKind::invalid_argument, "decay_factor must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::invalid_argument,
          "momentum must be in [0, 1)");
  require(batch_size >= 1, ErrorKind::invalid_argument, "batch_size must be >= 1");
}

void sgd_step(std::span<Parameter* const> params, OptimState& state) {
  for (size_t i = 0; i < params.size(); ++i)
    for (double g : params[i]->grad.data())
      require(std::isfinite(g), ErrorKind::numeric,
              "sgd_step: non-finite gradient in '" + params[i]->name + "'");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (Parameter* p : params) state.velocity.emplace_back(p->value.shape());
  }
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& v = state.velocity[i];
    require(v.shape() == p.value.shape(), ErrorKind::shape,
            "sgd_step: velocity shape does not match '" + p.name + "'");
    for (std::int64_t j = 0; j < v.size(); ++j) {
      v[j] = state.momentum * v[j] + p.grad[j];
      p.value[j] -= state.learning_rate * v[j];
    }
  }
}

double lr_schedule(int epoch, const TrainSettings& settings) {
  return epoch < settings.decay_epoch ? settings.lr : settings.lr * settings.decay_factor;
}

std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, Rng& rng) {
  const auto elems = enumerate(GroupSpec::p4m());
  const StabilizerElement g = elems[rng.below(elems.size())];
  return {transform_feature_z2(g, image), transform_feature_z2(g, mask)};
}

std::pair<Tensor, Tensor> augment(const Tensor& image, const Tensor& mask, std::uint64_t seed) {
  Rng rng(seed);
  return augment(image, mask, rng);
}

std::string format_log_line(const EpochLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", log.epoch, log.lr,
                log.train_loss, log.val.ja, log.val.di, log.val.ac, log.val.se, log.val.sp);
  return buf;
}

std::vector<EpochLog> train(SegNet& net, const Dataset& data, const TrainSettings& settings,
                            const Dataset& validation, const EpochCallback& on_epoch) {
  require(!data.empty(), ErrorKind::invalid_argument, "train: empty dataset");
  settings.validate();
  Rng rng(settings.seed);
  OptimState state;
  state.momentum = settings.momentum;
  const std::vector<Parameter*> params = net.parameters();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    state.epoch = epoch;
    state.learning_rate = lr_schedule(epoch, settings);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t first = 0; first < order.size();
         first += static_cast<std::size_t>(settings.batch_size)) {
      const std::size_t last =
          std::min(order.size(), first + static_cast<std::size_t>(settings.batch_size));
      std::span<const std::size_t> idx(order.data() + first, last - first);
      auto [images, masks] = make_batch(data, idx);
      if (settings.augment) {
        Dataset local;
        for (std::size_t i : idx) {
          auto [img, msk] = augment(data[i].image, data[i].mask, rng);
          local.push_back(Sample{std::move(img), std::move(msk), {}});
        }
        std::vector<std::size_t> all(local.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        std::tie(images, masks) = make_batch(local, all);
      }

      net.zero_grad();
      Tape tape;
      SegOutput out = net.forward(tape, tape.constant(std::move(images)), Mode::train);
      Var loss = deep_supervision_loss(out, masks, net.config().ds_weights);
      const double value = loss.value()[0];
      require(std::isfinite(value), ErrorKind::numeric,
              "train: non-finite loss in epoch " + std::to_string(epoch));
      tape.backward(loss);
      sgd_step(params, state);
      loss_sum += value * static_cast<double>(idx.size());
      seen += idx.size();
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = state.learning_rate;
    log.train_loss = loss_sum / static_cast<double>(seen);
    if (on_epoch) {
      log.val = evaluate(net, validation.empty() ? data : validation, settings.averaging);
      on_epoch(log);
    }
    logs.push_back(log);
  }
  return logs;
}

}  // namespace gseg
