#include "gseg/segnet.hpp"

#include <cmath>

#include "gseg/equivariant.hpp"
#include "gseg/error.hpp"

namespace gseg {

void SegNetConfig::validate() const {
  require(base_width >= 1, ErrorKind::invalid_argument, "base_width must be >= 1");
  require(num_stages >= 4 && num_stages <= 8, ErrorKind::invalid_argument,
          "num_stages must be in [4, 8] (three supervised decoder levels)");
  require(blocks_per_stage >= 1, ErrorKind::invalid_argument, "blocks_per_stage must be >= 1");
  double total = 0.0;
  for (double w : ds_weights) {
    require(w >= 0.0 && std::isfinite(w), ErrorKind::invalid_argument,
            "ds_weights must be finite and non-negative");
    total += w;
  }
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::invalid_argument,
          "ds_weights must sum to 1, got " + std::to_string(total));
}

int SegNetConfig::effective_width() const {
  if (equivariant) return base_width;
  return std::max(1, static_cast<int>(std::lround(base_width * std::sqrt(group.order()))));
}

SegNetConfig SegNetConfig::plain_twin() const {
  SegNetConfig twin = *this;
  twin.equivariant = false;
  return twin;
}

SegNet::SegNet(const SegNetConfig& config, std::uint64_t seed)
    : config_(config), group_(config.effective_group()) {
  config_.validate();
  Rng rng(seed);
  const int n = config_.num_stages;
  std::vector<int> widths(static_cast<size_t>(n));
  for (int s = 0; s < n; ++s) widths[s] = config_.effective_width() << s;

  stem_ = make_conv("stem.conv", false, 3, widths[0], 3, 1, false, rng);
  stem_norm_ = make_norm("stem.bn", widths[0]);

  const bool strided = config_.downsample == Downsample::strided_conv;
  stages_.resize(static_cast<size_t>(n));
  for (int s = 0; s < n; ++s) {
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const int in = b > 0 ? widths[s] : widths[s > 0 ? s - 1 : 0];
      const int stride = (b == 0 && s > 0 && strided) ? 2 : 1;
      ResidualBlock block;
      block.conv1 = make_conv(name + ".conv1", true, in, widths[s], 3, stride, false, rng);
      block.bn1 = make_norm(name + ".bn1", widths[s]);
      block.conv2 = make_conv(name + ".conv2", true, widths[s], widths[s], 3, 1, false, rng);
      block.bn2 = make_norm(name + ".bn2", widths[s]);
      if (in != widths[s] || stride != 1)
        block.shortcut = make_conv(name + ".shortcut", true, in, widths[s], 1, stride, false, rng);
      stages_[s].push_back(std::move(block));
    }
  }

  for (int s = 1; s < n; ++s) {
    const std::string name = "decoder" + std::to_string(s - 1);
    DecoderLevel level;
    level.conv = make_conv(name + ".conv", true, widths[s] + widths[s - 1], widths[s - 1], 3, 1,
                           false, rng);
    level.bn = make_norm(name + ".bn", widths[s - 1]);
    decoder_.push_back(std::move(level));
  }

  for (int i = 0; i < 3; ++i) {
    const std::string name = "head" + std::to_string(i);
    const int k = widths[i];
    heads_[i].weight = Parameter(name + ".weight",
                                 random_normal(Shape{1, k, 1, 1}, rng, std::sqrt(1.0 / k)));
    heads_[i].bias = Parameter(name + ".bias", Tensor(Shape{1}, 0.0));
  }
}

SegNet::ConvUnit SegNet::make_conv(const std::string& name, bool on_group, int in, int out,
                                   int kernel, int stride, bool bias, Rng& rng) const {
  const std::int64_t order = group_.order();
  ConvUnit unit;
  unit.on_group = on_group;
  unit.stride = stride;
  unit.padding = kernel / 2;
  Shape shape = on_group ? Shape{out, in, order, kernel, kernel} : Shape{out, in, kernel, kernel};
  const double fan_in = static_cast<double>(in) * (on_group ? order : 1) * kernel * kernel;
  unit.weight = Parameter(name + ".weight", random_normal(shape, rng, std::sqrt(2.0 / fan_in)));
  if (bias) unit.bias = Parameter(name + ".bias", Tensor(Shape{out}, 0.0));
  return unit;
}

SegNet::NormUnit SegNet::make_norm(const std::string& name, int channels) const {
  return NormUnit{Parameter(name + ".gamma", Tensor(Shape{channels}, 1.0)),
                  Parameter(name + ".beta", Tensor(Shape{channels}, 0.0)),
                  ops::BatchNormState(channels)};
}

Var SegNet::apply(Tape& tape, ConvUnit& conv, Var x) const {
  const auto rounding = conv.stride > 1 ? ops::SizeRounding::floor : ops::SizeRounding::exact;
  Var w = tape.parameter(conv.weight);
  Var y = conv.on_group ? gconv_g_to_g(x, w, group_, conv.stride, conv.padding, rounding)
                        : gconv_z2_to_g(x, w, group_, conv.stride, conv.padding, rounding);
  if (conv.bias) y = ops::add_channel_bias(y, tape.parameter(*conv.bias));
  return y;
}

Var SegNet::apply(Tape& tape, NormUnit& norm, Var x, Mode mode) const {
  return g_batch_norm(x, tape.parameter(norm.gamma), tape.parameter(norm.beta), &norm.state,
                      mode == Mode::train);
}

Var SegNet::apply(Tape& tape, ResidualBlock& block, Var x, Mode mode) const {
  Var y = ops::relu(apply(tape, block.bn1, apply(tape, block.conv1, x), mode));
  y = apply(tape, block.bn2, apply(tape, block.conv2, y), mode);
  Var skip = block.shortcut ? apply(tape, *block.shortcut, x) : x;
  return ops::relu(ops::add(y, skip));
}

Var SegNet::apply_head(Tape& tape, Head& head, Var x, int upsample) const {
  Var planar = g_projection(x);
  Var logit = ops::conv2d(planar, tape.parameter(head.weight), 1, 0);
  logit = ops::add_channel_bias(logit, tape.parameter(head.bias));
  return upsample > 1 ? ops::upsample_nearest(logit, upsample) : logit;
}

SegOutput SegNet::forward(Tape& tape, Var image, Mode mode) {
  const Shape& s = image.shape();
  require(s.size() == 4 && s[1] == 3, ErrorKind::shape,
          "forward: image must be [B,3,H,W], got " + shape_string(s));
  require(s[2] == s[3], ErrorKind::shape, "forward: image must be square");
  require(s[2] % config_.size_multiple() == 0, ErrorKind::shape,
          "forward: side " + std::to_string(s[2]) + " is not divisible by " +
              std::to_string(config_.size_multiple()));

  Var x = ops::relu(apply(tape, stem_norm_, apply(tape, stem_, image), mode));
  std::vector<Var> skips;
  for (size_t st = 0; st < stages_.size(); ++st) {
    if (st > 0 && config_.downsample == Downsample::pool) x = g_max_pool(x);
    for (auto& block : stages_[st]) x = apply(tape, block, x, mode);
    skips.push_back(x);
  }

  std::vector<Var> taps(decoder_.size());
  for (size_t st = stages_.size() - 1; st >= 1; --st) {
    x = g_upsample(x, 2);
    x = ops::concat_channels(x, skips[st - 1]);
    DecoderLevel& level = decoder_[st - 1];
    x = ops::relu(apply(tape, level.bn, apply(tape, level.conv, x), mode));
    taps[st - 1] = x;
  }

  return SegOutput{apply_head(tape, heads_[0], taps[0], 1),
                   apply_head(tape, heads_[1], taps[1], 2),
                   apply_head(tape, heads_[2], taps[2], 4)};
}

void SegNet::visit_tensors(
    const std::function<void(const std::string&, Tensor&, bool)>& fn) {
  auto conv = [&](ConvUnit& c) {
    fn(c.weight.name, c.weight.value, true);
    if (c.bias) fn(c.bias->name, c.bias->value, true);
  };
  auto norm = [&](NormUnit& n) {
    fn(n.gamma.name, n.gamma.value, true);
    fn(n.beta.name, n.beta.value, true);
    const std::string prefix = n.gamma.name.substr(0, n.gamma.name.size() - 6);
    fn(prefix + ".running_mean", n.state.running_mean, false);
    fn(prefix + ".running_var", n.state.running_var, false);
  };
  conv(stem_);
  norm(stem_norm_);
  for (auto& stage : stages_)
    for (auto& block : stage) {
      conv(block.conv1);
      norm(block.bn1);
      conv(block.conv2);
      norm(block.bn2);
      if (block.shortcut) conv(*block.shortcut);
    }
  for (auto& level : decoder_) {
    conv(level.conv);
    norm(level.bn);
  }
  for (auto& head : heads_) {
    fn(head.weight.name, head.weight.value, true);
    fn(head.bias.name, head.bias.value, true);
  }
}

std::vector<Parameter*> SegNet::parameters() {
  std::vector<Parameter*> out;
  auto conv = [&](ConvUnit& c) {
    out.push_back(&c.weight);
    if (c.bias) out.push_back(&*c.bias);
  };
  auto norm = [&](NormUnit& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  conv(stem_);
  norm(stem_norm_);
  for (auto& stage : stages_)
    for (auto& block : stage) {
      conv(block.conv1);
      norm(block.bn1);
      conv(block.conv2);
      norm(block.bn2);
      if (block.shortcut) conv(*block.shortcut);
    }
  for (auto& level : decoder_) {
    conv(level.conv);
    norm(level.bn);
  }
  for (auto& head : heads_) {
    out.push_back(&head.weight);
    out.push_back(&head.bias);
  }
  return out;
}

std::int64_t SegNet::count_params() const {
  std::int64_t total = 0;
  for (Parameter* p : const_cast<SegNet*>(this)->parameters()) total += p->value.size();
  return total;
}

void SegNet::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Var deep_supervision_loss(const SegOutput& out, const Tensor& target,
                          const std::array<double, 3>& ds_weights) {
  Var loss = ops::scale(ops::bce_with_logits(out.main, target), ds_weights[0]);
  loss = ops::add(loss, ops::scale(ops::bce_with_logits(out.aux1, target), ds_weights[1]));
  loss = ops::add(loss, ops::scale(ops::bce_with_logits(out.aux2, target), ds_weights[2]));
  return loss;
}

namespace {
double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}
}  // namespace

Tensor fused_probability(const SegOutput& out, const SegNetConfig& config) {
  const Tensor& main = out.main.value();
  Tensor prob(main.shape());
  if (config.fusion == Fusion::main_only) {
    for (std::int64_t i = 0; i < main.size(); ++i) prob[i] = logistic(main[i]);
    return prob;
  }
  const Tensor& aux1 = out.aux1.value();
  const Tensor& aux2 = out.aux2.value();
  // Convex combination anchored at the main head: equal head probabilities
  // fuse to exactly that probability, so a 0.5 tie stays a tie.
  const auto& w = config.ds_weights;
  const double total = w[0] + w[1] + w[2];
  const double w1 = w[1] / total, w2 = w[2] / total;
  for (std::int64_t i = 0; i < main.size(); ++i) {
    const double p0 = logistic(main[i]);
    prob[i] = p0 + w1 * (logistic(aux1[i]) - p0) + w2 * (logistic(aux2[i]) - p0);
  }
  return prob;
}

Tensor threshold_mask(const Tensor& probability) {
  Tensor mask(probability.shape());
  for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = probability[i] >= 0.5 ? 1.0 : 0.0;
  return mask;
}

Tensor predict(SegNet& net, const Tensor& image) {
  Tape tape(false);
  SegOutput out = net.forward(tape, tape.constant(image), Mode::eval);
  return threshold_mask(fused_probability(out, net.config()));
}

}  // namespace gseg
