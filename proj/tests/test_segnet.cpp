#include <cmath>

#include "doctest.h"
#include "gseg/equivariant.hpp"
#include "gseg/error.hpp"
#include "gseg/segnet.hpp"

using namespace gseg;

namespace {

SegNetConfig toy(GroupSpec group = GroupSpec::p4m(), int base = 2) {
  SegNetConfig c;
  c.group = group;
  c.base_width = base;
  c.blocks_per_stage = 1;
  return c;
}

// Learnable scalars of one conv from its geometry.
std::int64_t conv_params(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t group_in,
                         bool bias) {
  return out * in * group_in * k * k + (bias ? out : 0);
}

// Parameter count from the build plan, written independently of the net.
std::int64_t planned_params(const SegNetConfig& c) {
  const std::int64_t S = c.effective_group().order();
  const std::int64_t w0 = c.equivariant ? c.base_width
                                        : std::lround(c.base_width * std::sqrt(double(c.group.order())));
  auto width = [&](int s) { return w0 << s; };
  std::int64_t n = conv_params(3, w0, 3, 1, false) + 2 * w0;
  for (int s = 0; s < c.num_stages; ++s)
    for (int b = 0; b < c.blocks_per_stage; ++b) {
      const std::int64_t in = b > 0 ? width(s) : width(s > 0 ? s - 1 : 0);
      const bool strided = b == 0 && s > 0 && c.downsample == Downsample::strided_conv;
      n += conv_params(in, width(s), 3, S, false) + conv_params(width(s), width(s), 3, S, false) + 4 * width(s);
      if (in != width(s) || strided) n += conv_params(in, width(s), 1, S, false);
    }
  for (int s = 1; s < c.num_stages; ++s)
    n += conv_params(width(s) + width(s - 1), width(s - 1), 3, S, false) + 2 * width(s - 1);
  for (int i = 0; i < 3; ++i) n += conv_params(width(i), 1, 1, 1, true);
  return n;
}

double naive_bce(const Tensor& z, const Tensor& t) {
  double s = 0.0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    s -= t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p);
  }
  return s / static_cast<double>(z.size());
}

SegOutput outputs(Tape& tape, const Tensor& a, const Tensor& b, const Tensor& c) {
  return SegOutput{tape.constant(a), tape.constant(b), tape.constant(c)};
}

bool all_equal(const Tensor& t, double v) {
  for (double x : t.data())
    if (x != v) return false;
  return true;
}

void for_each_tensor(SegNet& net, const std::function<void(const std::string&, Tensor&)>& fn) {
  net.visit_tensors([&](const std::string& name, Tensor& t, bool) { fn(name, t); });
}

}  // namespace

TEST_CASE("config validation") {
  SegNetConfig c;
  CHECK_NOTHROW(c.validate());
  c.ds_weights = {0.5, 0.5, 0.5};
  CHECK_THROWS_AS(c.validate(), Error);
  c = SegNetConfig{};
  c.ds_weights = {0.7, 0.2, 0.1 + 1e-12};
  CHECK_NOTHROW(c.validate());
  c.base_width = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = SegNetConfig{};
  c.num_stages = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK_THROWS_AS(SegNet(c, 1), Error);
}

TEST_CASE("plain twin width is base * sqrt(|S|)") {
  SegNetConfig c;
  CHECK(c.effective_width() == 8);
  CHECK(c.plain_twin().effective_width() == 23);
  CHECK(c.plain_twin().effective_group() == GroupSpec::p1());
  c.group = GroupSpec::p4();
  CHECK(c.plain_twin().effective_width() == 16);
}

TEST_CASE("build is deterministic in the seed") {
  SegNet a(toy(), 5), b(toy(), 5), c(toy(), 6);
  std::vector<Tensor> ta, tb, tc;
  for_each_tensor(a, [&](const std::string&, Tensor& t) { ta.push_back(t); });
  for_each_tensor(b, [&](const std::string&, Tensor& t) { tb.push_back(t); });
  for_each_tensor(c, [&](const std::string&, Tensor& t) { tc.push_back(t); });
  REQUIRE(ta.size() == tb.size());
  bool differs = false;
  for (size_t i = 0; i < ta.size(); ++i) {
    CHECK(max_abs_diff(ta[i], tb[i]) == 0.0);
    differs = differs || max_abs_diff(ta[i], tc[i]) > 0.0;
  }
  CHECK(differs);
}

TEST_CASE("forward shapes and size rules") {
  SegNetConfig c = toy(GroupSpec::p4(), 1);
  CHECK(c.size_multiple() == 8);  // 64 -> 8x8 bottleneck after three halvings
  CHECK(64 / c.size_multiple() == 8);
  SegNet net(c, 1);
  Rng rng(2);
  Tape tape(false);
  const SegOutput out = net.forward(tape, tape.constant(random_uniform({2, 3, 64, 64}, rng, 0.0, 1.0)), Mode::eval);
  for (const Var& v : {out.main, out.aux1, out.aux2}) CHECK(v.value().shape() == Shape{2, 1, 64, 64});
  CHECK_THROWS_AS(net.forward(tape, tape.constant(Tensor({1, 3, 60, 60})), Mode::eval), Error);
  CHECK_THROWS_AS(net.forward(tape, tape.constant(Tensor({1, 3, 64, 56})), Mode::eval), Error);
  CHECK_THROWS_AS(net.forward(tape, tape.constant(Tensor({1, 1, 64, 64})), Mode::eval), Error);
}

TEST_CASE("network equivariance with pooling, and its absence in the plain twin") {
  Rng rng(3);
  const Tensor x = random_uniform({1, 3, 16, 16}, rng, 0.0, 1.0);
  for (GroupSpec group : {GroupSpec::p4(), GroupSpec::p4m()}) {
    SegNet net(toy(group), 7);
    SegNet twin(toy(group).plain_twin(), 7);
    Tape tape(false);
    const SegOutput ref = net.forward(tape, tape.constant(x), Mode::eval);
    const SegOutput ref_twin = twin.forward(tape, tape.constant(x), Mode::eval);
    double twin_dev = 0.0;
    for (auto g : enumerate(group)) {
      CAPTURE(to_string(g));
      const Tensor gx = transform_feature_z2(g, x);
      const SegOutput out = net.forward(tape, tape.constant(gx), Mode::eval);
      CHECK(max_abs_diff(out.main.value(), transform_feature_z2(g, ref.main.value())) < 1e-8);
      CHECK(max_abs_diff(out.aux1.value(), transform_feature_z2(g, ref.aux1.value())) < 1e-8);
      CHECK(max_abs_diff(out.aux2.value(), transform_feature_z2(g, ref.aux2.value())) < 1e-8);
      CHECK(max_abs_diff(predict(net, gx), transform_feature_z2(g, predict(net, x))) == 0.0);
      const SegOutput tw = twin.forward(tape, tape.constant(gx), Mode::eval);
      twin_dev = std::max(twin_dev, max_abs_diff(tw.main.value(), transform_feature_z2(g, ref_twin.main.value())));
    }
    CHECK(twin_dev > 0.01);
  }
}

TEST_CASE("zero head weights give logits equal to the head bias") {
  SegNet net(toy(), 1);
  const double bias[3] = {0.25, -1.5, 3.0};
  for_each_tensor(net, [&](const std::string& name, Tensor& t) {
    for (int i = 0; i < 3; ++i) {
      const std::string head = "head" + std::to_string(i);
      if (name == head + ".weight") t.fill(0.0);
      if (name == head + ".bias") t.fill(bias[i]);
    }
  });
  Rng rng(4);
  Tape tape(false);
  const SegOutput out = net.forward(tape, tape.constant(random_uniform({2, 3, 16, 16}, rng, 0.0, 1.0)), Mode::eval);
  for (double v : out.main.value().data()) CHECK(v == bias[0]);
  for (double v : out.aux1.value().data()) CHECK(v == bias[1]);
  for (double v : out.aux2.value().data()) CHECK(v == bias[2]);
}

TEST_CASE("deep supervision loss") {
  Rng rng(5);
  const Tensor a = random_normal({2, 1, 4, 4}, rng, 2.0), b = random_normal({2, 1, 4, 4}, rng, 2.0),
               c = random_normal({2, 1, 4, 4}, rng, 2.0);
  Tensor t({2, 1, 4, 4});
  for (double& v : t.data()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
  Tape tape(false);
  const std::array<double, 3> w{0.7, 0.2, 0.1};
  CHECK(deep_supervision_loss(outputs(tape, a, a, a), t, w).value()[0] ==
        doctest::Approx(naive_bce(a, t)).epsilon(1e-12));
  CHECK(deep_supervision_loss(outputs(tape, a, b, c), t, {1.0, 0.0, 0.0}).value()[0] ==
        doctest::Approx(naive_bce(a, t)).epsilon(1e-12));
  const double hand = 0.7 * naive_bce(a, t) + 0.2 * naive_bce(b, t) + 0.1 * naive_bce(c, t);
  CHECK(std::abs(deep_supervision_loss(outputs(tape, a, b, c), t, w).value()[0] - hand) < 1e-12);
  CHECK_THROWS_AS(deep_supervision_loss(outputs(tape, a, b, c), Tensor({2, 1, 4, 5}), w), Error);
}

TEST_CASE("fusion and thresholding") {
  Tape tape(false);
  SegNetConfig c;
  const Tensor big({1, 1, 3, 3}, 40.0), zero({1, 1, 3, 3}, 0.0), neg({1, 1, 3, 3}, -40.0);
  CHECK(all_equal(threshold_mask(fused_probability(outputs(tape, big, big, big), c)), 1.0));
  // All heads at logit 0 fuse to exactly 0.5, which is foreground.
  const Tensor half = fused_probability(outputs(tape, zero, zero, zero), c);
  for (double v : half.data()) CHECK(v == 0.5);
  CHECK(all_equal(threshold_mask(half), 1.0));
  // Weighted fusion: main alone at 0.7 decides; aux heads alone at 0.3 do not.
  CHECK(all_equal(threshold_mask(fused_probability(outputs(tape, big, neg, neg), c)), 1.0));
  CHECK(all_equal(threshold_mask(fused_probability(outputs(tape, neg, big, big), c)), 0.0));
  Rng rng(6);
  const Tensor a = random_normal({1, 1, 3, 3}, rng, 3.0), b = random_normal({1, 1, 3, 3}, rng, 3.0),
               d = random_normal({1, 1, 3, 3}, rng, 3.0);
  const Tensor fused = fused_probability(outputs(tape, a, b, d), c);
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  for (int i = 0; i < 9; ++i)
    CHECK(std::abs(fused[i] - (0.7 * sig(a[i]) + 0.2 * sig(b[i]) + 0.1 * sig(d[i]))) < 1e-15);
  c.fusion = Fusion::main_only;
  CHECK(all_equal(threshold_mask(fused_probability(outputs(tape, big, neg, neg), c)), 1.0));
  CHECK(all_equal(threshold_mask(fused_probability(outputs(tape, neg, big, big), c)), 0.0));
  // Output depends only on which side of 0.5 the fused value falls.
  CHECK(max_abs_diff(threshold_mask(Tensor({4}, {0.5 - 1e-15, 0.5, 0.5 + 1e-15, 0.0})),
                     Tensor({4}, {0.0, 1.0, 1.0, 0.0})) == 0.0);
}

TEST_CASE("count_params matches the build plan") {
  CHECK(conv_params(2, 4, 3, 1, true) == 76);
  CHECK(conv_params(2, 4, 3, 8, false) == 8 * conv_params(2, 4, 3, 1, false));
  for (GroupSpec group : {GroupSpec::p1(), GroupSpec::p4(), GroupSpec::p4m()})
    for (int base : {1, 3, 8})
      for (int blocks : {1, 2})
        for (Downsample ds : {Downsample::pool, Downsample::strided_conv}) {
          SegNetConfig c = toy(group, base);
          c.blocks_per_stage = blocks;
          c.downsample = ds;
          CHECK(SegNet(c, 1).count_params() == planned_params(c));
          CHECK(SegNet(c.plain_twin(), 1).count_params() == planned_params(c.plain_twin()));
        }
}

TEST_CASE("equivariant and plain nets have matched budgets") {
  for (GroupSpec group : {GroupSpec::p4(), GroupSpec::p4m()})
    for (int base : {4, 8, 16}) {
      SegNetConfig c;
      c.group = group;
      c.base_width = base;
      const double ratio = double(planned_params(c)) / double(planned_params(c.plain_twin()));
      CAPTURE(base);
      CHECK(ratio > 0.9);
      CHECK(ratio < 1.1);
    }
  SegNetConfig defaults;
  CHECK(SegNet(defaults, 1).count_params() == 1686355);
  CHECK(SegNet(defaults.plain_twin(), 1).count_params() == 1744852);
}
