#include "gseg/equivariant.hpp"

#include <map>
#include <tuple>

#include "gseg/error.hpp"

namespace gseg {

namespace {

using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

void require_square(const Tensor& x, const char* op) {
  require(x.rank() >= 2 && x.dim(x.rank() - 1) == x.dim(x.rank() - 2), ErrorKind::shape,
          std::string(op) + ": spatial dims must be square, got " + shape_string(x.shape()));
}

void require_group_axis(const Shape& shape, GroupSpec group, const char* op) {
  require(shape.size() == 5, ErrorKind::shape,
          std::string(op) + ": expected a [B,K,S,H,W] feature map, got " + shape_string(shape));
  require(shape[2] == group.order(), ErrorKind::shape,
          std::string(op) + ": group axis has " + std::to_string(shape[2]) +
              " entries but group " + std::string(group.name()) + " has order " +
              std::to_string(group.order()));
}

// source[dest] for a planar transform on the last two axes.
std::vector<std::int64_t> planar_sources(StabilizerElement g, std::int64_t planes,
                                         std::int64_t n) {
  std::vector<std::int64_t> src(static_cast<size_t>(planes * n * n));
  for (std::int64_t p = 0; p < planes; ++p)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const auto [tr, tc] = act_on_grid(g, r, c, static_cast<int>(n));
        src[static_cast<size_t>(p * n * n + tr * n + tc)] = p * n * n + r * n + c;
      }
  return src;
}

// Regular-representation sources for a tensor laid out [outer, S, inner-planes, n, n]
// in which both the group axis and the spatial axes are moved by g.
std::vector<std::int64_t> regular_sources(StabilizerElement g, GroupSpec group,
                                          std::int64_t outer, std::int64_t n) {
  const auto elems = enumerate(group);
  const std::int64_t order = group.order();
  const std::int64_t plane = n * n;
  std::vector<std::int64_t> src(static_cast<size_t>(outer * order * plane));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t h = 0; h < order; ++h) {
      const std::int64_t dest_h = element_index(group, compose(g, elems[h]));
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
          const auto [tr, tc] = act_on_grid(g, r, c, static_cast<int>(n));
          src[static_cast<size_t>((o * order + dest_h) * plane + tr * n + tc)] =
              (o * order + h) * plane + r * n + c;
        }
    }
  return src;
}

Tensor apply_sources(const Tensor& x, const std::vector<std::int64_t>& src) {
  Tensor out(x.shape());
  for (size_t i = 0; i < src.size(); ++i) out[static_cast<std::int64_t>(i)] = x[src[i]];
  return out;
}

void require_odd_square_kernel(const Tensor& w, int rank, const char* op) {
  require(w.rank() == rank, ErrorKind::shape,
          std::string(op) + ": unexpected weight shape " + shape_string(w.shape()));
  const std::int64_t k = w.dim(rank - 1);
  require(w.dim(rank - 2) == k, ErrorKind::shape, std::string(op) + ": kernel must be square");
  require(k % 2 == 1, ErrorKind::invalid_argument, std::string(op) + ": kernel size must be odd");
}

// Index tables depend only on (kind, group, out, in, k); rebuilding them on
// every forward dominates small inputs.
enum class ExpandKind { z2, g };
using ExpandKey = std::tuple<ExpandKind, GroupKind, std::int64_t, std::int64_t, std::int64_t>;

template <class Build>
IndexMap cached_index(const ExpandKey& key, Build build) {
  thread_local std::map<ExpandKey, IndexMap> cache;
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, build()).first;
  return it->second;
}

IndexMap z2_expansion(GroupSpec group, std::int64_t out_ch, std::int64_t in_ch, std::int64_t k) {
  const std::int64_t order = group.order();
  const std::int64_t plane = k * k;
  auto src = std::make_shared<std::vector<std::int64_t>>(
      static_cast<size_t>(out_ch * order * in_ch * plane));
  const auto elems = enumerate(group);
  for (std::int64_t o = 0; o < out_ch; ++o)
    for (std::int64_t g = 0; g < order; ++g)
      for (std::int64_t c = 0; c < in_ch; ++c)
        for (int r = 0; r < k; ++r)
          for (int col = 0; col < k; ++col) {
            const auto [tr, tc] = act_on_offset(elems[g], {r, col}, static_cast<int>(k));
            (*src)[static_cast<size_t>(((o * order + g) * in_ch + c) * plane + tr * k + tc)] =
                (o * in_ch + c) * plane + r * k + col;
          }
  return src;
}

IndexMap g_expansion(GroupSpec group, std::int64_t out_ch, std::int64_t in_ch, std::int64_t k) {
  const std::int64_t order = group.order();
  const std::int64_t block = in_ch * order * k * k;  // one output channel, one g
  const auto elems = enumerate(group);
  auto src = std::make_shared<std::vector<std::int64_t>>(
      static_cast<size_t>(out_ch * order * block));
  for (std::int64_t g = 0; g < order; ++g) {
    const auto per_g = regular_sources(elems[g], group, in_ch, k);
    for (std::int64_t o = 0; o < out_ch; ++o)
      for (std::int64_t i = 0; i < block; ++i)
        (*src)[static_cast<size_t>((o * order + g) * block + i)] = o * block + per_g[i];
  }
  return src;
}

}  // namespace

Tensor transform_feature_z2(StabilizerElement g, const Tensor& x) {
  require_square(x, "transform_feature_z2");
  const std::int64_t n = x.dim(x.rank() - 1);
  return apply_sources(x, planar_sources(g, x.size() / (n * n), n));
}

Tensor transform_feature_g(StabilizerElement g, GroupSpec group, const Tensor& x) {
  require_group_axis(x.shape(), group, "transform_feature_g");
  require_square(x, "transform_feature_g");
  element_index(group, g);
  const std::int64_t n = x.dim(4);
  return apply_sources(x, regular_sources(g, group, x.dim(0) * x.dim(1), n));
}

Var expand_filter_z2(Var w, GroupSpec group) {
  const Tensor& wv = w.value();
  require_odd_square_kernel(wv, 4, "expand_filter_z2");
  const std::int64_t out_ch = wv.dim(0), in_ch = wv.dim(1), k = wv.dim(2);
  auto src = cached_index({ExpandKind::z2, group.kind(), out_ch, in_ch, k},
                          [&] { return z2_expansion(group, out_ch, in_ch, k); });
  return ops::gather(w, std::move(src), Shape{out_ch, group.order(), in_ch, k, k});
}

Var expand_filter_g(Var w, GroupSpec group) {
  const Tensor& wv = w.value();
  require_odd_square_kernel(wv, 5, "expand_filter_g");
  require(wv.dim(2) == group.order(), ErrorKind::shape,
          "expand_filter_g: weight group axis does not match group order");
  const std::int64_t out_ch = wv.dim(0), in_ch = wv.dim(1), k = wv.dim(3);
  const std::int64_t order = group.order();
  auto src = cached_index({ExpandKind::g, group.kind(), out_ch, in_ch, k},
                          [&] { return g_expansion(group, out_ch, in_ch, k); });
  return ops::gather(w, std::move(src), Shape{out_ch, order, in_ch, order, k, k});
}

Var gconv_z2_to_g(Var x, Var w, GroupSpec group, int stride, int padding,
                  ops::SizeRounding rounding) {
  const Tensor& wv = w.value();
  require_odd_square_kernel(wv, 4, "gconv_z2_to_g");
  const std::int64_t out_ch = wv.dim(0), in_ch = wv.dim(1), k = wv.dim(2);
  const std::int64_t order = group.order();
  Var bank = ops::reshape(expand_filter_z2(w, group), Shape{out_ch * order, in_ch, k, k});
  Var y = ops::conv2d(x, bank, stride, padding, rounding);
  const Shape& ys = y.shape();
  return ops::reshape(y, Shape{ys[0], out_ch, order, ys[2], ys[3]});
}

Var gconv_g_to_g(Var x, Var w, GroupSpec group, int stride, int padding,
                 ops::SizeRounding rounding) {
  require_group_axis(x.shape(), group, "gconv_g_to_g");
  const Tensor& wv = w.value();
  require_odd_square_kernel(wv, 5, "gconv_g_to_g");
  require(wv.dim(1) == x.shape()[1], ErrorKind::shape,
          "gconv_g_to_g: weight expects " + std::to_string(wv.dim(1)) +
              " input channels, got " + std::to_string(x.shape()[1]));
  const std::int64_t out_ch = wv.dim(0), in_ch = wv.dim(1), k = wv.dim(3);
  const std::int64_t order = group.order();
  const Shape& xs = x.shape();
  Var flat = ops::reshape(x, Shape{xs[0], in_ch * order, xs[3], xs[4]});
  Var bank =
      ops::reshape(expand_filter_g(w, group), Shape{out_ch * order, in_ch * order, k, k});
  Var y = ops::conv2d(flat, bank, stride, padding, rounding);
  const Shape& ys = y.shape();
  return ops::reshape(y, Shape{ys[0], out_ch, order, ys[2], ys[3]});
}

Var g_upsample(Var x, int factor) {
  require(x.shape().size() == 5, ErrorKind::shape, "g_upsample: expected [B,K,S,H,W]");
  return ops::upsample_nearest(x, factor);
}

Var g_projection(Var x) {
  require(x.shape().size() == 5, ErrorKind::shape, "g_projection: expected [B,K,S,H,W]");
  return ops::mean_axis(x, 2);
}

Var g_max_pool(Var x) {
  require(x.shape().size() == 5, ErrorKind::shape, "g_max_pool: expected [B,K,S,H,W]");
  return ops::max_pool2d(x);
}

Var g_batch_norm(Var x, Var gamma, Var beta, ops::BatchNormState* state, bool training,
                 bool update_running) {
  require(x.shape().size() == 5, ErrorKind::shape, "g_batch_norm: expected [B,K,S,H,W]");
  return ops::batch_norm(x, gamma, beta, state, training, update_running);
}

}  // namespace gseg
