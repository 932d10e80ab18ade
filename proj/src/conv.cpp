// conv2d as im2col + GEMM. Work is split into tiles of whole images (at low
// resolution) or of output-row bands within one image (at high resolution) so
// the column buffer stays cache-sized.

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <utility>

#include "gseg/autograd.hpp"
#include "gseg/error.hpp"

namespace gseg::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

constexpr std::int64_t kColumnBudget = std::int64_t{1} << 17;  // doubles

struct ConvGeometry {
  std::int64_t batch, in_channels, height, width;
  std::int64_t out_channels, kernel;
  std::int64_t stride, padding;
  std::int64_t out_height, out_width;

  std::int64_t patch() const { return in_channels * kernel * kernel; }
  std::int64_t out_plane() const { return out_height * out_width; }
};

// Images [first, first + count), output rows [row, row + rows) of each.
// count > 1 only when rows == out_height.
struct Tile {
  std::int64_t first, count, row, rows;

  std::int64_t columns(const ConvGeometry& g) const { return count * rows * g.out_width; }
};

std::vector<Tile> make_tiles(const ConvGeometry& g) {
  std::vector<Tile> tiles;
  const std::int64_t per_row = g.patch() * g.out_width;
  const std::int64_t per_image = per_row * g.out_height;
  if (per_image <= kColumnBudget) {
    const std::int64_t chunk = std::clamp<std::int64_t>(kColumnBudget / per_image, 1, g.batch);
    for (std::int64_t first = 0; first < g.batch; first += chunk)
      tiles.push_back({first, std::min(chunk, g.batch - first), 0, g.out_height});
  } else {
    const std::int64_t band = std::max<std::int64_t>(1, kColumnBudget / per_row);
    for (std::int64_t b = 0; b < g.batch; ++b)
      for (std::int64_t row = 0; row < g.out_height; row += band)
        tiles.push_back({b, 1, row, std::min(band, g.out_height - row)});
  }
  return tiles;
}

// Copies between a [B, K, oh, ow] tensor and the [K, columns] GEMM layout of
// one tile.
void scatter_tile(const ConvGeometry& g, const Tile& t, const double* tile_data, double* out) {
  const std::int64_t band = t.rows * g.out_width;
  const std::int64_t cols = t.columns(g);
  for (std::int64_t local = 0; local < t.count; ++local)
    for (std::int64_t k = 0; k < g.out_channels; ++k)
      std::memcpy(out + ((t.first + local) * g.out_channels + k) * g.out_plane() +
                      t.row * g.out_width,
                  tile_data + k * cols + local * band, sizeof(double) * static_cast<size_t>(band));
}

void gather_tile(const ConvGeometry& g, const Tile& t, const double* in, double* tile_data) {
  const std::int64_t band = t.rows * g.out_width;
  const std::int64_t cols = t.columns(g);
  for (std::int64_t local = 0; local < t.count; ++local)
    for (std::int64_t k = 0; k < g.out_channels; ++k)
      std::memcpy(tile_data + k * cols + local * band,
                  in + ((t.first + local) * g.out_channels + k) * g.out_plane() +
                      t.row * g.out_width,
                  sizeof(double) * static_cast<size_t>(band));
}

std::int64_t output_extent(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p,
                           SizeRounding rounding) {
  const std::int64_t span = in + 2 * p - k;
  require(span >= 0, ErrorKind::shape, "conv2d: kernel larger than padded input");
  if (rounding == SizeRounding::exact)
    require(span % s == 0, ErrorKind::shape,
            "conv2d: output size (" + std::to_string(in) + " + 2*" + std::to_string(p) + " - " +
                std::to_string(k) + ")/" + std::to_string(s) + " + 1 is not integral");
  return span / s + 1;
}

// Output columns [lo, hi) read inside the input row for kernel column kj.
std::pair<std::int64_t, std::int64_t> valid_columns(const ConvGeometry& g, std::int64_t kj) {
  const std::int64_t shift = kj - g.padding;  // ix = ox * stride + shift
  const std::int64_t lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  const std::int64_t last = g.width - 1 - shift;  // largest ox * stride
  const std::int64_t hi = last < 0 ? 0 : std::min(g.out_width, last / g.stride + 1);
  return {std::min(lo, hi), hi};
}

// cols[(c*k + ki)*k + kj][(local*rows + oy - row)*ow + ox]
void im2col(const ConvGeometry& g, const Tile& t, const double* x, double* cols) {
  const std::int64_t band = t.rows * g.out_width;
  const std::int64_t width = t.columns(g);
  for (std::int64_t c = 0; c < g.in_channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const auto [lo, hi] = valid_columns(g, kj);
        const std::int64_t shift = kj - g.padding;
        double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * width;
        for (std::int64_t local = 0; local < t.count; ++local) {
          const double* src = x + ((t.first + local) * g.in_channels + c) * g.height * g.width;
          double* dst = row + local * band;
          for (std::int64_t oy = t.row; oy < t.row + t.rows; ++oy) {
            const std::int64_t iy = oy * g.stride - g.padding + ki;
            double* out_row = dst + (oy - t.row) * g.out_width;
            if (iy < 0 || iy >= g.height) {
              std::fill_n(out_row, g.out_width, 0.0);
              continue;
            }
            const double* in_row = src + iy * g.width;
            std::fill_n(out_row, lo, 0.0);
            if (g.stride == 1) {
              std::copy(in_row + lo + shift, in_row + hi + shift, out_row + lo);
            } else {
              for (std::int64_t ox = lo; ox < hi; ++ox)
                out_row[ox] = in_row[ox * g.stride + shift];
            }
            std::fill(out_row + hi, out_row + g.out_width, 0.0);
          }
        }
      }
}

void col2im(const ConvGeometry& g, const Tile& t, const double* cols, double* dx) {
  const std::int64_t band = t.rows * g.out_width;
  const std::int64_t width = t.columns(g);
  for (std::int64_t c = 0; c < g.in_channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const auto [lo, hi] = valid_columns(g, kj);
        const std::int64_t shift = kj - g.padding;
        const double* row = cols + ((c * g.kernel + ki) * g.kernel + kj) * width;
        for (std::int64_t local = 0; local < t.count; ++local) {
          double* dst = dx + ((t.first + local) * g.in_channels + c) * g.height * g.width;
          const double* src = row + local * band;
          for (std::int64_t oy = t.row; oy < t.row + t.rows; ++oy) {
            const std::int64_t iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            double* in_row = dst + iy * g.width;
            const double* col_row = src + (oy - t.row) * g.out_width;
            for (std::int64_t ox = lo; ox < hi; ++ox) in_row[ox * g.stride + shift] += col_row[ox];
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, int stride, int padding, SizeRounding rounding) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(xv.rank() == 4, ErrorKind::shape, "conv2d: input must be [B,C,H,W], got " +
                                                 shape_string(xv.shape()));
  require(wv.rank() == 4, ErrorKind::shape, "conv2d: weight must be [K,C,k,k], got " +
                                                 shape_string(wv.shape()));
  require(wv.dim(1) == xv.dim(1), ErrorKind::shape,
          "conv2d: weight expects " + std::to_string(wv.dim(1)) + " input channels, got " +
              std::to_string(xv.dim(1)));
  require(wv.dim(2) == wv.dim(3), ErrorKind::shape, "conv2d: kernel must be square");
  require(wv.dim(2) % 2 == 1, ErrorKind::invalid_argument, "conv2d: kernel size must be odd");
  require(stride >= 1 && padding >= 0, ErrorKind::invalid_argument,
          "conv2d: stride must be >= 1 and padding >= 0");

  ConvGeometry g{};
  g.batch = xv.dim(0);
  g.in_channels = xv.dim(1);
  g.height = xv.dim(2);
  g.width = xv.dim(3);
  g.out_channels = wv.dim(0);
  g.kernel = wv.dim(2);
  g.stride = stride;
  g.padding = padding;
  g.out_height = output_extent(g.height, g.kernel, stride, padding, rounding);
  g.out_width = output_extent(g.width, g.kernel, stride, padding, rounding);

  Tensor out(Shape{g.batch, g.out_channels, g.out_height, g.out_width});
  const std::vector<Tile> tiles = make_tiles(g);
  thread_local std::vector<double> cols;
  thread_local RowMatrix product;
  ConstMapMatrix weight(wv.ptr(), g.out_channels, g.patch());
  for (const Tile& tile : tiles) {
    cols.resize(static_cast<size_t>(g.patch() * tile.columns(g)));
    im2col(g, tile, xv.ptr(), cols.data());
    ConstMapMatrix col_matrix(cols.data(), g.patch(), tile.columns(g));
    product.noalias() = weight * col_matrix;
    scatter_tile(g, tile, product.data(), out.ptr());
  }

  return x.tape().record(std::move(out), {x, w}, [x, w, g](Tape& t, const Tensor& grad) {
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(w);
    thread_local std::vector<double> cols;
    thread_local std::vector<double> dy_data;
    thread_local RowMatrix grad_cols;
    ConstMapMatrix weight(t.value(w).ptr(), g.out_channels, g.patch());
    for (const Tile& tile : make_tiles(g)) {
      const std::int64_t width = tile.columns(g);
      dy_data.resize(static_cast<size_t>(g.out_channels * width));
      gather_tile(g, tile, grad.ptr(), dy_data.data());
      ConstMapMatrix dy(dy_data.data(), g.out_channels, width);
      if (need_w) {
        cols.resize(static_cast<size_t>(g.patch() * width));
        im2col(g, tile, t.value(x).ptr(), cols.data());
        ConstMapMatrix col_matrix(cols.data(), g.patch(), width);
        MapMatrix dw(t.grad(w).ptr(), g.out_channels, g.patch());
        dw.noalias() += dy * col_matrix.transpose();
      }
      if (need_x) {
        grad_cols.noalias() = weight.transpose() * dy;
        col2im(g, tile, grad_cols.data(), t.grad(x).ptr());
      }
    }
  });
}

}  // namespace gseg::ops
