#include "gseg/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "gseg/error.hpp"

namespace gseg {

namespace fs = std::filesystem;

// ---- files -----------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::io, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out.good()) {
      std::error_code ec;
      fs::remove(tmp, ec);
      fail(ErrorKind::io, "write to '" + tmp.string() + "' failed");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    fail(ErrorKind::io, "cannot move output into '" + path.string() + "'");
  }
}

// ---- netpbm ----------------------------------------------------------------

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int next_int() {
    skip_space_and_comments();
    int value = 0;
    const char* begin = bytes_.data() + pos_;
    const auto [ptr, ec] = std::from_chars(begin, bytes_.data() + bytes_.size(), value);
    require(ec == std::errc() && ptr != begin, ErrorKind::format, "malformed netpbm header");
    pos_ += static_cast<size_t>(ptr - begin);
    return value;
  }

  std::string_view take(size_t n) {
    require(pos_ + n <= bytes_.size(), ErrorKind::format, "truncated netpbm payload");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_space() const {
    return pos_ < bytes_.size() && std::isspace(static_cast<unsigned char>(bytes_[pos_]));
  }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

}  // namespace

Tensor decode_netpbm(std::string_view bytes, bool as_mask) {
  require(bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6'),
          ErrorKind::format, "not a binary PGM/PPM file");
  const int channels = bytes[1] == '6' ? 3 : 1;
  require(!as_mask || channels == 1, ErrorKind::format, "masks must be P5 (PGM)");
  HeaderReader reader(bytes.substr(2));
  const int width = reader.next_int();
  const int height = reader.next_int();
  const int maxval = reader.next_int();
  require(width > 0 && height > 0, ErrorKind::format, "netpbm dimensions must be positive");
  require(maxval == 255, ErrorKind::format, "only 8-bit netpbm (maxval 255) is supported");
  require(reader.at_space(), ErrorKind::format, "malformed netpbm header");
  reader.advance();
  const size_t plane = static_cast<size_t>(width) * static_cast<size_t>(height);
  const std::string_view payload = reader.take(plane * static_cast<size_t>(channels));

  Tensor t(Shape{channels, height, width});
  for (size_t i = 0; i < plane; ++i)
    for (int c = 0; c < channels; ++c) {
      const auto v = static_cast<unsigned char>(payload[i * static_cast<size_t>(channels) + c]);
      t[static_cast<std::int64_t>(c * plane + i)] = as_mask ? (v >= 128 ? 1.0 : 0.0) : v / 255.0;
    }
  return t;
}

std::string encode_netpbm(const Tensor& t, bool as_mask) {
  require(t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3), ErrorKind::shape,
          "encode_netpbm: expected [1,H,W] or [3,H,W], got " + shape_string(t.shape()));
  require(!as_mask || t.dim(0) == 1, ErrorKind::shape, "masks must have one channel");
  const auto channels = t.dim(0), height = t.dim(1), width = t.dim(2);
  std::string out = (channels == 3 ? "P6\n" : "P5\n") + std::to_string(width) + " " +
                    std::to_string(height) + "\n255\n";
  const std::int64_t plane = height * width;
  out.reserve(out.size() + static_cast<size_t>(plane * channels));
  for (std::int64_t i = 0; i < plane; ++i)
    for (std::int64_t c = 0; c < channels; ++c) {
      const double v = t[c * plane + i];
      int byte;
      if (as_mask) {
        require(v == 0.0 || v == 1.0, ErrorKind::invalid_argument, "mask values must be 0 or 1");
        byte = v == 1.0 ? 255 : 0;
      } else {
        byte = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
      out.push_back(static_cast<char>(byte));
    }
  return out;
}

Tensor read_image(const fs::path& path) { return decode_netpbm(read_file(path), false); }
Tensor read_mask(const fs::path& path) { return decode_netpbm(read_file(path), true); }

void write_image(const fs::path& path, const Tensor& image) {
  write_file_atomic(path, encode_netpbm(image, false));
}

void write_mask(const fs::path& path, const Tensor& mask) {
  write_file_atomic(path, encode_netpbm(mask, true));
}

// ---- config ----------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  require(ec == std::errc() && ptr == value.data() + value.size(), ErrorKind::invalid_argument,
          "config: cannot parse value '" + std::string(value) + "' for key '" +
              std::string(key) + "'");
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail(ErrorKind::invalid_argument,
       "config: expected a boolean for '" + std::string(key) + "', got '" + std::string(value) + "'");
}

}  // namespace

void apply_config_entry(RunConfig& cfg, std::string_view key, std::string_view value) {
  auto& net = cfg.net;
  auto& tr = cfg.train;
  if (key == "group") {
    net.group = GroupSpec::parse(value);
  } else if (key == "base_width") {
    net.base_width = parse_number<int>(key, value);
  } else if (key == "num_stages") {
    net.num_stages = parse_number<int>(key, value);
  } else if (key == "blocks_per_stage") {
    net.blocks_per_stage = parse_number<int>(key, value);
  } else if (key == "downsample") {
    if (value == "pool")
      net.downsample = Downsample::pool;
    else if (value == "strided_conv")
      net.downsample = Downsample::strided_conv;
    else
      fail(ErrorKind::invalid_argument, "config: downsample must be pool or strided_conv");
  } else if (key == "ds_weights") {
    std::array<double, 3> w{};
    std::string_view rest = value;
    for (int i = 0; i < 3; ++i) {
      const size_t comma = rest.find(',');
      require((i < 2) == (comma != std::string_view::npos), ErrorKind::invalid_argument,
              "config: ds_weights needs exactly three comma-separated values");
      w[i] = parse_number<double>(key, trim(rest.substr(0, comma)));
      if (comma != std::string_view::npos) rest = rest.substr(comma + 1);
    }
    net.ds_weights = w;
  } else if (key == "equivariant") {
    net.equivariant = parse_bool(key, value);
  } else if (key == "fusion") {
    if (value == "weighted")
      net.fusion = Fusion::weighted;
    else if (value == "main")
      net.fusion = Fusion::main_only;
    else
      fail(ErrorKind::invalid_argument, "config: fusion must be weighted or main");
  } else if (key == "epochs") {
    tr.epochs = parse_number<int>(key, value);
  } else if (key == "lr") {
    tr.lr = parse_number<double>(key, value);
  } else if (key == "decay_epoch") {
    tr.decay_epoch = parse_number<int>(key, value);
  } else if (key == "decay_factor") {
    tr.decay_factor = parse_number<double>(key, value);
  } else if (key == "momentum") {
    tr.momentum = parse_number<double>(key, value);
  } else if (key == "batch_size") {
    tr.batch_size = parse_number<int>(key, value);
  } else if (key == "seed") {
    tr.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "augment") {
    tr.augment = parse_bool(key, value);
  } else if (key == "metric_averaging") {
    if (value == "per_image")
      tr.averaging = MetricAveraging::per_image;
    else if (value == "pooled")
      tr.averaging = MetricAveraging::pooled;
    else
      fail(ErrorKind::invalid_argument, "config: metric_averaging must be per_image or pooled");
  } else {
    fail(ErrorKind::invalid_argument, "config: unknown key '" + std::string(key) + "'");
  }
}

RunConfig parse_config_text(std::string_view text) {
  RunConfig cfg;
  size_t line_no = 0;
  while (!text.empty()) {
    const size_t eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    ++line_no;
    if (const size_t hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    require(eq != std::string_view::npos, ErrorKind::invalid_argument,
            "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    require(!value.empty(), ErrorKind::invalid_argument,
            "config line " + std::to_string(line_no) + ": empty value for '" + std::string(key) + "'");

    apply_config_entry(cfg, key, value);
  }
  cfg.net.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig parse_config(const fs::path& path) {
  if (path == "default") return parse_config_text("");
  return parse_config_text(read_file(path));
}

std::string format_net_config(const SegNetConfig& c) {
  char weights[128];
  std::snprintf(weights, sizeof weights, "%.17g,%.17g,%.17g", c.ds_weights[0], c.ds_weights[1],
                c.ds_weights[2]);
  std::string s;
  s += "group = " + std::string(c.group.name()) + "\n";
  s += "base_width = " + std::to_string(c.base_width) + "\n";
  s += "num_stages = " + std::to_string(c.num_stages) + "\n";
  s += "blocks_per_stage = " + std::to_string(c.blocks_per_stage) + "\n";
  s += std::string("downsample = ") +
       (c.downsample == Downsample::pool ? "pool" : "strided_conv") + "\n";
  s += std::string("ds_weights = ") + weights + "\n";
  s += std::string("equivariant = ") + (c.equivariant ? "true" : "false") + "\n";
  s += std::string("fusion = ") + (c.fusion == Fusion::weighted ? "weighted" : "main") + "\n";
  return s;
}

// ---- model files -----------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    const auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }

  std::string_view take(size_t n) {
    require(pos_ + n <= bytes_.size(), ErrorKind::format, "model file is truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  size_t pos_ = 0;
};

}  // namespace

std::string encode_model(SegNet& net) {
  std::string out = "GSEG";
  put_u32(out, kModelFormatVersion);
  const std::string cfg = format_net_config(net.config());
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;

  std::uint32_t count = 0;
  net.visit_tensors([&](const std::string&, Tensor&, bool) { ++count; });
  put_u32(out, count);
  net.visit_tensors([&](const std::string& name, Tensor& t, bool) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

std::unique_ptr<SegNet> decode_model(std::string_view bytes) {
  ByteReader in(bytes);
  require(in.take(4) == "GSEG", ErrorKind::format, "not a model file (bad magic)");
  const std::uint32_t version = in.u32();
  require(version == kModelFormatVersion, ErrorKind::format,
          "unsupported model format version " + std::to_string(version));
  const std::uint32_t cfg_len = in.u32();
  const SegNetConfig config = parse_config_text(in.take(cfg_len)).net;
  auto net = std::make_unique<SegNet>(config, 0);

  std::uint32_t expected = 0;
  net->visit_tensors([&](const std::string&, Tensor&, bool) { ++expected; });
  const std::uint32_t count = in.u32();
  require(count == expected, ErrorKind::format,
          "model file holds " + std::to_string(count) + " tensors but the config needs " +
              std::to_string(expected));
  net->visit_tensors([&](const std::string& name, Tensor& t, bool) {
    const std::uint32_t name_len = in.u32();
    require(in.take(name_len) == name, ErrorKind::format,
            "model file tensor order does not match the config at '" + name + "'");
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    require(shape == t.shape(), ErrorKind::format,
            "tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                shape_string(t.shape()));
    for (auto& v : t.data()) v = static_cast<double>(std::bit_cast<float>(in.u32()));
  });
  require(in.done(), ErrorKind::format, "trailing bytes after the last tensor");
  return net;
}

void save_model(SegNet& net, const fs::path& path) { write_file_atomic(path, encode_model(net)); }

std::unique_ptr<SegNet> load_model(const fs::path& path) { return decode_model(read_file(path)); }

void quantize_to_float32(SegNet& net) {
  net.visit_tensors([](const std::string&, Tensor& t, bool) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  });
}

// ---- synthetic data --------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Blob {
  double cx, cy, a, b, theta;
  std::array<double, 4> amp{}, phase{};

  // Boundary radius along polar angle phi (image coordinates).
  double radius(double phi) const {
    const double psi = phi - theta;
    const double ca = b * std::cos(psi), sa = a * std::sin(psi);
    double r = a * b / std::sqrt(ca * ca + sa * sa);
    double wobble = 1.0;
    for (int n = 0; n < 4; ++n) wobble += amp[n] * std::cos((n + 2) * psi + phase[n]);
    return r * wobble;
  }

  // Positive inside, in pixels.
  double depth(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return radius(std::atan2(dy, dx)) - std::hypot(dx, dy);
  }
};

Blob random_blob(Rng& rng, double cx, double cy, double a_lo, double a_hi) {
  Blob blob;
  blob.cx = cx;
  blob.cy = cy;
  blob.a = rng.uniform(a_lo, a_hi);
  blob.b = blob.a * rng.uniform(0.55, 1.0);
  blob.theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (int n = 0; n < 4; ++n) {
    blob.amp[n] = rng.uniform(0.0, 0.15 / (n + 1));
    blob.phase[n] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  return blob;
}

struct Hair {
  double px, py, nx, ny;  // point on the line and unit normal
};

}  // namespace

Sample synthesize_sample(int size, std::uint64_t seed, int index) {
  require(size >= 32 && size % 2 == 0, ErrorKind::invalid_argument,
          "synthetic image size must be even and >= 32");
  Rng rng(splitmix64(splitmix64(seed) + static_cast<std::uint64_t>(index)));
  const double s = size;
  const double two_pi = 2.0 * std::numbers::pi;

  for (;;) {
    const std::array<double, 3> skin{0.80 + rng.uniform(-0.08, 0.08),
                                     0.60 + rng.uniform(-0.08, 0.08),
                                     0.50 + rng.uniform(-0.08, 0.08)};
    std::array<double, 3> lesion{0.40 + rng.uniform(-0.08, 0.08),
                                 0.26 + rng.uniform(-0.06, 0.06),
                                 0.18 + rng.uniform(-0.05, 0.05)};
    const double contrast = rng.uniform(0.4, 1.0);

    struct Wave {
      double kx, ky, phase, amp;
    };
    std::array<Wave, 4> waves{};
    for (auto& w : waves) {
      const double angle = rng.uniform(0.0, two_pi);
      const double freq = two_pi * rng.uniform(2.0, 7.0) / s;
      w = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, two_pi),
           rng.uniform(0.01, 0.04)};
    }

    const Blob outer = random_blob(rng, s / 2 + rng.uniform(-0.15, 0.15) * s,
                                   s / 2 + rng.uniform(-0.15, 0.15) * s, 0.14 * s, 0.32 * s);
    const double inner_angle = rng.uniform(0.0, two_pi);
    const double inner_shift = rng.uniform(0.0, 0.4) * outer.b;
    const Blob inner = random_blob(rng, outer.cx + inner_shift * std::cos(inner_angle),
                                   outer.cy + inner_shift * std::sin(inner_angle),
                                   0.25 * outer.b, 0.6 * outer.b);
    const double inner_dark = rng.uniform(0.1, 0.4);

    std::vector<Hair> hairs(static_cast<size_t>(rng.below(3)));
    for (auto& h : hairs) {
      const double angle = rng.uniform(0.0, two_pi);
      h = {rng.uniform(0.0, s), rng.uniform(0.0, s), std::cos(angle), std::sin(angle)};
    }

    Tensor image(Shape{3, size, size});
    Tensor mask(Shape{1, size, size});
    const std::int64_t plane = static_cast<std::int64_t>(size) * size;
    std::int64_t foreground = 0;
    for (int row = 0; row < size; ++row)
      for (int col = 0; col < size; ++col) {
        const double x = col + 0.5, y = row + 0.5;
        const double d = outer.depth(x, y);
        const bool inside = d > 0.0;
        foreground += inside;
        mask[row * size + col] = inside ? 1.0 : 0.0;

        double texture = 0.0;
        for (const auto& w : waves) texture += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
        const double edge = std::clamp(d / 1.5 + 0.5, 0.0, 1.0);
        const double alpha = contrast * edge;
        const double shade = 1.0 - inner_dark * std::clamp(inner.depth(x, y) / 2.0, 0.0, 1.0);
        double hair = 0.0;
        for (const auto& h : hairs)
          hair = std::max(hair, std::clamp(1.0 - std::abs((x - h.px) * h.nx + (y - h.py) * h.ny) / 0.8,
                                           0.0, 1.0));
        for (int c = 0; c < 3; ++c) {
          double v = (1 - alpha) * skin[c] + alpha * lesion[c] * shade + texture;
          v = (1 - 0.6 * hair) * v + 0.6 * hair * 0.12;
          v += 0.03 * rng.normal();
          image[c * plane + row * size + col] = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
        }
      }

    const double fraction = static_cast<double>(foreground) / static_cast<double>(plane);
    if (fraction >= 0.05 && fraction <= 0.6) {
      char id[16];
      std::snprintf(id, sizeof id, "%05d", index);
      return Sample{std::move(image), std::move(mask), id};
    }
  }
}

std::string image_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05d.ppm", index);
  return buf;
}

std::string mask_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "mask_%05d.pgm", index);
  return buf;
}

void gen_synthetic(int n, int size, std::uint64_t seed, const fs::path& out_dir) {
  require(n >= 1, ErrorKind::invalid_argument, "gen_synthetic: n must be >= 1");
  require(size >= 32 && size % 2 == 0, ErrorKind::invalid_argument,
          "gen_synthetic: size must be even and >= 32");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec && fs::is_directory(out_dir), ErrorKind::io,
          "cannot create output directory '" + out_dir.string() + "'");
  // A failed write removes every file this call created.
  std::vector<fs::path> written;
  try {
    for (int i = 0; i < n; ++i) {
      const Sample s = synthesize_sample(size, seed, i);
      written.push_back(out_dir / image_file_name(i));
      write_image(written.back(), s.image);
      written.push_back(out_dir / mask_file_name(i));
      write_mask(written.back(), s.mask);
    }
  } catch (...) {
    for (const auto& path : written) fs::remove(path, ec);
    throw;
  }
}

Dataset load_dataset(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::io, "'" + dir.string() + "' is not a directory");
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > 8 && name.starts_with("img_") && name.ends_with(".ppm"))
      names.push_back(name);
  }
  std::sort(names.begin(), names.end());
  require(!names.empty(), ErrorKind::io, "no img_*.ppm files in '" + dir.string() + "'");
  Dataset data;
  for (const auto& name : names) {
    const std::string id = name.substr(4, name.size() - 8);
    const fs::path mask_path = dir / ("mask_" + id + ".pgm");
    require(fs::exists(mask_path), ErrorKind::io, "missing mask for '" + name + "'");
    Sample s{read_image(dir / name), read_mask(mask_path), id};
    require(s.image.dim(0) == 3, ErrorKind::format, "'" + name + "' is not a colour image");
    require(s.image.dim(1) == s.mask.dim(1) && s.image.dim(2) == s.mask.dim(2), ErrorKind::format,
            "image and mask sizes differ for '" + name + "'");
    data.push_back(std::move(s));
  }
  return data;
}

}  // namespace gseg
