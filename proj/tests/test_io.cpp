#include <unistd.h>

#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "gseg/error.hpp"
#include "gseg/io.hpp"

using namespace gseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("gseg_test_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

SegNetConfig toy() {
  SegNetConfig c;
  c.base_width = 2;
  c.blocks_per_stage = 1;
  return c;
}

std::uint32_t read_u32(const std::string& bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + i]);
  return v;
}

void write_u32(std::string& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

std::vector<Tensor> all_tensors(SegNet& net) {
  std::vector<Tensor> out;
  net.visit_tensors([&](const std::string&, Tensor& t, bool) { out.push_back(t); });
  return out;
}

}  // namespace

TEST_CASE("netpbm decoding") {
  const std::string black_pgm = std::string("P5 2 2 255\n") + std::string(4, '\0');
  const Tensor zeros = decode_netpbm(black_pgm, true);
  CHECK(zeros.shape() == Shape{1, 2, 2});
  for (double v : zeros.data()) CHECK(v == 0.0);

  std::string ppm = "P6 4 4 255\n";
  for (int i = 0; i < 48; ++i) ppm.push_back(static_cast<char>(i * 5));
  const Tensor img = decode_netpbm(ppm, false);
  CHECK(img.shape() == Shape{3, 4, 4});
  // Interleaved RGB becomes planar: channel 1 of pixel (0, 1) is byte 4.
  CHECK(img[1 * 16 + 1] == doctest::Approx(20.0 / 255.0).epsilon(1e-15));

  // Comments in the header and mask thresholding at 128.
  const std::string mask = std::string("P5\n# note\n3 1\n255\n") + "\x7f\x80\xff";
  const Tensor m = decode_netpbm(mask, true);
  CHECK(m[0] == 0.0);
  CHECK(m[1] == 1.0);
  CHECK(m[2] == 1.0);

  CHECK_THROWS_AS(decode_netpbm("P6 4 4 255\n" + std::string(47, 'x'), false), Error);
  CHECK_THROWS_AS(decode_netpbm("P3 1 1 255\n1 2 3", false), Error);
  CHECK_THROWS_AS(decode_netpbm("P6 4 x 255\n", false), Error);
  CHECK_THROWS_AS(decode_netpbm("P6 1 1 65535\n\x01\x02\x03\x04\x05\x06", false), Error);
  CHECK_THROWS_AS(decode_netpbm("P6 0 1 255\n", false), Error);
  CHECK_THROWS_AS(decode_netpbm(ppm, true), Error);
  CHECK_THROWS_AS(decode_netpbm("", false), Error);
}

TEST_CASE("image round trip within one quantization step") {
  TempDir dir("img");
  Rng rng(1);
  const Tensor img = random_uniform({3, 5, 7}, rng, 0.0, 1.0);
  write_image(dir.path / "a.ppm", img);
  const Tensor back = read_image(dir.path / "a.ppm");
  CHECK(back.shape() == img.shape());
  CHECK(max_abs_diff(back, img) <= 1.0 / 255.0);
  // Rounding, not truncation: the error is at most half a step.
  CHECK(max_abs_diff(back, img) <= 0.5 / 255.0 + 1e-12);

  Tensor mask({1, 3, 3});
  for (int i = 0; i < 9; ++i) mask[i] = i % 2;
  write_mask(dir.path / "m.pgm", mask);
  CHECK(max_abs_diff(read_mask(dir.path / "m.pgm"), mask) == 0.0);
  CHECK(encode_netpbm(mask, true) == read_file(dir.path / "m.pgm"));

  CHECK_THROWS_AS(write_mask(dir.path / "bad.pgm", Tensor({1, 2, 2}, 0.5)), Error);
  CHECK_FALSE(fs::exists(dir.path / "bad.pgm"));
  CHECK_THROWS_AS(read_image(dir.path / "missing.ppm"), Error);
}

TEST_CASE("config parsing") {
  const RunConfig d = parse_config_text("");
  CHECK(d.net.group == GroupSpec::p4m());
  CHECK(d.net.base_width == 8);
  CHECK(d.net.ds_weights == std::array<double, 3>{0.7, 0.2, 0.1});
  CHECK(d.net.downsample == Downsample::pool);
  CHECK(d.train.epochs == 70);
  CHECK(d.train.lr == 0.01);
  CHECK(d.train.decay_epoch == 60);
  CHECK(d.train.momentum == 0.9);

  CHECK(parse_config_text("group = p4\n").net.group.order() == 4);
  const RunConfig c = parse_config_text(
      "# comment\n  base_width=3  \nblocks_per_stage = 1 # trailing\ndownsample = strided_conv\n"
      "ds_weights = 0.5, 0.3, 0.2\nlr = 0.05\naugment = true\nseed = 42\n");
  CHECK(c.net.base_width == 3);
  CHECK(c.net.blocks_per_stage == 1);
  CHECK(c.net.downsample == Downsample::strided_conv);
  CHECK(c.net.ds_weights == std::array<double, 3>{0.5, 0.3, 0.2});
  CHECK(c.train.lr == 0.05);
  CHECK(c.train.augment);
  CHECK(c.train.seed == 42);

  CHECK_THROWS_AS(parse_config_text("ds_weights = 0.5,0.5,0.5"), Error);
  CHECK_THROWS_AS(parse_config_text("ds_weights = 0.5,0.5"), Error);
  CHECK_THROWS_AS(parse_config_text("colour = red"), Error);
  CHECK_THROWS_AS(parse_config_text("base_width = eight"), Error);
  CHECK_THROWS_AS(parse_config_text("base_width = 8x"), Error);
  CHECK_THROWS_AS(parse_config_text("base_width"), Error);
  CHECK_THROWS_AS(parse_config_text("group = p6"), Error);
  CHECK_THROWS_AS(parse_config_text("base_width ="), Error);

  // The net section round-trips through its own text form.
  SegNetConfig n = toy();
  n.group = GroupSpec::p4();
  n.ds_weights = {0.6, 0.3, 0.1};
  n.fusion = Fusion::main_only;
  const SegNetConfig back = parse_config_text(format_net_config(n)).net;
  CHECK(format_net_config(back) == format_net_config(n));
  CHECK(back.group == n.group);
  CHECK(back.fusion == n.fusion);
  CHECK(back.ds_weights == n.ds_weights);

  const RunConfig def = parse_config("default");
  CHECK(def.net.base_width == 8);
  CHECK_THROWS_AS(parse_config("/nonexistent/gseg.cfg"), Error);
}

TEST_CASE("model round trip is bit exact at float32") {
  TempDir dir("model");
  SegNet net(toy(), 3);
  // Non-trivial running statistics travel with the model.
  Rng rng(4);
  {
    Tape tape;
    net.forward(tape, tape.constant(random_uniform({2, 3, 16, 16}, rng, 0.0, 1.0)), Mode::train);
  }
  save_model(net, dir.path / "m.gseg");
  const std::string bytes = read_file(dir.path / "m.gseg");
  CHECK(bytes.substr(0, 4) == "GSEG");
  CHECK(read_u32(bytes, 4) == kModelFormatVersion);

  auto loaded = load_model(dir.path / "m.gseg");
  CHECK(encode_model(*loaded) == bytes);
  quantize_to_float32(net);
  const auto a = all_tensors(net), b = all_tensors(*loaded);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);
  for (const Tensor& t : b)
    for (double v : t.data()) CHECK(static_cast<double>(static_cast<float>(v)) == v);

  const Tensor x = random_uniform({2, 3, 16, 16}, rng, 0.0, 1.0);
  Tape tape(false);
  const SegOutput ya = net.forward(tape, tape.constant(x), Mode::eval);
  const SegOutput yb = loaded->forward(tape, tape.constant(x), Mode::eval);
  CHECK(max_abs_diff(ya.main.value(), yb.main.value()) == 0.0);
  CHECK(max_abs_diff(ya.aux1.value(), yb.aux1.value()) == 0.0);
  CHECK(max_abs_diff(predict(net, x), predict(*loaded, x)) == 0.0);
  CHECK(format_net_config(loaded->config()) == format_net_config(net.config()));
}

TEST_CASE("model loading rejects damaged files") {
  SegNet net(toy(), 1);
  const std::string good = encode_model(net);
  CHECK_NOTHROW(decode_model(good));

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_model(bad_magic), doctest::Contains("magic"), Error);

  std::string bad_version = good;
  write_u32(bad_version, 4, kModelFormatVersion + 1);
  CHECK_THROWS_AS(decode_model(bad_version), Error);

  // Tensor count sits right after the config text.
  const std::size_t count_at = 12 + read_u32(good, 8);
  std::string bad_count = good;
  write_u32(bad_count, count_at, read_u32(good, count_at) - 1);
  CHECK_THROWS_AS(decode_model(bad_count), Error);

  CHECK_THROWS_AS(decode_model(good.substr(0, good.size() - 3)), Error);
  CHECK_THROWS_AS(decode_model(good + "x"), Error);
  CHECK_THROWS_AS(decode_model(""), Error);
}

TEST_CASE("gen_synthetic") {
  TempDir a("gen_a"), b("gen_b");
  gen_synthetic(1, 32, 9, a.path);
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(a.path)) ++files;
  CHECK(files == 2);
  CHECK(fs::exists(a.path / image_file_name(0)));
  CHECK(fs::exists(a.path / mask_file_name(0)));
  CHECK(image_file_name(12) == "img_00012.ppm");
  CHECK(mask_file_name(12) == "mask_00012.pgm");

  TempDir c("gen_c"), d("gen_d");
  gen_synthetic(6, 48, 21, c.path);
  gen_synthetic(6, 48, 21, d.path);
  for (int i = 0; i < 6; ++i) {
    CHECK(read_file(c.path / image_file_name(i)) == read_file(d.path / image_file_name(i)));
    CHECK(read_file(c.path / mask_file_name(i)) == read_file(d.path / mask_file_name(i)));
  }
  gen_synthetic(6, 48, 22, b.path);
  CHECK(read_file(b.path / image_file_name(0)) != read_file(c.path / image_file_name(0)));

  const Dataset data = load_dataset(c.path);
  REQUIRE(data.size() == 6);
  for (int i = 0; i < 6; ++i) {
    const Sample s = synthesize_sample(48, 21, i);
    CHECK(max_abs_diff(read_mask(c.path / mask_file_name(i)), s.mask) == 0.0);
    CHECK(max_abs_diff(data[i].image, s.image) <= 0.5 / 255.0 + 1e-12);
  }

  CHECK_THROWS_AS(gen_synthetic(1, 31, 1, a.path), Error);
  CHECK_THROWS_AS(gen_synthetic(1, 16, 1, a.path), Error);
  CHECK_THROWS_AS(gen_synthetic(0, 32, 1, a.path), Error);
  CHECK_THROWS_AS(gen_synthetic(1, 32, 1, "/proc/gseg_not_writable"), Error);
}

TEST_CASE("synthetic samples stay within the foreground budget") {
  for (std::uint64_t seed : {1, 2, 3})
    for (int i = 0; i < 100; ++i) {
      const Sample s = synthesize_sample(64, seed, i);
      CHECK(s.image.shape() == Shape{3, 64, 64});
      double fg = 0.0;
      bool binary = true, in_range = true;
      for (double v : s.mask.data()) {
        binary = binary && (v == 0.0 || v == 1.0);
        fg += v;
      }
      for (double v : s.image.data()) in_range = in_range && v >= 0.0 && v <= 1.0;
      fg /= 64.0 * 64.0;
      CHECK(binary);
      CHECK(in_range);
      CHECK(fg >= 0.05);
      CHECK(fg <= 0.6);
    }
}

TEST_CASE("load_dataset pairs images with masks") {
  TempDir dir("load");
  CHECK_THROWS_AS(load_dataset(dir.path), Error);
  gen_synthetic(2, 32, 5, dir.path);
  fs::remove(dir.path / mask_file_name(1));
  CHECK_THROWS_AS(load_dataset(dir.path), Error);
  CHECK_THROWS_AS(load_dataset(dir.path / "nope"), Error);
}

TEST_CASE("atomic writes leave no temporary behind") {
  TempDir dir("atomic");
  write_file_atomic(dir.path / "f.bin", "abc");
  write_file_atomic(dir.path / "f.bin", "defg");
  CHECK(read_file(dir.path / "f.bin") == "defg");
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
  CHECK(files == 1);
  CHECK_THROWS_AS(write_file_atomic(dir.path / "no_such_dir" / "f.bin", "x"), Error);
}
