#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>

#include "gseg/segnet.hpp"
#include "gseg/train.hpp"

namespace gseg {

// ---- images ----------------------------------------------------------------
//
// Binary 8-bit netpbm. Colour images are P6 and load as [3, H, W] in [0, 1];
// masks are P5 and load as [1, H, W] in {0, 1} (threshold 128).

Tensor read_image(const std::filesystem::path& path);
Tensor read_mask(const std::filesystem::path& path);

/// [3, H, W] -> P6, values clamped to [0, 1] and rounded to 8 bits.
void write_image(const std::filesystem::path& path, const Tensor& image);
/// [1, H, W] -> P5 with foreground as 255.
void write_mask(const std::filesystem::path& path, const Tensor& mask);

Tensor decode_netpbm(std::string_view bytes, bool as_mask);
std::string encode_netpbm(const Tensor& t, bool as_mask);

// ---- config ----------------------------------------------------------------

struct RunConfig {
  SegNetConfig net;
  TrainSettings train;
};

/// `key = value` lines with `#` comments. Unknown keys are rejected.
RunConfig parse_config_text(std::string_view text);
/// One key of the same grammar; the result is not validated.
void apply_config_entry(RunConfig& cfg, std::string_view key, std::string_view value);
/// The literal path "default" yields the built-in defaults.
RunConfig parse_config(const std::filesystem::path& path);

/// Net keys only, in the grammar parse_config_text accepts.
std::string format_net_config(const SegNetConfig& config);

// ---- model files -----------------------------------------------------------
//
//   "GSEG" | u32 version | u32 len + config text |
//   u32 count | per tensor: u32 len + name, u32 rank, u32 dims..., f32 data
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kModelFormatVersion = 1;

std::string encode_model(SegNet& net);
std::unique_ptr<SegNet> decode_model(std::string_view bytes);
void save_model(SegNet& net, const std::filesystem::path& path);
std::unique_ptr<SegNet> load_model(const std::filesystem::path& path);

/// Rounds every serialized tensor through float32, which is what a
/// save/load round trip does to the weights.
void quantize_to_float32(SegNet& net);

// ---- datasets --------------------------------------------------------------

std::string image_file_name(int index);  // img_00000.ppm
std::string mask_file_name(int index);   // mask_00000.pgm

/// Writes n image/mask pairs. Each lesion is an irregular blob with random
/// centre, radii, orientation and boundary harmonics on a textured
/// background; foreground fraction is kept within [0.05, 0.6].
void gen_synthetic(int n, int size, std::uint64_t seed, const std::filesystem::path& out_dir);

/// In-memory form of gen_synthetic's sample `index`.
Sample synthesize_sample(int size, std::uint64_t seed, int index);

/// Loads every img_*.ppm with its mask_*.pgm, sorted by name.
Dataset load_dataset(const std::filesystem::path& dir);

/// Writes through a temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace gseg
