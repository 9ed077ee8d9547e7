#ifndef NHL_CORRUPTION_HPP
#define NHL_CORRUPTION_HPP

// Parametric image corruptions at severities 1..5. The severity tables follow the
// spirit of the CIFAR-C construction at 32x32 resolution; blur, pixelation and
// compression are local approximations rather than the reference kernels.

#include "nhl/dataset.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace nhl {

enum class CorruptionKind {
  gaussian_noise,
  shot_noise,
  impulse_noise,
  defocus_blur,
  motion_blur,
  contrast,
  brightness,
  pixelate,
  jpeg,
};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 5;
  std::uint64_t seed = 0;
};

std::string to_string(CorruptionKind kind);
/// Accepts the canonical names plus "motion_blur-approx", "jpeg_compression" and "jpeg-approx".
CorruptionKind parse_corruption_kind(std::string_view name);
/// "kind:severity", e.g. "gaussian_noise:5".
CorruptionSpec parse_corruption(std::string_view text, std::uint64_t seed = 0);
const std::vector<CorruptionKind>& all_corruption_kinds();

/// Severity table of each kind's magnitude parameter (index 0 = severity 1):
///   gaussian_noise  noise std                       0.04 0.06 0.08 0.09 0.10
///   shot_noise      photons per unit intensity      500  250  100  75   50
///   impulse_noise   salt-and-pepper fraction        0.03 0.06 0.09 0.17 0.27
///   defocus_blur    disk radius (px)                0.75 1.0  1.25 1.5  2.0
///   motion_blur     line length (px)                3    4    6    8    10
///   contrast        contrast factor                 0.4  0.3  0.2  0.1  0.05
///   brightness      added intensity                 0.1  0.2  0.3  0.4  0.5
///   pixelate        downscale factor                0.95 0.9  0.85 0.75 0.65
///   jpeg            8x8 block quantization step     0.04 0.07 0.10 0.15 0.20
const std::array<double, 5>& severity_table(CorruptionKind kind);

/// Applies the corruption image by image; image i draws from derive_seed(spec.seed, i).
/// Output is clipped to [0, 1]; labels and shapes are unchanged.
DatasetHandle corrupt(const DatasetHandle& data, const CorruptionSpec& spec);

}  // namespace nhl

#endif  // NHL_CORRUPTION_HPP
