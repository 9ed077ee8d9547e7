#include "nhl/corruption.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace nhl {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct KindInfo {
  CorruptionKind kind;
  const char* name;
  std::array<double, 5> table;
};

const std::array<KindInfo, 9>& kinds() {
  static const std::array<KindInfo, 9> k{{
      {CorruptionKind::gaussian_noise, "gaussian_noise", {0.04, 0.06, 0.08, 0.09, 0.10}},
      {CorruptionKind::shot_noise, "shot_noise", {500, 250, 100, 75, 50}},
      {CorruptionKind::impulse_noise, "impulse_noise", {0.03, 0.06, 0.09, 0.17, 0.27}},
      {CorruptionKind::defocus_blur, "defocus_blur", {0.75, 1.0, 1.25, 1.5, 2.0}},
      {CorruptionKind::motion_blur, "motion_blur", {3, 4, 6, 8, 10}},
      {CorruptionKind::contrast, "contrast", {0.4, 0.3, 0.2, 0.1, 0.05}},
      {CorruptionKind::brightness, "brightness", {0.1, 0.2, 0.3, 0.4, 0.5}},
      {CorruptionKind::pixelate, "pixelate", {0.95, 0.9, 0.85, 0.75, 0.65}},
      {CorruptionKind::jpeg, "jpeg", {0.04, 0.07, 0.10, 0.15, 0.20}},
  }};
  return k;
}

const KindInfo& info(CorruptionKind kind) {
  for (const KindInfo& k : kinds())
    if (k.kind == kind) return k;
  throw ParameterError("unknown corruption kind");
}

// View of one C x H x W image inside a dataset tensor.
struct Image {
  float* p;
  Index channels, height, width;
  float& at(Index c, Index h, Index w) { return p[(c * height + h) * width + w]; }
  Index size() const { return channels * height * width; }
};

float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

// Poisson sample: Knuth's product method for small means, rounded normal
// approximation above 30.
double poisson(Rng& rng, double mean) {
  if (mean <= 0.0) return 0.0;
  if (mean < 30.0) {
    const double limit = std::exp(-mean);
    double prod = rng.uniform();
    int k = 0;
    while (prod > limit) {
      prod *= rng.uniform();
      ++k;
    }
    return k;
  }
  return std::max(0.0, std::round(mean + std::sqrt(mean) * rng.normal()));
}

// Normalized convolution with clamp-to-edge borders.
void convolve(Image img, const std::vector<double>& kernel, Index kh, Index kw) {
  std::vector<float> src(img.p, img.p + img.size());
  const Index oy = kh / 2, ox = kw / 2;
  for (Index c = 0; c < img.channels; ++c)
    for (Index h = 0; h < img.height; ++h)
      for (Index w = 0; w < img.width; ++w) {
        double acc = 0.0;
        for (Index i = 0; i < kh; ++i)
          for (Index j = 0; j < kw; ++j) {
            const double k = kernel[static_cast<std::size_t>(i * kw + j)];
            if (k == 0.0) continue;
            const Index y = std::clamp<Index>(h + i - oy, 0, img.height - 1);
            const Index x = std::clamp<Index>(w + j - ox, 0, img.width - 1);
            acc += k * static_cast<double>(src[static_cast<std::size_t>((c * img.height + y) * img.width + x)]);
          }
        img.at(c, h, w) = clip01(acc);
      }
}

void normalize(std::vector<double>& kernel) {
  double total = 0.0;
  for (double v : kernel) total += v;
  for (double& v : kernel) v /= total;
}

void defocus(Image img, double radius) {
  const Index half = static_cast<Index>(std::ceil(radius));
  const Index size = 2 * half + 1;
  constexpr int kSuper = 8;
  std::vector<double> kernel(static_cast<std::size_t>(size * size), 0.0);
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j) {
      int hits = 0;
      for (int a = 0; a < kSuper; ++a)
        for (int b = 0; b < kSuper; ++b) {
          const double y = static_cast<double>(i - half) - 0.5 + (a + 0.5) / kSuper;
          const double x = static_cast<double>(j - half) - 0.5 + (b + 0.5) / kSuper;
          hits += x * x + y * y <= radius * radius ? 1 : 0;
        }
      kernel[static_cast<std::size_t>(i * size + j)] = hits;
    }
  normalize(kernel);
  convolve(img, kernel, size, size);
}

void motion(Image img, double length, Rng& rng) {
  const double angle = rng.uniform(-kPi / 4, kPi / 4);
  const Index half = static_cast<Index>(std::ceil(length / 2));
  const Index size = 2 * half + 1;
  std::vector<double> kernel(static_cast<std::size_t>(size * size), 0.0);
  const int samples = 8 * static_cast<int>(std::ceil(length));
  for (int s = 0; s < samples; ++s) {
    const double t = (static_cast<double>(s) / (samples - 1) - 0.5) * (length - 1);
    const double x = static_cast<double>(half) + t * std::cos(angle);
    const double y = static_cast<double>(half) + t * std::sin(angle);
    const auto x0 = static_cast<Index>(std::floor(x)), y0 = static_cast<Index>(std::floor(y));
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    auto splat = [&](Index yy, Index xx, double wgt) {
      if (yy >= 0 && yy < size && xx >= 0 && xx < size) kernel[static_cast<std::size_t>(yy * size + xx)] += wgt;
    };
    splat(y0, x0, (1 - fx) * (1 - fy));
    splat(y0, x0 + 1, fx * (1 - fy));
    splat(y0 + 1, x0, (1 - fx) * fy);
    splat(y0 + 1, x0 + 1, fx * fy);
  }
  normalize(kernel);
  convolve(img, kernel, size, size);
}

void pixelate(Image img, double factor) {
  const Index sh = std::max<Index>(1, static_cast<Index>(std::floor(img.height * factor)));
  const Index sw = std::max<Index>(1, static_cast<Index>(std::floor(img.width * factor)));
  std::vector<double> small(static_cast<std::size_t>(img.channels * sh * sw), 0.0);
  // Area-average downsampling: each source pixel splits its mass across the target cells it overlaps.
  for (Index c = 0; c < img.channels; ++c)
    for (Index y = 0; y < sh; ++y)
      for (Index x = 0; x < sw; ++x) {
        const double y0 = static_cast<double>(y) * img.height / sh, y1 = static_cast<double>(y + 1) * img.height / sh;
        const double x0 = static_cast<double>(x) * img.width / sw, x1 = static_cast<double>(x + 1) * img.width / sw;
        double acc = 0.0, area = 0.0;
        for (auto h = static_cast<Index>(std::floor(y0)); h < static_cast<Index>(std::ceil(y1)); ++h)
          for (auto w = static_cast<Index>(std::floor(x0)); w < static_cast<Index>(std::ceil(x1)); ++w) {
            const double a = (std::min<double>(y1, h + 1) - std::max<double>(y0, h)) *
                             (std::min<double>(x1, w + 1) - std::max<double>(x0, w));
            acc += a * img.at(c, h, w);
            area += a;
          }
        small[static_cast<std::size_t>((c * sh + y) * sw + x)] = acc / area;
      }
  for (Index c = 0; c < img.channels; ++c)
    for (Index h = 0; h < img.height; ++h)
      for (Index w = 0; w < img.width; ++w) {
        const Index y = std::min(sh - 1, h * sh / img.height);
        const Index x = std::min(sw - 1, w * sw / img.width);
        img.at(c, h, w) = clip01(small[static_cast<std::size_t>((c * sh + y) * sw + x)]);
      }
}

void block_quantize(Image img, double step) {
  constexpr Index kBlock = 8;
  for (Index c = 0; c < img.channels; ++c)
    for (Index by = 0; by < img.height; by += kBlock)
      for (Index bx = 0; bx < img.width; bx += kBlock) {
        const Index ey = std::min(img.height, by + kBlock), ex = std::min(img.width, bx + kBlock);
        double mean = 0.0;
        for (Index h = by; h < ey; ++h)
          for (Index w = bx; w < ex; ++w) mean += img.at(c, h, w);
        mean /= static_cast<double>((ey - by) * (ex - bx));
        for (Index h = by; h < ey; ++h)
          for (Index w = bx; w < ex; ++w)
            img.at(c, h, w) = clip01(mean + std::round((img.at(c, h, w) - mean) / step) * step);
      }
}

void apply(Image img, CorruptionKind kind, double param, Rng& rng) {
  switch (kind) {
    case CorruptionKind::gaussian_noise:
      for (Index i = 0; i < img.size(); ++i) img.p[i] = clip01(img.p[i] + param * rng.normal());
      break;
    case CorruptionKind::shot_noise:
      for (Index i = 0; i < img.size(); ++i) img.p[i] = clip01(poisson(rng, img.p[i] * param) / param);
      break;
    case CorruptionKind::impulse_noise:
      for (Index i = 0; i < img.size(); ++i) {
        const double u = rng.uniform();
        if (u < param) img.p[i] = u < param / 2 ? 0.0f : 1.0f;
      }
      break;
    case CorruptionKind::defocus_blur: defocus(img, param); break;
    case CorruptionKind::motion_blur: motion(img, param, rng); break;
    case CorruptionKind::contrast: {
      double mean = 0.0;
      for (Index i = 0; i < img.size(); ++i) mean += img.p[i];
      mean /= static_cast<double>(img.size());
      for (Index i = 0; i < img.size(); ++i) img.p[i] = clip01((img.p[i] - mean) * param + mean);
      break;
    }
    case CorruptionKind::brightness:
      for (Index i = 0; i < img.size(); ++i) img.p[i] = clip01(img.p[i] + param);
      break;
    case CorruptionKind::pixelate: pixelate(img, param); break;
    case CorruptionKind::jpeg: block_quantize(img, param); break;
  }
}

}  // namespace

std::string to_string(CorruptionKind kind) { return info(kind).name; }

CorruptionKind parse_corruption_kind(std::string_view name) {
  static const std::map<std::string, CorruptionKind, std::less<>> aliases{
      {"motion_blur-approx", CorruptionKind::motion_blur},
      {"jpeg_compression", CorruptionKind::jpeg},
      {"jpeg-approx", CorruptionKind::jpeg},
  };
  for (const KindInfo& k : kinds())
    if (name == k.name) return k.kind;
  if (auto it = aliases.find(name); it != aliases.end()) return it->second;
  throw ParameterError("unknown corruption kind '" + std::string(name) + "'");
}

CorruptionSpec parse_corruption(std::string_view text, std::uint64_t seed) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw ParameterError("corruption must be kind:severity, got '" + std::string(text) + "'");
  CorruptionSpec spec;
  spec.kind = parse_corruption_kind(text.substr(0, colon));
  const std::string sev(text.substr(colon + 1));
  if (sev.size() != 1 || sev[0] < '1' || sev[0] > '5')
    throw ParameterError("corruption severity must be 1..5, got '" + sev + "'");
  spec.severity = sev[0] - '0';
  spec.seed = seed;
  return spec;
}

const std::vector<CorruptionKind>& all_corruption_kinds() {
  static const std::vector<CorruptionKind> all = [] {
    std::vector<CorruptionKind> v;
    for (const KindInfo& k : kinds()) v.push_back(k.kind);
    return v;
  }();
  return all;
}

const std::array<double, 5>& severity_table(CorruptionKind kind) { return info(kind).table; }

DatasetHandle corrupt(const DatasetHandle& data, const CorruptionSpec& spec) {
  if (spec.severity < 1 || spec.severity > 5) throw ParameterError("corruption severity must be 1..5");
  const double param = severity_table(spec.kind)[static_cast<std::size_t>(spec.severity - 1)];
  DatasetHandle out = data;
  const Index N = out.size();
  const Index C = out.images.dim(1), H = out.images.dim(2), W = out.images.dim(3);
  for (Index n = 0; n < N; ++n) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(n)));
    apply(Image{out.images.raw() + n * C * H * W, C, H, W}, spec.kind, param, rng);
  }
  return out;
}

}  // namespace nhl
