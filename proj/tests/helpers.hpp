#ifndef NHL_TEST_HELPERS_HPP
#define NHL_TEST_HELPERS_HPP

#include "nhl/model.hpp"

#include <cmath>

namespace nhl::test {

inline Tensor<float> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<float> t(shape);
  for (float& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

inline Tensor<float> uniform_images(const Shape& shape, Rng& rng) {
  Tensor<float> t(shape);
  for (float& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

/// conv1 (4 filters) + two blocks on 3x8x8 inputs, 3 classes.
inline ArchitectureDescriptor tiny_arch(Index classes = 3) {
  ArchitectureDescriptor d;
  d.height = d.width = 8;
  d.conv1.filters = 4;
  d.blocks = {{4, 1}, {6, 2}};
  d.num_classes = classes;
  return d;
}

/// Random model with perturbed batch-norm affine parameters and running stats.
inline ModelCheckpoint randomized_model(const ArchitectureDescriptor& arch, std::uint64_t seed) {
  Rng rng(seed);
  ModelCheckpoint m = build_model(arch, rng);
  for (auto& [name, t] : m.params) {
    if (name.ends_with(".gamma"))
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    if (name.ends_with(".beta") || name == "fc.bias")
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
  }
  for (auto& [name, t] : m.buffers) {
    if (name.ends_with(".running_mean"))
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    if (name.ends_with(".running_var"))
      for (float& v : t.data()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
  return m;
}

inline double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace nhl::test

#endif  // NHL_TEST_HELPERS_HPP
