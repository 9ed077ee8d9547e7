#include "nhl/corruption.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace nhl {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("nhl_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels, std::uint32_t magic = 0x803) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels, std::uint32_t magic = 0x801) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

DatasetHandle constant_images(Index n, float value) {
  DatasetHandle d;
  d.images = Tensor<float>({n, 3, 16, 16}, value);
  d.labels.assign(static_cast<std::size_t>(n), 0);
  d.num_classes = 2;
  return d;
}

double mean_abs_change(const DatasetHandle& a, const DatasetHandle& b) {
  double s = 0.0;
  for (Index i = 0; i < a.images.size(); ++i) s += std::abs(static_cast<double>(a.images[i]) - b.images[i]);
  return s / static_cast<double>(a.images.size());
}

TEST(SyntheticDataset, DeterministicLabelledAndInRange) {
  const DatasetHandle a = make_synthetic_dataset(10, 3, 16, 7);
  const DatasetHandle b = make_synthetic_dataset(10, 3, 16, 7);
  const DatasetHandle c = make_synthetic_dataset(10, 3, 16, 8);
  EXPECT_EQ(a.images.shape(), (Shape{30, 3, 16, 16}));
  EXPECT_EQ(a.images.values(), b.images.values());
  EXPECT_NE(a.images.values(), c.images.values());
  for (Index i = 0; i < a.size(); ++i) EXPECT_EQ(a.labels[static_cast<std::size_t>(i)], i % 10);
  const auto [lo, hi] = std::minmax_element(a.images.data().begin(), a.images.data().end());
  EXPECT_GE(*lo, 0.0f);
  EXPECT_LE(*hi, 1.0f);
  EXPECT_EQ(a.provenance, "synthetic");
  EXPECT_EQ(synthetic_class_names().size(), 10u);
  EXPECT_NO_THROW(a.validate());
}

TEST(SyntheticDataset, RejectsInvalidSizes) {
  EXPECT_THROW(make_synthetic_dataset(10, 3, 15, 1), ParameterError);
  EXPECT_THROW(make_synthetic_dataset(1, 3, 16, 1), ParameterError);
  EXPECT_THROW(make_synthetic_dataset(11, 3, 16, 1), ParameterError);
  EXPECT_THROW(make_synthetic_dataset(10, 0, 16, 1), ParameterError);
}

TEST(LoadIdx, RecoversExactPixels) {
  const fs::path dir = temp_dir("idx_ok");
  std::vector<unsigned char> px(2 * 2 * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(i * 23);
  write_bytes(dir / "img", idx_images(2, 2, 3, px));
  write_bytes(dir / "lab", idx_labels({7, 2}));
  const DatasetHandle d = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 2, 3}));
  for (std::size_t i = 0; i < px.size(); ++i)
    EXPECT_EQ(d.images[static_cast<Index>(i)], static_cast<float>(px[i]) / 255.0f);
  EXPECT_EQ(d.labels, (std::vector<int>{7, 2}));
  EXPECT_EQ(d.provenance, "idx");
}

TEST(LoadIdx, DimensionsAreBigEndian) {
  const fs::path dir = temp_dir("idx_endian");
  write_bytes(dir / "img", idx_images(1, 28, 28, std::vector<unsigned char>(28 * 28, 255)));
  write_bytes(dir / "lab", idx_labels({1}));
  const DatasetHandle d = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(d.images.dim(2), 28);  // not 469762048
  EXPECT_EQ(d.images.dim(3), 28);
  EXPECT_EQ(d.images[0], 1.0f);
}

TEST(LoadIdx, RejectsBadFiles) {
  const fs::path dir = temp_dir("idx_bad");
  const std::vector<unsigned char> px(2 * 4, 9);
  write_bytes(dir / "img", idx_images(2, 2, 2, px));
  write_bytes(dir / "lab3", idx_labels({0, 1, 2}));
  EXPECT_THROW(load_idx(dir / "img", dir / "lab3"), FormatError);
  write_bytes(dir / "lab2", idx_labels({0, 1}));
  write_bytes(dir / "magic", idx_images(2, 2, 2, px, 0x802));
  EXPECT_THROW(load_idx(dir / "magic", dir / "lab2"), FormatError);
  write_bytes(dir / "labmagic", idx_labels({0, 1}, 0x803));
  EXPECT_THROW(load_idx(dir / "img", dir / "labmagic"), FormatError);
  write_bytes(dir / "short", idx_images(2, 2, 2, std::vector<unsigned char>(7, 9)));
  EXPECT_THROW(load_idx(dir / "short", dir / "lab2"), FormatError);
  EXPECT_ANY_THROW(load_idx(dir / "missing", dir / "lab2"));
  EXPECT_NO_THROW(load_idx(dir / "img", dir / "lab2"));
}

TEST(Corruption, GaussianMatchesPerPixelOracle) {
  const DatasetHandle clean = make_synthetic_dataset(3, 2, 16, 5);
  const CorruptionSpec spec{CorruptionKind::gaussian_noise, 5, 77};
  const DatasetHandle out = corrupt(clean, spec);
  const Index per_image = 3 * 16 * 16;
  for (Index n = 0; n < clean.size(); ++n) {
    Rng rng(derive_seed(77, static_cast<std::uint64_t>(n)));
    for (Index i = 0; i < per_image; ++i) {
      const double v = static_cast<double>(clean.images[n * per_image + i]) + 0.10 * rng.normal();
      ASSERT_EQ(out.images[n * per_image + i], static_cast<float>(std::clamp(v, 0.0, 1.0))) << n << " " << i;
    }
  }
  EXPECT_EQ(out.labels, clean.labels);
}

TEST(Corruption, ContrastPivotsAtTheMean) {
  const DatasetHandle grey = constant_images(3, 0.5f);
  for (int s = 1; s <= 5; ++s)
    EXPECT_EQ(corrupt(grey, {CorruptionKind::contrast, s, 1}).images.values(), grey.images.values()) << s;
}

TEST(Corruption, NoiseSeverityIsMonotone) {
  const DatasetHandle clean = make_synthetic_dataset(10, 10, 16, 3);
  for (CorruptionKind kind : {CorruptionKind::gaussian_noise, CorruptionKind::shot_noise, CorruptionKind::impulse_noise}) {
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      const double change = mean_abs_change(clean, corrupt(clean, {kind, s, 9}));
      EXPECT_GE(change, prev) << to_string(kind) << " severity " << s;
      prev = change;
    }
    EXPECT_GT(prev, 0.0);
  }
}

TEST(Corruption, EveryKindKeepsLabelsShapesAndRange) {
  const DatasetHandle clean = make_synthetic_dataset(4, 2, 16, 2);
  for (CorruptionKind kind : all_corruption_kinds()) {
    for (int s : {1, 5}) {
      const DatasetHandle out = corrupt(clean, {kind, s, 4});
      EXPECT_EQ(out.images.shape(), clean.images.shape()) << to_string(kind);
      EXPECT_EQ(out.labels, clean.labels);
      EXPECT_NO_THROW(out.validate()) << to_string(kind);
      EXPECT_NE(out.images.values(), clean.images.values()) << to_string(kind) << " severity " << s;
      EXPECT_EQ(out.images.values(), corrupt(clean, {kind, s, 4}).images.values()) << to_string(kind);
    }
  }
  EXPECT_THROW(corrupt(clean, {CorruptionKind::contrast, 0, 1}), ParameterError);
  EXPECT_THROW(corrupt(clean, {CorruptionKind::contrast, 6, 1}), ParameterError);
}

TEST(Corruption, SeverityTablesAreStrictlyMonotone) {
  for (CorruptionKind kind : all_corruption_kinds()) {
    const auto& t = severity_table(kind);
    // Contrast factor and pixelate scale shrink as the corruption gets stronger.
    const bool decreasing = kind == CorruptionKind::contrast || kind == CorruptionKind::pixelate ||
                            kind == CorruptionKind::shot_noise;
    for (std::size_t i = 1; i < t.size(); ++i) {
      if (decreasing) {
        EXPECT_LT(t[i], t[i - 1]) << to_string(kind);
      } else {
        EXPECT_GT(t[i], t[i - 1]) << to_string(kind);
      }
    }
  }
  EXPECT_EQ(severity_table(CorruptionKind::gaussian_noise), (std::array<double, 5>{0.04, 0.06, 0.08, 0.09, 0.10}));
}

TEST(Corruption, ParsingAndAliases) {
  const CorruptionSpec s = parse_corruption("gaussian_noise:5", 3);
  EXPECT_EQ(s.kind, CorruptionKind::gaussian_noise);
  EXPECT_EQ(s.severity, 5);
  EXPECT_EQ(s.seed, 3u);
  EXPECT_EQ(parse_corruption_kind("motion_blur-approx"), CorruptionKind::motion_blur);
  EXPECT_EQ(parse_corruption_kind("jpeg-approx"), CorruptionKind::jpeg);
  EXPECT_EQ(parse_corruption_kind("jpeg_compression"), CorruptionKind::jpeg);
  for (CorruptionKind k : all_corruption_kinds()) EXPECT_EQ(parse_corruption_kind(to_string(k)), k);
  EXPECT_THROW(parse_corruption("frost:3"), ParameterError);
  EXPECT_THROW(parse_corruption("gaussian_noise"), ParameterError);
  EXPECT_THROW(parse_corruption("gaussian_noise:6"), ParameterError);
  EXPECT_THROW(parse_corruption("gaussian_noise:"), ParameterError);
}

TEST(StreamBatches, SizesOrderAndSeeds) {
  DatasetHandle d = constant_images(10, 0.0f);
  for (Index i = 0; i < 10; ++i) {
    d.images[i * 3 * 16 * 16] = static_cast<float>(i) / 10.0f;
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(i % 2);
  }
  const auto plain = stream_batches(d, {4, false, 0, true});
  ASSERT_EQ(plain.size(), 3u);
  EXPECT_EQ(plain[0].size(), 4);
  EXPECT_EQ(plain[1].size(), 4);
  EXPECT_EQ(plain[2].size(), 2);
  Index expected = 0;
  for (const Batch& b : plain)
    for (std::size_t j = 0; j < b.indices.size(); ++j, ++expected) {
      EXPECT_EQ(b.indices[j], expected);
      EXPECT_EQ(b.images[static_cast<Index>(j) * 3 * 16 * 16], static_cast<float>(expected) / 10.0f);
      EXPECT_EQ(b.labels[j], static_cast<int>(expected % 2));
    }

  EXPECT_EQ(stream_batches(d, {4, false, 0, false}).size(), 2u);
  EXPECT_EQ(stream_batches(d, {3, false, 0, true}).size(), 3u);  // trailing single sample dropped

  const auto s1 = stream_batches(d, {4, true, 5, true});
  const auto s2 = stream_batches(d, {4, true, 5, true});
  const auto s3 = stream_batches(d, {4, true, 6, true});
  std::vector<Index> o1, o2, o3;
  for (const auto& b : s1) o1.insert(o1.end(), b.indices.begin(), b.indices.end());
  for (const auto& b : s2) o2.insert(o2.end(), b.indices.begin(), b.indices.end());
  for (const auto& b : s3) o3.insert(o3.end(), b.indices.begin(), b.indices.end());
  EXPECT_EQ(o1, o2);
  EXPECT_NE(o1, o3);
  std::vector<Index> sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (Index i = 0; i < 10; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
  EXPECT_THROW(stream_batches(d, {1, false, 0, true}), ParameterError);
}

TEST(DatasetCache, RoundTrip) {
  const fs::path dir = temp_dir("cache");
  const DatasetHandle d = make_synthetic_dataset(3, 2, 16, 4);
  save_dataset(dir / "d.nhld", d, nlohmann::json{{"seed", 4}});
  const DatasetHandle back = load_dataset(dir / "d.nhld");
  EXPECT_EQ(back.images.values(), d.images.values());
  EXPECT_EQ(back.images.shape(), d.images.shape());
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.num_classes, 3);
  write_bytes(dir / "junk", {1, 2, 3});
  EXPECT_ANY_THROW(load_dataset(dir / "junk"));
}

}  // namespace
}  // namespace nhl
