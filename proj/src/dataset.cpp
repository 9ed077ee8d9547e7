#include "nhl/dataset.hpp"

#include "nhl/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace nhl {

void DatasetHandle::validate() const {
  if (images.rank() != 4) throw FormatError("dataset images must be N x C x H x W");
  if (static_cast<Index>(labels.size()) != images.dim(0)) throw FormatError("dataset label count != image count");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw FormatError("dataset label " + std::to_string(y) + " out of range");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f)) throw FormatError("dataset pixel outside [0, 1]");
}

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMinContrast = 0.12;  // luminance gap between shape and mean background
constexpr double kRamp = 0.25;         // background gradient amplitude across the image
constexpr double kGrating = 0.06;      // background texture amplitude

// Point-in-shape tests in the shape's local frame (unit scale, y pointing down).
bool inside_triangle(double x, double y) {
  const std::array<std::array<double, 2>, 3> v{{{0.0, -0.9}, {0.85, 0.7}, {-0.85, 0.7}}};
  auto side = [&](int i, int j) {
    return (v[j][0] - v[i][0]) * (y - v[i][1]) - (v[j][1] - v[i][1]) * (x - v[i][0]);
  };
  const double a = side(0, 1), b = side(1, 2), c = side(2, 0);
  return (a >= 0 && b >= 0 && c >= 0) || (a <= 0 && b <= 0 && c <= 0);
}

bool inside_plus(double x, double y) {
  return (std::abs(x) <= 0.25 && std::abs(y) <= 0.95) || (std::abs(y) <= 0.25 && std::abs(x) <= 0.95);
}

bool inside_shape(int cls, double x, double y) {
  const double r = std::hypot(x, y);
  const double box = std::max(std::abs(x), std::abs(y));
  switch (cls) {
    case 0: return r <= 1.0;
    case 1: return box <= 0.8;
    case 2: return inside_triangle(x, y);
    case 3: return r >= 0.55 && r <= 1.0;
    case 4: return inside_plus(x, y);
    case 5: {
      const double s = std::sqrt(0.5);
      return inside_plus(s * (x + y), s * (y - x));
    }
    case 6: return std::abs(y) <= 0.3 && std::abs(x) <= 1.0;
    case 7: return std::abs(x) <= 0.3 && std::abs(y) <= 1.0;
    case 8: return std::abs(x) / 0.65 + std::abs(y) <= 1.0;
    case 9: return box >= 0.5 && box <= 0.85;
    default: return false;
  }
}

double luminance(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names{"disk", "square", "triangle", "ring", "plus",
                                              "cross", "hbar", "vbar", "diamond", "frame"};
  return names;
}

DatasetHandle make_synthetic_dataset(int num_classes, Index n_per_class, Index size, std::uint64_t seed) {
  if (num_classes < 2 || num_classes > static_cast<int>(synthetic_class_names().size()))
    throw ParameterError("synthetic dataset supports 2..10 classes");
  if (n_per_class < 1) throw ParameterError("synthetic dataset needs n_per_class >= 1");
  if (size < 16) throw ParameterError("synthetic image size must be >= 16");

  const Index N = num_classes * n_per_class;
  constexpr int kSuper = 4;
  DatasetHandle data;
  data.num_classes = num_classes;
  data.provenance = "synthetic";
  data.images = Tensor<float>({N, 3, size, size});
  data.labels.resize(static_cast<std::size_t>(N));
  const double S = static_cast<double>(size);
  for (Index i = 0; i < N; ++i) {
    const int cls = static_cast<int>(i % num_classes);
    data.labels[static_cast<std::size_t>(i)] = cls;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::array<double, 3> bg{}, fg{};
    for (double& c : bg) c = rng.uniform(0.1, 0.9);
    do {
      for (double& c : fg) c = rng.uniform(0.1, 0.9);
    } while (std::abs(luminance(fg) - luminance(bg)) < kMinContrast);
    const double cx = S / 2 + rng.uniform(-0.15, 0.15) * S;
    const double cy = S / 2 + rng.uniform(-0.15, 0.15) * S;
    const double scale = rng.uniform(0.18, 0.34) * S;
    const double theta = rng.uniform(-15.0, 15.0) * kPi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    // Background: linear ramp plus a sinusoidal grating, per channel.
    std::array<double, 3> ramp_x{}, ramp_y{};
    for (std::size_t c = 0; c < 3; ++c) {
      ramp_x[c] = rng.uniform(-kRamp, kRamp);
      ramp_y[c] = rng.uniform(-kRamp, kRamp);
    }
    const double freq = rng.uniform(0.15, 0.6), orient = rng.uniform(0.0, kPi), phase = rng.uniform(0.0, 2 * kPi);
    for (Index py = 0; py < size; ++py) {
      for (Index px = 0; px < size; ++px) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double dx = (static_cast<double>(px) + (sx + 0.5) / kSuper - cx) / scale;
            const double dy = (static_cast<double>(py) + (sy + 0.5) / kSuper - cy) / scale;
            hits += inside_shape(cls, ct * dx + st * dy, -st * dx + ct * dy) ? 1 : 0;
          }
        const double alpha = static_cast<double>(hits) / (kSuper * kSuper);
        const double u = static_cast<double>(px) / S - 0.5, v = static_cast<double>(py) / S - 0.5;
        const double grating =
            kGrating * std::sin(freq * (std::cos(orient) * static_cast<double>(px) + std::sin(orient) * static_cast<double>(py)) + phase);
        for (std::size_t c = 0; c < 3; ++c) {
          const double back = std::clamp(bg[c] + ramp_x[c] * u + ramp_y[c] * v + grating, 0.0, 1.0);
          data.images.at(i, static_cast<Index>(c), py, px) = static_cast<float>(back * (1.0 - alpha) + fg[c] * alpha);
        }
      }
    }
  }
  return data;
}

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("IDX header is truncated");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

}  // namespace

DatasetHandle load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = read_file(images_path);
  const std::string lab = read_file(labels_path);
  if (read_be32(img, 0) != 0x00000803u) throw FormatError("bad IDX image magic in " + images_path.string());
  if (read_be32(lab, 0) != 0x00000801u) throw FormatError("bad IDX label magic in " + labels_path.string());
  const std::uint32_t n = read_be32(img, 4), rows = read_be32(img, 8), cols = read_be32(img, 12);
  const std::uint32_t n_labels = read_be32(lab, 4);
  if (n != n_labels)
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX file has an empty dimension");
  const std::size_t pixels = static_cast<std::size_t>(n) * rows * cols;
  if (img.size() - 16 < pixels) throw FormatError("IDX image payload is truncated");
  if (lab.size() - 8 < n) throw FormatError("IDX label payload is truncated");

  DatasetHandle data;
  data.provenance = "idx";
  std::vector<float> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i)
    values[i] = static_cast<float>(static_cast<unsigned char>(img[16 + i])) / 255.0f;
  data.images = Tensor<float>({static_cast<Index>(n), 1, static_cast<Index>(rows), static_cast<Index>(cols)},
                              std::move(values));
  data.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    data.labels[i] = static_cast<unsigned char>(lab[8 + i]);
    max_label = std::max(max_label, data.labels[i]);
  }
  data.num_classes = std::max(2, max_label + 1);
  return data;
}

void save_dataset(const std::filesystem::path& path, const DatasetHandle& data, const nlohmann::json& run) {
  Container c;
  if (!run.is_null()) c.header["run"] = run;
  c.header["kind"] = "dataset";
  c.header["num_classes"] = data.num_classes;
  c.header["provenance"] = data.provenance;
  const Index n = static_cast<Index>(data.labels.size());
  std::vector<float> labels(data.labels.begin(), data.labels.end());
  c.entries.push_back({"images", "data", data.images});
  c.entries.push_back({"labels", "data", Tensor<float>({n}, std::move(labels))});
  write_file(path, encode_container(c));
}

DatasetHandle load_dataset(const std::filesystem::path& path) {
  Container c = decode_container(read_file(path));
  if (c.header.value("kind", "") != "dataset") throw FormatError(path.string() + " does not hold a dataset");
  DatasetHandle data;
  data.num_classes = c.header.at("num_classes").get<int>();
  data.provenance = c.header.at("provenance").get<std::string>();
  for (ContainerEntry& e : c.entries) {
    if (e.name == "images") data.images = std::move(e.tensor);
    if (e.name == "labels")
      for (float v : e.tensor.data()) data.labels.push_back(static_cast<int>(v));
  }
  data.validate();
  return data;
}

Tensor<float> gather_rows(const Tensor<float>& images, const std::vector<Index>& indices) {
  Shape shape = images.shape();
  const Index row = images.size() / shape[0];
  shape[0] = static_cast<Index>(indices.size());
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(images.raw() + indices[i] * row, row, out.raw() + static_cast<Index>(i) * row);
  return out;
}

std::vector<Batch> stream_batches(const DatasetHandle& data, const StreamOptions& options) {
  if (options.batch_size < 2) throw ParameterError("batch_size must be >= 2");
  const Index N = data.size();
  std::vector<Index> order(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
  if (options.shuffle) {
    Rng rng(options.seed);
    order = rng.permutation(N);
  }
  std::vector<Batch> batches;
  for (Index start = 0; start < N; start += options.batch_size) {
    const Index end = std::min(N, start + options.batch_size);
    if (end - start < options.batch_size && (!options.keep_short || end - start < 2)) break;
    Batch b;
    b.indices.assign(order.begin() + start, order.begin() + end);
    b.images = gather_rows(data.images, b.indices);
    if (!data.labels.empty())
      for (Index i : b.indices) b.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace nhl
