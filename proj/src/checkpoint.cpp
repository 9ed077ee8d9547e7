#include "nhl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace nhl {
namespace {

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(std::string_view in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_f32_le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::string encode_container(const Container& container) {
  nlohmann::json header = container.header;
  nlohmann::json directory = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const ContainerEntry& e : container.entries) {
    directory.push_back({{"name", e.name},
                         {"section", e.section},
                         {"shape", e.tensor.shape()},
                         {"offset", offset}});
    offset += static_cast<std::uint64_t>(e.tensor.size()) * 4;
  }
  header["format"] = std::string(kContainerMagic);
  header["tensors"] = std::move(directory);
  const std::string text = header.dump();

  std::string out(kContainerMagic);
  put_u64_le(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const ContainerEntry& e : container.entries)
    for (float v : e.tensor.data()) put_f32_le(out, v);
  return out;
}

Container decode_container(std::string_view bytes) {
  if (bytes.size() < kContainerMagic.size() + 8 || bytes.substr(0, kContainerMagic.size()) != kContainerMagic)
    throw FormatError("not an NHLCKPT1 container (bad magic)");
  const std::uint64_t header_len = get_u64_le(bytes.substr(kContainerMagic.size(), 8));
  const std::size_t header_start = kContainerMagic.size() + 8;
  if (header_len > bytes.size() - header_start) throw FormatError("container header is truncated");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  const std::string_view payload = bytes.substr(header_start + header_len);
  try {
    for (const auto& entry : c.header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = static_cast<std::uint64_t>(shape_numel(shape));
      if (offset > payload.size() || count * 4 > payload.size() - offset)
        throw FormatError("tensor " + entry.at("name").get<std::string>() + " payload is truncated");
      std::vector<float> data(count);
      for (std::uint64_t i = 0; i < count; ++i) data[i] = get_f32_le(payload.data() + offset + 4 * i);
      c.entries.push_back({entry.at("name").get<std::string>(), entry.at("section").get<std::string>(),
                           Tensor<float>(std::move(shape), std::move(data))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tensor directory: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("malformed tensor shape: ") + e.what());
  }
  c.header.erase("tensors");
  return c;
}

std::string encode_checkpoint(const ModelCheckpoint& model) {
  Container c;
  c.header["kind"] = "checkpoint";
  c.header["version"] = kCheckpointVersion;
  c.header["architecture"] = model.arch;
  nlohmann::json meta{{"seed", model.metadata.seed}, {"epochs", model.metadata.epochs}};
  meta["source_accuracy"] = model.metadata.source_accuracy ? nlohmann::json(*model.metadata.source_accuracy)
                                                           : nlohmann::json(nullptr);
  c.header["metadata"] = std::move(meta);
  c.header["extra_config"] = model.extra_config;
  for (const auto& [section, group] : {std::pair<const char*, const NamedTensors<float>*>{"params", &model.params},
                                       {"buffers", &model.buffers},
                                       {"extras", &model.extras}})
    for (const auto& [name, t] : *group) c.entries.push_back({name, section, t});
  return encode_container(c);
}

ModelCheckpoint decode_checkpoint(std::string_view bytes) {
  Container c = decode_container(bytes);
  ModelCheckpoint model;
  try {
    if (c.header.at("kind") != "checkpoint") throw FormatError("container does not hold a checkpoint");
    if (c.header.at("version").get<int>() != kCheckpointVersion)
      throw FormatError("unsupported checkpoint version " + c.header.at("version").dump());
    model.arch = c.header.at("architecture").get<ArchitectureDescriptor>();
    const auto& meta = c.header.at("metadata");
    model.metadata.seed = meta.at("seed").get<std::uint64_t>();
    model.metadata.epochs = meta.at("epochs").get<int>();
    if (!meta.at("source_accuracy").is_null()) model.metadata.source_accuracy = meta.at("source_accuracy").get<double>();
    model.extra_config = c.header.at("extra_config");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
  for (ContainerEntry& e : c.entries) {
    NamedTensors<float>* group = e.section == "params"    ? &model.params
                                 : e.section == "buffers" ? &model.buffers
                                 : e.section == "extras"  ? &model.extras
                                                          : nullptr;
    if (!group) throw FormatError("unknown checkpoint section " + e.section);
    group->emplace(std::move(e.name), std::move(e.tensor));
  }
  model.check_consistency();
  return model;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& model) {
  write_file(path, encode_checkpoint(model));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace nhl
