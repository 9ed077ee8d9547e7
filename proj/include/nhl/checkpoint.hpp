#ifndef NHL_CHECKPOINT_HPP
#define NHL_CHECKPOINT_HPP

// NHLCKPT1 container: 8 magic bytes, a little-endian uint64 header length, the
// UTF-8 JSON header (keys sorted, compact), then raw little-endian float32
// payloads in directory order. Directory entries carry name, section, shape and
// byte offset relative to the start of the payload area.

#include "nhl/model.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nhl {

inline constexpr std::string_view kContainerMagic = "NHLCKPT1";
inline constexpr int kCheckpointVersion = 1;

struct ContainerEntry {
  std::string name;
  std::string section;
  Tensor<float> tensor;
};

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<ContainerEntry> entries;
};

std::string encode_container(const Container& container);
Container decode_container(std::string_view bytes);

std::string encode_checkpoint(const ModelCheckpoint& model);
ModelCheckpoint decode_checkpoint(std::string_view bytes);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& model);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nhl

#endif  // NHL_CHECKPOINT_HPP
