#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace tbl {

/// Container layout shared by the transient, grid checkpoint and preprocessed-view files:
///   8-byte ASCII magic | uint32 LE byte length | UTF-8 JSON | payload
class BinaryWriter {
 public:
  BinaryWriter(const std::filesystem::path& path, std::string_view magic,
               const nlohmann::json& header);
  void write_floats(std::span<const float> values);
  void write_bytes(std::span<const std::uint8_t> bytes);
  void close();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class BinaryReader {
 public:
  BinaryReader(const std::filesystem::path& path, std::string_view magic);
  const nlohmann::json& header() const { return header_; }
  std::vector<float> read_floats(std::size_t count);
  std::vector<std::uint8_t> read_bytes(std::size_t count);
  /// Throws DataError when trailing bytes remain.
  void expect_end();

 private:
  std::ifstream in_;
  std::filesystem::path path_;
  nlohmann::json header_;
};

/// LSB-first bit packing.
std::vector<std::uint8_t> pack_bits(const std::vector<bool>& bits);
std::vector<bool> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace tbl
