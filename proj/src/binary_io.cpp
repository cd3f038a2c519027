#include "tbl/binary_io.hpp"

#include <array>
#include <bit>
#include <cstring>

#include "tbl/errors.hpp"

namespace tbl {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; add byte swapping for this host");

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

}  // namespace

BinaryWriter::BinaryWriter(const std::filesystem::path& path, std::string_view magic,
                           const nlohmann::json& header)
    : out_(path, std::ios::binary), path_(path) {
  if (!out_) throw DataError("cannot open " + path.string() + " for writing");
  if (magic.size() != 8) throw std::invalid_argument("magic must be 8 bytes");
  out_.write(magic.data(), 8);
  const std::string text = header.dump();
  put_u32(out_, static_cast<std::uint32_t>(text.size()));
  out_.write(text.data(), static_cast<std::streamsize>(text.size()));
}

void BinaryWriter::write_floats(std::span<const float> values) {
  out_.write(reinterpret_cast<const char*>(values.data()),
             static_cast<std::streamsize>(values.size_bytes()));
}

void BinaryWriter::write_bytes(std::span<const std::uint8_t> bytes) {
  out_.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw DataError("failed writing " + path_.string());
}

BinaryReader::BinaryReader(const std::filesystem::path& path, std::string_view magic)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw DataError("cannot open " + path.string());
  std::array<char, 8> got{};
  in_.read(got.data(), 8);
  if (!in_ || std::string_view(got.data(), 8) != magic)
    throw DataError(path.string() + ": bad magic, expected " + std::string(magic));
  std::array<unsigned char, 4> len{};
  in_.read(reinterpret_cast<char*>(len.data()), 4);
  const std::uint32_t n = len[0] | (len[1] << 8) | (len[2] << 16) | (std::uint32_t(len[3]) << 24);
  std::string text(n, '\0');
  in_.read(text.data(), n);
  if (!in_) throw DataError(path.string() + ": truncated header");
  try {
    header_ = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<float> BinaryReader::read_floats(std::size_t count) {
  std::vector<float> out(count);
  in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (!in_) throw DataError(path_.string() + ": truncated payload");
  return out;
}

std::vector<std::uint8_t> BinaryReader::read_bytes(std::size_t count) {
  std::vector<std::uint8_t> out(count);
  in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count));
  if (!in_) throw DataError(path_.string() + ": truncated payload");
  return out;
}

void BinaryReader::expect_end() {
  if (in_.peek() != std::char_traits<char>::eof())
    throw DataError(path_.string() + ": unexpected trailing data");
}

std::vector<std::uint8_t> pack_bits(const std::vector<bool>& bits) {
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i)
    if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  return out;
}

std::vector<bool> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() * 8 < count) throw DataError("bit-packed mask is too short");
  std::vector<bool> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  return out;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace tbl
