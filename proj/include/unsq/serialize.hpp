#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "unsq/common.hpp"

namespace unsq::detail {

// Little-endian fixed-width encoding for the checkpoint and raster containers.
struct ByteWriter {
  std::string buf;

  template <typename T>
  void raw(T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
  }

  void str(const std::string& s) {
    raw<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf.append(s);
  }
};

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  const char* what;

  ByteReader(const std::string& b, const char* ctx) : buf(b), what(ctx) {}

  template <typename T>
  T raw() {
    if (pos + sizeof(T) > buf.size()) throw CheckpointTruncatedError(std::string(what) + ": truncated file");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  std::string str() {
    const auto n = raw<std::uint32_t>();
    if (pos + n > buf.size()) throw CheckpointTruncatedError(std::string(what) + ": truncated file");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }

  bool done() const { return pos == buf.size(); }
};

inline std::string read_file_bytes(const std::filesystem::path& path, const char* ctx) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(std::string(ctx) + ": cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes, const char* ctx) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(std::string(ctx) + ": cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(std::string(ctx) + ": write failed for " + path.string());
}

}  // namespace unsq::detail
