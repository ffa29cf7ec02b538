#pragma once

// Checkpoint layout (all integers little-endian):
//   "TDBG" | u32 version | u64 header length | JSON header | f64 payload
// The header carries the run configuration, a tensor directory
// {name, owner, shape, offset} with byte offsets into the payload, and a
// short training-history digest.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"
#include "tsgdebias/nnet.hpp"

namespace tsgdb {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json history_digest = nlohmann::json::object();
  ParamStore params;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const Param& p : ck.params) {
    dir.push_back({{"name", p.name},
                   {"owner", std::string(to_string(p.owner))},
                   {"shape", {p.value.rows(), p.value.cols()}},
                   {"offset", offset}});
    offset += p.value.size() * sizeof(double);
  }
  const nlohmann::json header = {{"config", ck.config},
                                 {"history", ck.history_digest},
                                 {"optimizer", nullptr},
                                 {"tensors", dir}};
  const std::string text = header.dump();

  std::ostringstream os(std::ios::binary);
  os.write("TDBG", 4);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint64_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Param& p : ck.params)
    os.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  return os.str();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw FormatError(std::string("checkpoint truncated in ") + what);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4, "magic");
  if (std::string_view(magic, 4) != "TDBG") throw FormatError("not a checkpoint (bad magic)");
  std::uint32_t version = 0;
  take(&version, sizeof version, "version");
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + "); re-export it with a matching build");
  std::uint64_t header_len = 0;
  take(&header_len, sizeof header_len, "header length");
  if (bytes.size() - pos < header_len) throw FormatError("checkpoint truncated in header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;
  const std::size_t payload = pos;

  Checkpoint ck;
  ck.version = version;
  try {
    ck.config = header.at("config");
    ck.history_digest = header.at("history");
    std::uint64_t expected_offset = 0;
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw FormatError("tensor '" + t.at("name").get<std::string>() + "' is not 2-D");
      const auto offset = t.at("offset").get<std::uint64_t>();
      if (offset != expected_offset) throw FormatError("tensor directory offsets are not contiguous");
      Tensor value(shape[0], shape[1]);
      const std::size_t n = value.size() * sizeof(double);
      if (bytes.size() - payload < offset + n) throw FormatError("checkpoint truncated in tensor payload");
      std::memcpy(value.data(), bytes.data() + payload + offset, n);
      expected_offset = offset + n;
      ck.params.add(t.at("name").get<std::string>(), owner_from_string(t.at("owner").get<std::string>()),
                    std::move(value));
    }
    if (bytes.size() - payload != expected_offset) throw FormatError("checkpoint has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint: " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace tsgdb
