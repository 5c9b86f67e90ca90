#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lrmix/config.hpp"

namespace lrmix {

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

/// Regular files under `root`, relative paths in lexicographic order.
inline std::vector<std::string> list_files(const std::filesystem::path& root) {
  std::vector<std::string> out;
  if (!std::filesystem::exists(root)) return out;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(root))
    if (entry.is_regular_file()) out.push_back(std::filesystem::relative(entry.path(), root).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

inline constexpr const char* kArtifactPrefix = "artifact:";

/// Writes `<root>/manifest.txt` in the key-value format: the effective
/// configuration plus one `artifact:<relative path> = <sha256>` entry per file
/// under root. The manifest can be fed back through --config.
inline void write_manifest(const std::filesystem::path& root, const std::string& command, const KeyValues& config) {
  KeyValues kv = config;
  kv.set("command", command);
  for (const auto& rel : list_files(root))
    if (rel != "manifest.txt") kv.set(kArtifactPrefix + rel, sha256_file(root / rel));
  const std::string text = kv.to_string();
  std::ofstream out(root / "manifest.txt", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest in " + root.string());
  out << text;
}

/// Single digest over every file's relative path and content under root.
inline std::string directory_checksum(const std::filesystem::path& root) {
  std::string acc;
  for (const auto& rel : list_files(root)) acc += rel + "\n" + sha256_file(root / rel) + "\n";
  return sha256_hex(acc);
}

}  // namespace lrmix
