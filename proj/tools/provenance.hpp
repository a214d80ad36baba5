#pragma once

// Content hashes and the <output>.meta.json sidecar written next to every
// CLI artifact. No timestamps or absolute paths, so reruns are
// byte-identical.

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "otbkg/error.hpp"

namespace otbkg::cli {

inline std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw NumericalError("sha1: digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Same id git gives the file as a blob.
inline std::string git_blob_hash(const std::string& path) {
  const std::string content = read_file(path);
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

inline std::string config_hash(const nlohmann::ordered_json& config) { return sha1_hex(config.dump()); }

inline void write_meta(const std::string& output, const std::string& command, const nlohmann::ordered_json& config,
                       const std::vector<std::string>& inputs) {
  nlohmann::ordered_json meta;
  meta["command"] = command;
  meta["config"] = config;
  meta["config_hash"] = config_hash(config);
  auto in = nlohmann::ordered_json::array();
  for (const auto& p : inputs) {
    nlohmann::ordered_json e;
    e["file"] = std::filesystem::path(p).filename().string();
    e["hash"] = git_blob_hash(p);
    in.push_back(e);
  }
  meta["inputs"] = in;
  meta["output"] = {{"file", std::filesystem::path(output).filename().string()}, {"hash", git_blob_hash(output)}};
  std::ofstream out(output + ".meta.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + output + ".meta.json");
  out << meta.dump(2) << '\n';
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << '\n';
}

inline nlohmann::ordered_json read_json(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace otbkg::cli
