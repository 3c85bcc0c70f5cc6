#pragma once

#include <map>
#include <string>

#include <json.hpp>

namespace pvmc {

std::string sha256_file(const std::string& path);
std::string sha256_bytes(const void* data, std::size_t n);

/// Every output directory holds exactly one manifest: the command, the full
/// resolved configuration, content hashes of inputs and outputs, and wall
/// time. Reruns with identical inputs reproduce every output hash (wall time
/// is informational only).
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::map<std::string, std::string> inputs;   // label -> sha256
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  double wall_ms = 0.0;
};

void write_manifest(const std::string& dir, const RunManifest& m);
RunManifest read_manifest(const std::string& dir);

/// Hashes `files` (relative to dir) into m.outputs.
void hash_outputs(const std::string& dir, const std::vector<std::string>& files,
                  RunManifest& m);

}  // namespace pvmc
