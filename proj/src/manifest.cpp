#include "pvmc/manifest.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include "pvmc/errors.hpp"

namespace pvmc {

namespace {

std::string to_hex(const unsigned char* digest, unsigned len) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

}  // namespace

std::string sha256_bytes(const void* data, std::size_t n) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, n) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256: digest failure");
  }
  EVP_MD_CTX_free(ctx);
  return to_hex(digest, len);
}

std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("sha256_file: cannot open " + path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256: init failure");
  }
  std::vector<char> buf(1 << 16);
  while (f) {
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const std::streamsize got = f.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx, buf.data(),
                                    static_cast<std::size_t>(got)) != 1) {
      EVP_MD_CTX_free(ctx);
      throw IoError("sha256: update failure");
    }
  }
  if (EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256: final failure");
  }
  EVP_MD_CTX_free(ctx);
  return to_hex(digest, len);
}

void write_manifest(const std::string& dir, const RunManifest& m) {
  nlohmann::json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["wall_ms"] = m.wall_ms;
  std::ofstream f(std::filesystem::path(dir) / "manifest.json");
  if (!f) throw IoError("write_manifest: cannot write in " + dir);
  f << j.dump(2) << '\n';
}

RunManifest read_manifest(const std::string& dir) {
  std::ifstream f(std::filesystem::path(dir) / "manifest.json");
  if (!f) throw IoError("read_manifest: missing manifest.json in " + dir);
  nlohmann::json j;
  f >> j;
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config");
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  m.wall_ms = j.at("wall_ms").get<double>();
  return m;
}

void hash_outputs(const std::string& dir, const std::vector<std::string>& files,
                  RunManifest& m) {
  for (const std::string& f : files)
    m.outputs[f] = sha256_file((std::filesystem::path(dir) / f).string());
}

}  // namespace pvmc
