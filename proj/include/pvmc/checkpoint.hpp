#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvmc/npy.hpp"
#include "pvmc/unet.hpp"

namespace pvmc {

// Checkpoint layout: one .npy per parameter plus an index.json mapping
// name -> {file, shape}, the net config, and named scalars (learned k etc).

template <class T>
void save_checkpoint(const std::string& dir, const UNet<T>& net,
                     const std::map<std::string, double>& scalars = {}) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  nlohmann::json index;
  index["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
  index["net_config"] = {{"depth", net.config().depth},
                         {"channels", net.config().channels}};
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : net.named_params()) {
    const std::string file = name + ".npy";
    std::vector<std::size_t> shape;
    for (int d : t.shape()) shape.push_back(static_cast<std::size_t>(d));
    npy_save((fs::path(dir) / file).string(), shape, t.data().data());
    params[name] = {{"file", file}, {"shape", shape}};
  }
  index["params"] = params;
  index["scalars"] = scalars;
  std::ofstream f(fs::path(dir) / "index.json");
  if (!f) throw IoError("save_checkpoint: cannot write index in " + dir);
  f << index.dump(2) << '\n';
}

template <class T>
UNet<T> load_checkpoint(const std::string& dir,
                        std::map<std::string, double>* scalars_out = nullptr) {
  namespace fs = std::filesystem;
  std::ifstream f(fs::path(dir) / "index.json");
  if (!f) throw IoError("load_checkpoint: missing index.json in " + dir);
  nlohmann::json index;
  f >> index;
  NetConfig cfg;
  cfg.depth = index.at("net_config").at("depth").get<int>();
  cfg.channels = index.at("net_config").at("channels").get<std::vector<int>>();
  UNet<T> net = UNet<T>::init(cfg, 0);
  for (auto& [name, t] : net.named_params()) {
    const auto& entry = index.at("params").at(name);
    const std::string file = entry.at("file");
    const NpyArray arr = npy_load((fs::path(dir) / file).string());
    if (arr.numel() != t.data().size())
      throw IoError("load_checkpoint: size mismatch for " + name);
    for (std::size_t i = 0; i < arr.data.size(); ++i)
      t.data()[i] = static_cast<T>(arr.data[i]);
  }
  if (scalars_out && index.contains("scalars")) {
    for (auto& [k, v] : index.at("scalars").items()) {
      const double value = v;
      (*scalars_out)[k] = value;
    }
  }
  return net;
}

}  // namespace pvmc
