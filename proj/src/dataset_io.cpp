#include "pvmc/dataset_io.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pvmc/errors.hpp"
#include "pvmc/npy.hpp"

namespace pvmc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string pair_file(const char* split, int index, const char* role) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s/pair_%03d_%s.npy", split, index, role);
  return buf;
}

void save_image_f32(const fs::path& path, const ImageD& img) {
  std::vector<float> buf(img.v.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(img.v[i]);
  npy_save(path.string(),
           {static_cast<std::size_t>(img.height),
            static_cast<std::size_t>(img.width)},
           buf.data());
}

ImageD load_image(const fs::path& path) {
  const NpyArray arr = npy_load(path.string());
  if (arr.shape.size() != 2)
    throw IoError("load_dataset: expected 2-D array in " + path.string());
  ImageD img(static_cast<int>(arr.shape[1]), static_cast<int>(arr.shape[0]));
  img.v = arr.data;
  return img;
}

json config_to_json(const DatasetConfig& c) {
  return json{{"phantom",
               {{"kind", to_string(c.phantom_kind)},
                {"width", c.width},
                {"height", c.height},
                {"base_activity", c.base_activity}}},
              {"system",
               {{"kernel", to_string(c.kernel)},
                {"lors_per_voxel", c.lors_per_voxel},
                {"correction_spread", c.correction_spread}}},
              {"doses", {{"low", c.low_dose}, {"full", c.full_dose}}},
              {"pairs", {{"train", c.n_train}, {"test", c.n_test}}},
              {"seed", c.seed}};
}

DatasetConfig config_from_json(const json& j) {
  DatasetConfig c;
  c.phantom_kind =
      phantom_kind_from_string(j.at("phantom").at("kind").get<std::string>());
  c.width = j.at("phantom").at("width").get<int>();
  c.height = j.at("phantom").at("height").get<int>();
  c.base_activity = j.at("phantom").at("base_activity").get<double>();
  c.kernel = kernel_from_string(j.at("system").at("kernel").get<std::string>());
  c.lors_per_voxel = j.at("system").at("lors_per_voxel").get<int>();
  c.correction_spread = j.at("system").at("correction_spread").get<double>();
  c.low_dose = j.at("doses").at("low").get<double>();
  c.full_dose = j.at("doses").at("full").get<double>();
  c.n_train = j.at("pairs").at("train").get<int>();
  c.n_test = j.at("pairs").at("test").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::vector<std::string> save_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "train", ec);
  fs::create_directories(fs::path(dir) / "test", ec);

  std::vector<std::string> files;
  json pairs_json = json::array();
  auto dump_split = [&](const char* split, const std::vector<DatasetPair>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      const int idx = static_cast<int>(i);
      const std::string fn = pair_file(split, idx, "noisy");
      const std::string ft = pair_file(split, idx, "target");
      const std::string fg = pair_file(split, idx, "truth");
      save_image_f32(fs::path(dir) / fn, v[i].noisy);
      save_image_f32(fs::path(dir) / ft, v[i].target);
      save_image_f32(fs::path(dir) / fg, v[i].truth);
      files.push_back(fn);
      files.push_back(ft);
      files.push_back(fg);
      pairs_json.push_back({{"split", split},
                            {"index", idx},
                            {"noisy", fn},
                            {"target", ft},
                            {"truth", fg},
                            {"phantom_seed", v[i].phantom_seed},
                            {"low_seed", v[i].low_seed},
                            {"full_seed", v[i].full_seed}});
    }
  };
  dump_split("train", ds.train);
  dump_split("test", ds.test);

  json j;
  j["config"] = config_to_json(ds.config);
  j["analytic_k"] = ds.analytic_k;
  j["input_slope"] = ds.input_slope;
  j["k_spread"] = ds.k_spread;
  j["pairs"] = pairs_json;
  std::ofstream f(fs::path(dir) / "dataset.json");
  if (!f) throw IoError("save_dataset: cannot write dataset.json in " + dir);
  f << j.dump(2) << '\n';
  files.push_back("dataset.json");
  return files;
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "dataset.json");
  if (!f) throw IoError("load_dataset: missing dataset.json in " + dir);
  json j;
  f >> j;

  Dataset ds;
  ds.config = config_from_json(j.at("config"));
  ds.analytic_k = j.at("analytic_k").get<double>();
  ds.input_slope = j.at("input_slope").get<double>();
  ds.k_spread = j.at("k_spread").get<double>();
  ds.system = make_system(ds.config.width, ds.config.height,
                          ds.config.lors_per_voxel, ds.config.kernel,
                          ds.config.correction_spread, ds.config.seed);
  for (const auto& p : j.at("pairs")) {
    DatasetPair pair;
    pair.noisy = load_image(fs::path(dir) / p.at("noisy").get<std::string>());
    pair.target = load_image(fs::path(dir) / p.at("target").get<std::string>());
    pair.truth = load_image(fs::path(dir) / p.at("truth").get<std::string>());
    pair.phantom_seed = p.at("phantom_seed").get<std::uint64_t>();
    pair.low_seed = p.at("low_seed").get<std::uint64_t>();
    pair.full_seed = p.at("full_seed").get<std::uint64_t>();
    if (p.at("split").get<std::string>() == "train")
      ds.train.push_back(std::move(pair));
    else
      ds.test.push_back(std::move(pair));
  }
  if (ds.train.empty() && ds.test.empty())
    throw IoError("load_dataset: no pairs found in " + dir);
  return ds;
}

}  // namespace pvmc
