#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/case_io.hpp"
#include "semiseg/model.hpp"
#include "semiseg/objectives.hpp"
#include "semiseg/optimizer.hpp"

namespace semiseg {

// A checkpoint with stem S is two files:
//   S.json  manifest (model config, stage, epoch, run config, metric history, tensor layout)
//   S.bin   float32 parameter values followed by float32 optimizer momentum, in layout order

struct Checkpoint {
  ModelConfig model;
  Stage stage = Stage::pretrain;
  int epoch = 0;
  std::vector<std::string> names;
  std::vector<std::size_t> sizes;
  std::vector<float> parameters;
  std::vector<float> momentum;  // empty when no optimizer state was stored
  long long optimizer_steps = 0;
  std::optional<double> best_dsc;
  int best_epoch = -1;
  nlohmann::json run_config = nlohmann::json::object();
  nlohmann::json history = nlohmann::json::array();
};

inline Checkpoint make_checkpoint(const UNet<float>& net, Stage stage, int epoch, const Sgd<float>* opt = nullptr) {
  Checkpoint ck;
  ck.model = net.config();
  ck.stage = stage;
  ck.epoch = epoch;
  for (const auto* p : net.parameters()) {
    ck.names.push_back(p->name);
    ck.sizes.push_back(p->size());
    ck.parameters.insert(ck.parameters.end(), p->value.begin(), p->value.end());
  }
  if (opt && !opt->velocity().empty()) {
    for (const auto& v : opt->velocity()) ck.momentum.insert(ck.momentum.end(), v.begin(), v.end());
    ck.optimizer_steps = opt->steps();
  }
  return ck;
}

inline UNet<float> restore_model(const Checkpoint& ck) {
  UNet<float> net(ck.model, 0);
  auto params = net.parameters();
  require(params.size() == ck.names.size(), "restore_model: checkpoint tensor count does not match the model");
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i]->name == ck.names[i] && params[i]->size() == ck.sizes[i],
            "restore_model: layout mismatch at " + params[i]->name);
    std::copy_n(ck.parameters.begin() + static_cast<std::ptrdiff_t>(off), ck.sizes[i], params[i]->value.begin());
    off += ck.sizes[i];
  }
  return net;
}

/// Loads stored momentum into `opt`; a checkpoint without optimizer state resets it.
inline void restore_optimizer(const Checkpoint& ck, Sgd<float>& opt) {
  opt.reset();
  if (ck.momentum.empty()) return;
  require(ck.momentum.size() == ck.parameters.size(), "restore_optimizer: momentum size mismatch");
  auto& vel = opt.velocity();
  std::size_t off = 0;
  for (std::size_t n : ck.sizes) {
    vel.emplace_back(ck.momentum.begin() + static_cast<std::ptrdiff_t>(off),
                     ck.momentum.begin() + static_cast<std::ptrdiff_t>(off + n));
    off += n;
  }
  opt.set_steps(ck.optimizer_steps);
}

inline fs::path checkpoint_stem(const fs::path& path) {
  fs::path p = path;
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

inline nlohmann::json checkpoint_manifest(const Checkpoint& ck) {
  nlohmann::json layout = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.names.size(); ++i) layout.push_back({{"name", ck.names[i]}, {"size", ck.sizes[i]}});
  return {{"format", "semiseg-checkpoint-1"},
          {"model", ck.model},
          {"stage", to_string(ck.stage)},
          {"epoch", ck.epoch},
          {"layout", layout},
          {"parameter_count", ck.parameters.size()},
          {"has_optimizer_state", !ck.momentum.empty()},
          {"optimizer_steps", ck.optimizer_steps},
          {"best_dsc", ck.best_dsc ? nlohmann::json(*ck.best_dsc) : nlohmann::json(nullptr)},
          {"best_epoch", ck.best_epoch},
          {"run_config", ck.run_config},
          {"history", ck.history}};
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  const fs::path stem = checkpoint_stem(path);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  {
    std::ofstream js(fs::path(stem.string() + ".json"));
    if (!js) throw DataError("cannot write checkpoint manifest " + stem.string() + ".json");
    js << checkpoint_manifest(ck).dump(2) << '\n';
  }
  std::ofstream bin(fs::path(stem.string() + ".bin"), std::ios::binary);
  if (!bin) throw DataError("cannot write checkpoint blob " + stem.string() + ".bin");
  bin.write(reinterpret_cast<const char*>(ck.parameters.data()),
            static_cast<std::streamsize>(ck.parameters.size() * sizeof(float)));
  bin.write(reinterpret_cast<const char*>(ck.momentum.data()),
            static_cast<std::streamsize>(ck.momentum.size() * sizeof(float)));
  if (!bin) throw DataError("write failed for " + stem.string() + ".bin");
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path stem = checkpoint_stem(path);
  const fs::path jpath(stem.string() + ".json"), bpath(stem.string() + ".bin");
  std::ifstream js(jpath);
  if (!js) throw DataError("missing checkpoint manifest " + jpath.string());
  Checkpoint ck;
  try {
    nlohmann::json m;
    js >> m;
    if (m.value("format", std::string()) != "semiseg-checkpoint-1")
      throw DataError(jpath.string() + ": not a checkpoint manifest");
    ck.model = m.at("model").get<ModelConfig>();
    ck.stage = stage_from_string(m.at("stage").get<std::string>());
    ck.epoch = m.at("epoch").get<int>();
    std::size_t total = 0;
    for (const auto& e : m.at("layout")) {
      ck.names.push_back(e.at("name").get<std::string>());
      ck.sizes.push_back(e.at("size").get<std::size_t>());
      total += ck.sizes.back();
    }
    if (total != m.at("parameter_count").get<std::size_t>()) throw DataError(jpath.string() + ": layout total mismatch");
    const bool has_opt = m.at("has_optimizer_state").get<bool>();
    ck.optimizer_steps = m.value("optimizer_steps", 0LL);
    if (!m.at("best_dsc").is_null()) ck.best_dsc = m.at("best_dsc").get<double>();
    ck.best_epoch = m.value("best_epoch", -1);
    ck.run_config = m.value("run_config", nlohmann::json::object());
    ck.history = m.value("history", nlohmann::json::array());
    auto blob = detail::read_raw<float>(bpath, has_opt ? 2 * total : total);
    ck.parameters.assign(blob.begin(), blob.begin() + static_cast<std::ptrdiff_t>(total));
    if (has_opt) ck.momentum.assign(blob.begin() + static_cast<std::ptrdiff_t>(total), blob.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(jpath.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(jpath.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace semiseg
