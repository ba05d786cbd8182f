#pragma once

// Checkpoint directory layout:
//   manifest.json  config, dtype, parameter list (name, shape, byte offset)
//   params.bin     all parameters back to back, little-endian
//   optimizer.bin  optional first/second moments in parameter order
// Reloading reproduces every parameter bit for bit.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/model.hpp"
#include "tagbert/optim.hpp"

namespace tagbert {

template <class T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

namespace detail {

template <class T>
void write_tensors(const std::filesystem::path& file, const std::vector<const Tensor<T>*>& tensors) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto* t : tensors)
    out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->size() * sizeof(T)));
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

inline std::vector<char> read_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

template <class T>
Tensor<T> slice_tensor(const std::vector<char>& blob, std::size_t offset, const Shape& shape,
                       const std::string& name) {
  Tensor<T> t(shape);
  const std::size_t bytes = t.size() * sizeof(T);
  if (offset + bytes > blob.size()) throw std::runtime_error("checkpoint blob too short for '" + name + "'");
  std::memcpy(t.ptr(), blob.data() + offset, bytes);
  return t;
}

}  // namespace detail

struct TrainerPosition {
  std::size_t step = 0;
  std::size_t epoch = 0;  // completed epochs
};

template <class T>
void save_checkpoint(const std::filesystem::path& dir, const Model<T>& model,
                     const OptimState<T>* optimizer = nullptr,
                     std::optional<TrainerPosition> position = std::nullopt) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "tagbert-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = dtype_name<T>();
  manifest["config"] = nlohmann::json(model.config());
  manifest["blob"] = "params.bin";
  auto list = nlohmann::ordered_json::array();
  std::vector<const Tensor<T>*> tensors;
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    list.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}, {"decay", p.decay}});
    offset += p.value.size() * sizeof(T);
    tensors.push_back(&p.value);
  }
  manifest["parameters"] = list;
  detail::write_tensors(dir / "params.bin", tensors);
  if (optimizer) {
    std::vector<const Tensor<T>*> moments;
    for (const auto& m : optimizer->m) moments.push_back(&m);
    for (const auto& v : optimizer->v) moments.push_back(&v);
    detail::write_tensors(dir / "optimizer.bin", moments);
    manifest["optimizer"] = {{"blob", "optimizer.bin"}, {"step", optimizer->step}, {"moments", optimizer->m.size()}};
  }
  if (position) manifest["trainer"] = {{"step", position->step}, {"epoch", position->epoch}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "tagbert-checkpoint") throw std::runtime_error(dir.string() + " is not a tagbert checkpoint");
  return j;
}

template <class T>
struct Checkpoint {
  Model<T> model;
  std::optional<OptimState<T>> optimizer;
  std::optional<TrainerPosition> position;
};

/// Loads the parameters stored in `dir` into an already constructed model,
/// requiring the same parameter names and shapes.
template <class T>
void load_parameters(Model<T>& model, const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  if (manifest.at("dtype") != dtype_name<T>())
    throw std::runtime_error("checkpoint dtype " + manifest.at("dtype").get<std::string>() + " does not match " +
                             dtype_name<T>());
  const auto blob = detail::read_file(dir / manifest.at("blob").get<std::string>());
  std::size_t seen = 0;
  for (const auto& e : manifest.at("parameters")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    if (!model.has(name)) throw std::runtime_error("checkpoint parameter '" + name + "' is not part of the model");
    auto& p = model.param(name);
    if (p.value.shape() != shape)
      throw ShapeError("parameter '" + name + "': checkpoint shape " + shape_string(shape) +
                       " does not match model shape " + shape_string(p.value.shape()));
    p.value = detail::slice_tensor<T>(blob, e.at("offset").get<std::size_t>(), shape, name);
    ++seen;
  }
  if (seen != model.parameters().size())
    throw std::runtime_error("checkpoint holds " + std::to_string(seen) + " parameters, model expects " +
                             std::to_string(model.parameters().size()));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_manifest(dir);
  const auto config = manifest.at("config").get<ModelConfig>();
  Checkpoint<T> ck;
  ck.model = Model<T>::init(config, 0);
  // Entries beyond the config-defined layout (task heads) are adopted as is.
  for (const auto& e : manifest.at("parameters")) {
    const auto name = e.at("name").get<std::string>();
    if (ck.model.has(name)) continue;
    Parameter<T> p;
    p.name = name;
    p.value = Tensor<T>(e.at("shape").get<Shape>());
    p.decay = e.value("decay", true);
    ck.model.add_parameter(std::move(p));
  }
  load_parameters(ck.model, dir);
  if (manifest.contains("optimizer")) {
    const auto& o = manifest.at("optimizer");
    const auto blob = detail::read_file(dir / o.at("blob").get<std::string>());
    OptimState<T> st;
    st.step = o.at("step").get<std::size_t>();
    std::size_t offset = 0;
    for (auto* moments : {&st.m, &st.v})
      for (const auto& p : ck.model.parameters()) {
        moments->push_back(detail::slice_tensor<T>(blob, offset, p.value.shape(), p.name));
        offset += p.value.size() * sizeof(T);
      }
    ck.optimizer = std::move(st);
  }
  if (manifest.contains("trainer"))
    ck.position = TrainerPosition{manifest.at("trainer").at("step").get<std::size_t>(),
                                  manifest.at("trainer").at("epoch").get<std::size_t>()};
  return ck;
}

}  // namespace tagbert
