#include "rvos/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "rvos/errors.hpp"

namespace rvos::train {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "rvos-checkpoint";

json encode_floats(const std::vector<float>& v) {
  std::vector<std::uint8_t> bytes(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(u >> (8 * b));
  }
  return json::binary(std::move(bytes));
}

std::vector<float> decode_floats(const json& j, std::size_t expected, const std::string& name) {
  if (!j.is_binary()) throw DataError("checkpoint: tensor " + name + " is not a byte string");
  const auto& bytes = j.get_binary();
  if (bytes.size() != expected * 4) throw DataError("checkpoint: tensor " + name + " has the wrong byte length");
  std::vector<float> v(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    std::memcpy(&v[i], &u, 4);
  }
  return v;
}

json encode_params(const model::ParamMap<float>& p) {
  json out = json::object();
  for (const auto& [name, t] : p) out[name] = {{"shape", t.shape}, {"data", encode_floats(t.data)}};
  return out;
}

model::ParamMap<float> decode_params(const json& j) {
  if (!j.is_object()) throw DataError("checkpoint: parameter table is not a map");
  model::ParamMap<float> p;
  for (const auto& [name, e] : j.items()) {
    Tensor<float> t(e.at("shape").get<Shape>());
    t.data = decode_floats(e.at("data"), t.size(), name);
    p.emplace(name, std::move(t));
  }
  return p;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  json j;
  j["format"] = kFormat;
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(ck.model);
  j["vocabulary"] = ck.vocabulary;
  j["params"] = encode_params(ck.params);
  j["rng"] = ck.rng_state;
  j["epochs_completed"] = ck.epochs_completed;
  j["step"] = ck.step;
  if (ck.train_config) j["train_config"] = to_json(*ck.train_config);
  if (ck.optimizer)
    j["optimizer"] = {{"step", ck.optimizer->step}, {"m", encode_params(ck.optimizer->m)},
                      {"v", encode_params(ck.optimizer->v)}};
  return json::to_cbor(j);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  json j;
  try {
    j = json::from_cbor(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: not a valid CBOR document: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", std::string()) != kFormat) throw DataError("checkpoint: unknown format");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw DataError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.model = model_config_from_json(j.at("config"));
    ck.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    ck.params = decode_params(j.at("params"));
    ck.rng_state = j.at("rng").get<std::string>();
    ck.epochs_completed = j.at("epochs_completed").get<int>();
    ck.step = j.at("step").get<std::int64_t>();
    if (j.contains("train_config")) ck.train_config = train_config_from_json(j.at("train_config"));
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      ck.optimizer = OptimizerState{o.at("step").get<std::int64_t>(), decode_params(o.at("m")), decode_params(o.at("v"))};
    }
    return ck;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed field: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("short write on checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void check_vocabulary(const Checkpoint& ck, const std::vector<std::string>& vocabulary) {
  if (ck.vocabulary != vocabulary || ck.model.vocab_size != static_cast<int>(vocabulary.size()))
    throw DataError("vocab mismatch: checkpoint has " + std::to_string(ck.vocabulary.size()) +
                    " words, dataset has " + std::to_string(vocabulary.size()) + " (or the word lists differ)");
}

}  // namespace rvos::train
