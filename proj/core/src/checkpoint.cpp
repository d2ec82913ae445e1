#include <cstring>
#include <map>

#include <nlohmann/json.hpp>

#include "bilm/binary_io.hpp"
#include "bilm/error.hpp"
#include "bilm/file_util.hpp"
#include "bilm/model.hpp"

namespace bilm::model {

namespace {

constexpr std::string_view kMagic = "BILMCKPT";
constexpr uint32_t kVersion = 1;

struct Entry {
  std::string name;
  std::string dtype;
  std::vector<int64_t> shape;
  std::string_view bytes;
};

std::string_view as_bytes(const double* data, size_t n) {
  return {reinterpret_cast<const char*>(data), n * sizeof(double)};
}

}  // namespace

std::string serialize_checkpoint(const ModelState& state) {
  std::vector<Entry> entries;
  for (const TensorSpec& t : state.layout.tensors()) {
    entries.push_back({t.name, "f64", t.shape, as_bytes(state.params.data() + t.offset, t.size)});
  }
  const auto n = static_cast<int64_t>(state.params.size());
  if (!state.adam_m.empty()) {
    entries.push_back({"optimizer.m", "f64", {n}, as_bytes(state.adam_m.data(), state.adam_m.size())});
    entries.push_back({"optimizer.v", "f64", {n}, as_bytes(state.adam_v.data(), state.adam_v.size())});
  }
  if (!state.tokenizer_blob.empty()) {
    entries.push_back({"tokenizer",
                       "u8",
                       {static_cast<int64_t>(state.tokenizer_blob.size())},
                       state.tokenizer_blob});
  }

  nlohmann::json directory = nlohmann::json::array();
  uint64_t offset = 0;
  for (const Entry& e : entries) {
    directory.push_back({{"name", e.name},
                         {"dtype", e.dtype},
                         {"shape", e.shape},
                         {"offset", offset},
                         {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const nlohmann::json header = {{"config", state.config.to_json()},
                                 {"seed", state.seed},
                                 {"step", state.step},
                                 {"tokenizer_hash", state.tokenizer_hash},
                                 {"tensors", directory}};
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kMagic.size() + 12 + header_text.size() + offset);
  binio::put_bytes(out, kMagic);
  binio::put<uint32_t>(out, kVersion);
  binio::put<uint64_t>(out, header_text.size());
  binio::put_bytes(out, header_text);
  for (const Entry& e : entries) {
    binio::put_bytes(out, e.bytes);
  }
  return out;
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(state));
}

ModelState deserialize_checkpoint(std::string_view bytes) {
  binio::Reader in(bytes);
  if (in.get_bytes(kMagic.size()) != kMagic) {
    throw ValidationError("not a checkpoint (bad magic)");
  }
  const auto version = in.get<uint32_t>();
  if (version != kVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = in.get<uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.get_bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::string_view payload = bytes.substr(in.position());

  ModelState state;
  try {
    state.config = ModelConfig::from_json(header.at("config"));
    state.layout = ParameterLayout(state.config);
    state.seed = header.at("seed").get<uint64_t>();
    state.step = header.at("step").get<int64_t>();
    state.tokenizer_hash = header.at("tokenizer_hash").get<std::string>();

    std::map<std::string, std::string_view> blobs;
    for (const auto& t : header.at("tensors")) {
      const auto offset = t.at("offset").get<uint64_t>();
      const auto nbytes = t.at("nbytes").get<uint64_t>();
      if (offset > payload.size() || nbytes > payload.size() - offset) {
        throw ValidationError("checkpoint tensor '" + t.at("name").get<std::string>() +
                              "' exceeds file size");
      }
      blobs[t.at("name").get<std::string>()] = payload.substr(offset, nbytes);
    }
    const auto take = [&](const std::string& name, double* dst, size_t n) {
      const auto it = blobs.find(name);
      if (it == blobs.end()) {
        throw ValidationError("checkpoint is missing tensor '" + name + "'");
      }
      if (it->second.size() != n * sizeof(double)) {
        throw ValidationError("checkpoint tensor '" + name + "' has the wrong size");
      }
      std::memcpy(dst, it->second.data(), it->second.size());
    };

    state.params.assign(state.layout.total_size(), 0.0);
    for (const TensorSpec& t : state.layout.tensors()) {
      take(t.name, state.params.data() + t.offset, t.size);
    }
    if (blobs.contains("optimizer.m")) {
      state.adam_m.assign(state.params.size(), 0.0);
      state.adam_v.assign(state.params.size(), 0.0);
      take("optimizer.m", state.adam_m.data(), state.adam_m.size());
      take("optimizer.v", state.adam_v.data(), state.adam_v.size());
    }
    if (const auto it = blobs.find("tokenizer"); it != blobs.end()) {
      state.tokenizer_blob = std::string(it->second);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
  }
  return state;
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace bilm::model
