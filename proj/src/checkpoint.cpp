// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace msu {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'S', 'U', 'M'};

std::size_t element_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

const char* raw_bytes(const Tensor& t) {
  return t.dtype() == DType::f32 ? reinterpret_cast<const char*>(t.data<float>().data())
                                 : reinterpret_cast<const char*>(t.data<double>().data());
}

char* raw_bytes(Tensor& t) {
  return t.dtype() == DType::f32 ? reinterpret_cast<char*>(t.mutable_data<float>().data())
                                 : reinterpret_cast<char*>(t.mutable_data<double>().data());
}

}  // namespace

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::set<std::string> names;
  for (const auto& e : file.tensors) {
    if (!names.insert(e.group + ":" + e.name).second) {
      throw CheckpointError("duplicate tensor '" + e.name + "' in group " + e.group);
    }
    const std::uint64_t nbytes = static_cast<std::uint64_t>(e.tensor.numel()) * element_size(e.tensor.dtype());
    manifest.push_back({{"name", e.name},
                        {"group", e.group},
                        {"dtype", dtype_name(e.tensor.dtype())},
                        {"shape", e.tensor.shape()},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::json header = {{"format_version", file.format_version},
                           {"config", file.config},
                           {"tensors", manifest},
                           {"training_state", file.training_state}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
    os.write(kMagic, 4);
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : file.tensors) {
      os.write(raw_bytes(e.tensor),
               static_cast<std::streamsize>(static_cast<std::size_t>(e.tensor.numel()) * element_size(e.tensor.dtype())));
    }
    if (!os) throw CheckpointError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const auto file_size = std::filesystem::file_size(path);
  char magic[4];
  std::uint64_t len = 0;
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint (bad magic bytes)");
  }
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > file_size - 12) {
    throw CheckpointError("corrupt checkpoint header length in '" + path.string() + "'");
  }
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw CheckpointError("truncated checkpoint header in '" + path.string() + "'");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header in '" + path.string() + "': " + e.what());
  }

  CheckpointFile out;
  try {
    out.format_version = header.at("format_version").get<int>();
    if (out.format_version != kCheckpointVersion) {
      throw CheckpointError("unsupported checkpoint format_version " + std::to_string(out.format_version) +
                            " (this build reads " + std::to_string(kCheckpointVersion) + ")");
    }
    out.config = header.at("config");
    out.training_state = header.value("training_state", nlohmann::json());
    const std::uint64_t payload_start = 12 + len;
    std::uint64_t expected = 0;
    for (const auto& m : header.at("tensors")) {
      CheckpointTensor e;
      e.name = m.at("name").get<std::string>();
      e.group = m.at("group").get<std::string>();
      const DType dt = parse_dtype(m.at("dtype").get<std::string>());
      const Shape shape = m.at("shape").get<Shape>();
      const auto offset = m.at("offset").get<std::uint64_t>();
      const auto nbytes = m.at("nbytes").get<std::uint64_t>();
      if (offset != expected || nbytes != static_cast<std::uint64_t>(msu::numel(shape)) * element_size(dt)) {
        throw CheckpointError("inconsistent manifest entry for '" + e.name + "'");
      }
      if (payload_start + offset + nbytes > file_size) {
        throw CheckpointError("checkpoint '" + path.string() + "' is truncated (tensor '" + e.name + "')");
      }
      e.tensor = Tensor::empty(shape, dt);
      is.seekg(static_cast<std::streamoff>(payload_start + offset));
      if (!is.read(raw_bytes(e.tensor), static_cast<std::streamsize>(nbytes))) {
        throw CheckpointError("failed reading tensor '" + e.name + "'");
      }
      expected += nbytes;
      out.tensors.push_back(std::move(e));
    }
    if (payload_start + expected != file_size) {
      throw CheckpointError("checkpoint '" + path.string() + "' has " +
                            std::to_string(file_size - payload_start - expected) + " trailing bytes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint header in '" + path.string() + "': " + e.what());
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError("malformed checkpoint '" + path.string() + "': " + e.what());
  }
  return out;
}

void save_checkpoint(const MSUMamba& model, const std::filesystem::path& path, const TrainingState* state) {
  CheckpointFile f;
  f.config = model.config().to_json();
  for (const auto& [name, t] : model.named_parameters()) f.tensors.push_back({name, "param", t});
  for (const auto& [name, t] : model.named_buffers()) f.tensors.push_back({name, "buffer", t});
  if (state) {
    f.training_state = state->meta;
    for (const auto& [name, t] : state->tensors) f.tensors.push_back({name, "state", t});
  }
  write_checkpoint_file(path, f);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  CheckpointFile f = read_checkpoint_file(path);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(f.config);
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint config is invalid: " + std::string(e.what()));
  }
  auto model = build_model(cfg);

  std::map<std::string, Tensor> stored[2];
  TrainingState state;
  for (auto& e : f.tensors) {
    if (e.group == "state") {
      state.tensors.emplace_back(e.name, e.tensor);
      continue;
    }
    const int g = e.group == "param" ? 0 : e.group == "buffer" ? 1 : -1;
    if (g < 0) throw CheckpointError("unknown tensor group '" + e.group + "'");
    if (!stored[g].emplace(e.name, e.tensor).second) throw CheckpointError("duplicate tensor '" + e.name + "'");
  }
  const std::vector<NamedTensor> targets[2] = {model->named_parameters(), model->named_buffers()};
  for (int g = 0; g < 2; ++g) {
    if (stored[g].size() != targets[g].size()) {
      throw CheckpointError("tensor count mismatch: checkpoint has " + std::to_string(stored[g].size()) +
                            (g == 0 ? " parameters" : " buffers") + ", model expects " +
                            std::to_string(targets[g].size()));
    }
    for (auto [name, t] : targets[g]) {
      auto it = stored[g].find(name);
      if (it == stored[g].end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
      if (it->second.shape() != t.shape() || it->second.dtype() != t.dtype()) {
        throw CheckpointError("tensor '" + name + "' has shape " + to_string(it->second.shape()) + ", model expects " +
                              to_string(t.shape()));
      }
      t.copy_from_(it->second);
    }
  }
  LoadedCheckpoint out;
  out.model = std::move(model);
  if (!f.training_state.is_null()) {
    state.meta = f.training_state;
    out.state = std::move(state);
  }
  return out;
}

}  // namespace msu
