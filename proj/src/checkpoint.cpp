// Copyright 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json to_json(const BackboneConfig& b) {
  json units = json::array();
  for (const auto& u : b.units)
    units.push_back({{"kind", u.kind == UnitSpec::Kind::plain ? "plain" : "residual"},
                     {"out_channels", u.out_channels},
                     {"kernel", u.kernel},
                     {"stride", u.stride},
                     {"padding", u.padding}});
  return {{"arch", b.arch},       {"in_channels", b.in_channels}, {"height", b.height},
          {"width", b.width},     {"num_classes", b.num_classes}, {"units", units}};
}

json to_json(const MoEConfig& m) {
  return {{"num_experts", m.num_experts},
          {"model_scale", m.model_scale},
          {"routing", to_string(m.routing)},
          {"blocks_per_router", m.blocks_per_router}};
}

json to_json(const ChannelMask& m) { return m.units; }

json to_json(const ModelConfig& c) {
  json j = {{"backbone", to_json(c.backbone)},
            {"variant", to_string(c.variant)},
            {"moe", to_json(c.moe)},
            {"seed", c.seed}};
  j["mask"] = c.mask ? to_json(*c.mask) : json(nullptr);
  return j;
}

BackboneConfig backbone_from_json(const json& j) {
  BackboneConfig b;
  b.arch = j.at("arch").get<std::string>();
  b.in_channels = j.at("in_channels").get<int>();
  b.height = j.at("height").get<int>();
  b.width = j.at("width").get<int>();
  b.num_classes = j.at("num_classes").get<int>();
  for (const auto& u : j.at("units")) {
    UnitSpec s;
    const auto kind = u.at("kind").get<std::string>();
    if (kind != "plain" && kind != "residual") throw FormatError("unknown unit kind '" + kind + "'");
    s.kind = kind == "plain" ? UnitSpec::Kind::plain : UnitSpec::Kind::residual;
    s.out_channels = u.at("out_channels").get<int>();
    s.kernel = u.at("kernel").get<int>();
    s.stride = u.at("stride").get<int>();
    s.padding = u.at("padding").get<int>();
    b.units.push_back(s);
  }
  return b;
}

MoEConfig moe_from_json(const json& j) {
  MoEConfig m;
  m.num_experts = j.at("num_experts").get<int>();
  m.model_scale = j.at("model_scale").get<double>();
  m.routing = parse_routing_mode(j.at("routing").get<std::string>());
  m.blocks_per_router = j.at("blocks_per_router").get<int>();
  return m;
}

ChannelMask mask_from_json(const json& j) { return ChannelMask{j.get<std::vector<std::vector<int>>>()}; }

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.backbone = backbone_from_json(j.at("backbone"));
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.moe = moe_from_json(j.at("moe"));
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("mask") && !j.at("mask").is_null()) c.mask = mask_from_json(j.at("mask"));
  return c;
}

namespace {

struct Entry {
  std::string name;
  const Tensor<float>* tensor;
};

std::vector<Entry> entries(const Model<float>& m) {
  std::vector<Entry> out;
  for (const auto& p : m.routers().params) out.push_back({p.name, &p.value});
  for (const auto& p : m.backbone().params) out.push_back({p.name, &p.value});
  for (std::size_t i = 0; i < m.buffers().size(); ++i) out.push_back({m.buffer_names()[i], &m.buffers()[i]});
  return out;
}

template <typename U>
void put(std::string& buf, U v) {
  char raw[sizeof(U)];
  std::memcpy(raw, &v, sizeof(U));
  buf.append(raw, sizeof(U));
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model, const json& extra) {
  json meta;
  meta["model"] = to_json(model.config());
  meta["partition"] = model.partition();
  json tensors = json::array();
  const auto list = entries(model);
  for (const auto& e : list) tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}});
  meta["tensors"] = tensors;
  meta["extra"] = extra;
  const std::string doc = meta.dump();

  std::string buf(kCheckpointMagic, 8);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint64_t>(buf, doc.size());
  buf += doc;
  for (const auto& e : list)
    buf.append(reinterpret_cast<const char*>(e.tensor->ptr()), static_cast<std::size_t>(e.tensor->size()) * sizeof(float));

  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + tmp + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw FormatError("short write to '" + tmp + "'");
  }
  std::filesystem::rename(tmp, target);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t off = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (buf.size() - off < n)
      throw FormatError("checkpoint '" + path + "' truncated while reading " + what + " at byte " + std::to_string(off));
  };
  need(8, "magic");
  if (buf.compare(0, 8, kCheckpointMagic) != 0) throw FormatError("'" + path + "' is not an ADVMOE01 checkpoint");
  off = 8;
  need(4, "version");
  std::uint32_t version = 0;
  std::memcpy(&version, buf.data() + off, 4);
  off += 4;
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  need(8, "metadata length");
  std::uint64_t len = 0;
  std::memcpy(&len, buf.data() + off, 8);
  off += 8;
  need(len, "metadata");
  json meta;
  try {
    meta = json::parse(buf.substr(off, len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  off += len;

  Checkpoint ck{Model<float>::build([&] {
                  try {
                    return model_config_from_json(meta.at("model"));
                  } catch (const json::exception& e) {
                    throw FormatError(std::string("checkpoint model config: ") + e.what());
                  }
                }()),
                meta.value("extra", json::object())};
  std::vector<Tensor<float>*> slots;
  std::vector<std::string> names;
  for (auto& p : ck.model.routers().params) slots.push_back(&p.value), names.push_back(p.name);
  for (auto& p : ck.model.backbone().params) slots.push_back(&p.value), names.push_back(p.name);
  for (std::size_t i = 0; i < ck.model.buffers().size(); ++i)
    slots.push_back(&ck.model.buffers()[i]), names.push_back(ck.model.buffer_names()[i]);
  const json& listed = meta.at("tensors");
  if (listed.size() != slots.size())
    throw FormatError("checkpoint lists " + std::to_string(listed.size()) + " tensors, model has " +
                      std::to_string(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != names[i] || listed[i].at("shape").get<Shape>() != slots[i]->shape())
      throw FormatError("checkpoint tensor " + std::to_string(i) + " ('" + names[i] + "') does not match the model");
    const std::size_t bytes = static_cast<std::size_t>(slots[i]->size()) * sizeof(float);
    need(bytes, names[i].c_str());
    std::memcpy(slots[i]->ptr(), buf.data() + off, bytes);
    off += bytes;
  }
  if (off != buf.size()) throw FormatError("checkpoint '" + path + "' has trailing bytes at " + std::to_string(off));
  return ck;
}

}  // namespace moelab
