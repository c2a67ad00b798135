#include "vtp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "vtp/config.hpp"
#include "vtp/error.hpp"

namespace vtp {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_doubles(std::vector<std::uint8_t>& out, std::span<const double> values) {
  for (double d : values) put_u64(out, std::bit_cast<std::uint64_t>(d));
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<NamedTensor> tensor_table(const Checkpoint& ckpt) {
  std::vector<NamedTensor> out;
  for (const auto& p : ckpt.model.parameters()) out.push_back({p.name, p.tensor});
  if (ckpt.optimizer) {
    for (const auto& [name, m] : ckpt.optimizer->first_moment)
      out.push_back({"optimizer.m." + name, Tensor(Shape{m.size()}, m)});
    for (const auto& [name, v] : ckpt.optimizer->second_moment)
      out.push_back({"optimizer.v." + name, Tensor(Shape{v.size()}, v)});
  }
  return out;
}

/// Model with the architecture implied by config and keep lists, zero-filled.
VitModel skeleton(const ModelConfig& config, const std::map<std::string, std::vector<std::size_t>>*
                                                 keeps) {
  VitModel m;
  m.config = config;
  const std::size_t d = config.embed_dim;
  auto z = [](Shape s) { return Tensor(std::move(s), 0.0, true); };
  auto lin = [&](std::size_t in, std::size_t out) { return Linear{z({in, out}), z({out})}; };
  auto norm = [&]() { return Norm{z({d}), z({d})}; };
  m.patch_embed = lin(config.patch_dim(), d);
  m.cls_token = z({d});
  m.pos_embed = z({config.tokens(), d});
  m.blocks.resize(config.num_layers);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    Block& b = m.blocks[i];
    for (auto pos : kSitePositions) {
      const std::size_t w = site_width(config, pos);
      if (keeps) {
        const std::string key = GateSite{i, pos}.name();
        auto it = keeps->find(key);
        if (it == keeps->end()) throw FormatError("keep_indices: missing entry '" + key + "'");
        const auto& k = it->second;
        if (k.empty()) throw FormatError("keep_indices: '" + key + "' is empty");
        for (std::size_t j = 0; j < k.size(); ++j) {
          if (k[j] >= w || (j > 0 && k[j] <= k[j - 1])) {
            throw FormatError("keep_indices: '" + key + "' is not a sorted subset of [0, " +
                              std::to_string(w) + ")");
          }
        }
        b.kept(pos) = k;
      } else {
        b.kept(pos).resize(w);
        for (std::size_t j = 0; j < w; ++j) b.kept(pos)[j] = j;
        b.gate(pos) = z({w});
      }
    }
    const std::size_t qi = b.kept(SitePosition::qkv_in).size();
    const std::size_t ao = b.kept(SitePosition::attn_out).size();
    const std::size_t mi = b.kept(SitePosition::mlp_in).size();
    const std::size_t hk = b.kept(SitePosition::mlp_hidden).size();
    b.norm1 = norm();
    b.q = lin(qi, d);
    b.k = lin(qi, d);
    b.v = lin(qi, ao);
    b.out = lin(ao, d);
    b.norm2 = norm();
    b.fc1 = lin(mi, hk);
    b.fc2 = lin(hk, d);
  }
  m.final_norm = norm();
  m.head = lin(d, config.num_classes);
  m.pruned = keeps != nullptr;
  return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const auto table = tensor_table(ckpt);
  json header;
  header["config"] = model_config_to_json(ckpt.model.config);
  header["stage"] = ckpt.stage;
  header["pruned"] = ckpt.model.pruned;
  if (ckpt.model.pruned) {
    json keeps = json::object();
    for (std::size_t b = 0; b < ckpt.model.blocks.size(); ++b)
      for (auto pos : kSitePositions)
        keeps[GateSite{b, pos}.name()] = ckpt.model.blocks[b].kept(pos);
    header["keep_indices"] = keeps;
  }
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : table) {
    dir.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"offset", offset}});
    offset += 8 * t.tensor.size();
  }
  header["tensors"] = dir;
  header["payload_bytes"] = offset;
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    header["optimizer"] = {{"step", o.step},
                           {"beta1", o.hyper.beta1},
                           {"beta2", o.hyper.beta2},
                           {"eps", o.hyper.eps},
                           {"weight_decay", o.hyper.weight_decay}};
  } else {
    header["optimizer"] = nullptr;
  }
  header["rng_state"] = ckpt.rng_state;

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : table) put_doubles(out, t.tensor.data());
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("magic: expected \"VTPC\"");
  }
  if (bytes.size() < 16) throw FormatError("header_length: file truncated before header");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("version: unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t header_len = get_le(bytes.data() + 8, 8);
  if (header_len > bytes.size() - 16) throw FormatError("header_length: exceeds file size");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("header: ") + e.what());
  }

  try {
    Checkpoint ckpt;
    ModelConfig config;
    try {
      config = model_config_from_json(header.at("config"));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("config: ") + e.what());
    }
    ckpt.stage = header.at("stage").get<std::string>();
    const bool pruned = header.at("pruned").get<bool>();
    std::map<std::string, std::vector<std::size_t>> keeps;
    if (pruned) keeps = header.at("keep_indices").get<std::map<std::string, std::vector<std::size_t>>>();
    ckpt.model = skeleton(config, pruned ? &keeps : nullptr);
    ckpt.rng_state = header.at("rng_state").get<std::string>();

    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    const std::size_t payload_start = 16 + header_len;
    if (bytes.size() - payload_start < payload_bytes) throw FormatError("payload: file truncated");
    if (bytes.size() - payload_start > payload_bytes) throw FormatError("payload: trailing bytes");

    std::map<std::string, Tensor> expected;
    std::vector<std::string> order;
    for (const auto& p : ckpt.model.parameters()) {
      expected[p.name] = p.tensor;
      order.push_back(p.name);
    }
    std::optional<OptimizerState> opt;
    if (!header.at("optimizer").is_null()) {
      const auto& o = header.at("optimizer");
      opt.emplace();
      opt->step = o.at("step").get<std::uint64_t>();
      opt->hyper.beta1 = o.at("beta1").get<double>();
      opt->hyper.beta2 = o.at("beta2").get<double>();
      opt->hyper.eps = o.at("eps").get<double>();
      opt->hyper.weight_decay = o.at("weight_decay").get<double>();
    }

    std::map<std::string, bool> seen;
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const std::size_t count = shape_size(shape);
      if (offset % 8 != 0 || offset > payload_bytes || payload_bytes - offset < 8 * count) {
        throw FormatError("tensor '" + name + "': offset outside payload");
      }
      if (seen[name]) throw FormatError("tensor '" + name + "': duplicated");
      seen[name] = true;
      std::vector<double> values(count);
      const std::uint8_t* src = bytes.data() + payload_start + offset;
      for (std::size_t i = 0; i < count; ++i)
        values[i] = std::bit_cast<double>(get_le(src + 8 * i, 8));

      const bool is_m = name.rfind("optimizer.m.", 0) == 0;
      const bool is_v = name.rfind("optimizer.v.", 0) == 0;
      if (is_m || is_v) {
        if (!opt) throw FormatError("tensor '" + name + "': optimizer state without optimizer header");
        const std::string pname = name.substr(12);
        auto it = expected.find(pname);
        if (it == expected.end() || shape.size() != 1 || count != it->second.size()) {
          throw FormatError("tensor '" + name + "': does not match any parameter");
        }
        (is_m ? opt->first_moment : opt->second_moment)[pname] = std::move(values);
        continue;
      }
      auto it = expected.find(name);
      if (it == expected.end()) throw FormatError("tensor '" + name + "': unknown tensor name");
      if (it->second.shape() != shape) {
        throw FormatError("tensor '" + name + "': shape " + shape_string(shape) +
                          " disagrees with architecture " + shape_string(it->second.shape()));
      }
      std::copy(values.begin(), values.end(), it->second.data().begin());
    }
    for (const auto& name : order)
      if (!seen[name]) throw FormatError("tensor '" + name + "': missing");
    ckpt.optimizer = std::move(opt);
    return ckpt;
  } catch (const json::exception& e) {
    throw FormatError(std::string("header: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("header: ") + e.what());
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw FormatError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot rename '" + tmp.string() + "': " + ec.message());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace vtp
