// SPDX-License-Identifier: Apache-2.0
#include "ccoe/checkpoint.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "ccoe/digest.hpp"
#include "ccoe/errors.hpp"

namespace ccoe {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'C', 'C', 'O', 'E'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw CorruptionError("checkpoint truncated");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    return static_cast<std::uint32_t>(s[0]) | static_cast<std::uint32_t>(s[1]) << 8 |
           static_cast<std::uint32_t>(s[2]) << 16 | static_cast<std::uint32_t>(s[3]) << 24;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <class Visit>
std::vector<std::uint8_t> encode_payload(Visit&& visit) {
  std::vector<std::pair<std::string, const Tensor*>> named;
  visit([&](const std::string& name, const Tensor& t) { named.emplace_back(name, &t); });
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t a = 0; a < t->rank(); ++a) put_u32(out, static_cast<std::uint32_t>(t->dim(a)));
    for (float f : t->values()) put_f32(out, f);
  }
  return out;
}

using TensorMap = std::map<std::string, Tensor>;

TensorMap decode_payload(std::span<const std::uint8_t> payload, std::size_t* tensor_bytes) {
  Reader r(payload);
  const std::uint32_t count = r.u32();
  TensorMap out;
  std::size_t bytes = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    auto name_bytes = r.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t rank = r.u32();
    if (rank < 1 || rank > 3) throw CorruptionError("tensor '" + name + "' has invalid rank");
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = r.u32();
      numel *= d;
    }
    if (numel * 4 > r.remaining()) throw CorruptionError("checkpoint truncated");
    std::vector<float> data(numel);
    for (float& f : data) f = r.f32();
    bytes += numel * 4;
    if (!out.emplace(name, Tensor(Shape(std::span<const std::size_t>(dims)), std::move(data))).second) {
      throw CorruptionError("duplicate tensor '" + name + "'");
    }
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after payload");
  if (tensor_bytes) *tensor_bytes = bytes;
  return out;
}

template <class Visit>
void fill_from(TensorMap& tensors, Visit&& visit) {
  std::size_t used = 0;
  visit([&](const std::string& name, Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptionError("checkpoint lacks tensor '" + name + "'");
    t = std::move(it->second);
    ++used;
  });
  if (used != tensors.size()) throw CorruptionError("checkpoint holds unexpected tensors");
}

json config_json(const ModelConfig& c) {
  return json{{"layers", c.layers}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},     {"vocab", c.vocab},     {"max_seq", c.max_seq}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  return c;
}

std::vector<std::uint8_t> assemble(json header, const std::vector<std::uint8_t>& payload) {
  header["digest"] = to_hex(sha256(payload));
  const std::string h = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

json expert_json(const ExpertSubnetwork& e) {
  return json{{"id", e.id}, {"domain", e.domain}, {"positions", e.positions}};
}

ExpertSubnetwork expert_shell(const json& j) {
  ExpertSubnetwork e;
  e.id = j.at("id").get<ExpertId>();
  e.domain = j.at("domain").get<std::string>();
  e.positions = j.at("positions").get<std::vector<std::size_t>>();
  e.layers.resize(e.positions.size());
  return e;
}

}  // namespace

std::vector<std::uint8_t> payload_bytes(const BackboneModel& model) {
  return encode_payload([&](auto&& f) { model.visit_params(f); });
}
std::vector<std::uint8_t> payload_bytes(const ExpertSubnetwork& expert) {
  return encode_payload([&](auto&& f) { ExpertSubnetwork::visit(expert, f); });
}
std::vector<std::uint8_t> payload_bytes(const PlannerExpert& planner) {
  return encode_payload([&](auto&& f) { PlannerExpert::visit(planner, f); });
}

std::string digest(const BackboneModel& model) { return to_hex(sha256(payload_bytes(model))); }
std::string digest(const ExpertSubnetwork& expert) { return to_hex(sha256(payload_bytes(expert))); }
std::string digest(const PlannerExpert& planner) { return to_hex(sha256(payload_bytes(planner))); }

std::vector<std::uint8_t> serialize(const BackboneModel& model) {
  json h{{"kind", "backbone"}, {"config", config_json(model.config())}, {"frozen", model.frozen()}};
  return assemble(std::move(h), payload_bytes(model));
}

std::vector<std::uint8_t> serialize(const ExpertSubnetwork& expert, const ModelConfig& config) {
  json h{{"kind", "expert"}, {"config", config_json(config)}, {"expert", expert_json(expert)}};
  return assemble(std::move(h), payload_bytes(expert));
}

std::vector<std::uint8_t> serialize(const PlannerExpert& planner, const ModelConfig& config) {
  json h{{"kind", "planner"},
         {"config", config_json(config)},
         {"expert", expert_json(planner.expert)},
         {"candidates", planner.candidates},
         {"uncalibrated", planner.uncalibrated}};
  return assemble(std::move(h), payload_bytes(planner));
}

LoadedComponent deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw CorruptionError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  }
  const std::uint32_t header_len = r.u32();
  auto header_bytes = r.take(header_len);
  const auto payload = bytes.subspan(r.position());

  json h;
  try {
    h = json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint header unreadable: ") + e.what());
  }

  LoadedComponent out{{}, ExpertSubnetwork{}};
  try {
    out.info.version = version;
    out.info.digest = h.at("digest").get<std::string>();
    if (to_hex(sha256(payload)) != out.info.digest) {
      throw CorruptionError("checkpoint payload digest mismatch");
    }
    out.info.config = config_from(h.at("config"));
    TensorMap tensors = decode_payload(payload, &out.info.tensor_bytes);
    const std::string kind = h.at("kind").get<std::string>();
    if (kind == "backbone") {
      out.info.kind = ComponentKind::backbone;
      BackboneParams p;
      p.layers.resize(out.info.config.layers);
      fill_from(tensors, [&](auto&& f) { BackboneParams::visit(p, f); });
      out.component = BackboneModel(out.info.config, std::move(p), h.at("frozen").get<bool>());
    } else if (kind == "expert") {
      out.info.kind = ComponentKind::expert;
      ExpertSubnetwork e = expert_shell(h.at("expert"));
      fill_from(tensors, [&](auto&& f) { ExpertSubnetwork::visit(e, f); });
      e.validate(out.info.config);
      out.component = std::move(e);
    } else if (kind == "planner") {
      out.info.kind = ComponentKind::planner;
      PlannerExpert p;
      p.expert = expert_shell(h.at("expert"));
      p.candidates = h.at("candidates").get<std::vector<ExpertId>>();
      p.uncalibrated = h.at("uncalibrated").get<std::vector<std::uint8_t>>();
      fill_from(tensors, [&](auto&& f) { PlannerExpert::visit(p, f); });
      p.validate(out.info.config);
      out.component = std::move(p);
    } else {
      throw CorruptionError("unknown component kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint header malformed: ") + e.what());
  } catch (const DimensionError& e) {
    throw CorruptionError(std::string("checkpoint tensors inconsistent: ") + e.what());
  } catch (const RoutingError& e) {
    throw CorruptionError(std::string("checkpoint positions invalid: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint config invalid: ") + e.what());
  }
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw ConfigError("cannot write " + tmp.string() + ": " + std::strerror(errno));
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      const int err = errno;
      ::close(fd);
      std::filesystem::remove(tmp);
      throw ConfigError("write to " + tmp.string() + " failed: " + std::strerror(err));
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const BackboneModel& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(model));
}
void save_checkpoint(const ExpertSubnetwork& expert, const ModelConfig& config,
                     const std::filesystem::path& path) {
  write_file_atomic(path, serialize(expert, config));
}
void save_checkpoint(const PlannerExpert& planner, const ModelConfig& config,
                     const std::filesystem::path& path) {
  write_file_atomic(path, serialize(planner, config));
}

LoadedComponent load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

namespace {

template <class T>
T load_as(const std::filesystem::path& path, const char* what) {
  LoadedComponent c = load_checkpoint(path);
  if (auto* v = std::get_if<T>(&c.component)) return std::move(*v);
  throw CorruptionError(path.string() + " does not hold " + what);
}

}  // namespace

BackboneModel load_backbone(const std::filesystem::path& path) {
  return load_as<BackboneModel>(path, "a backbone");
}
ExpertSubnetwork load_expert(const std::filesystem::path& path) {
  return load_as<ExpertSubnetwork>(path, "an expert");
}
PlannerExpert load_planner(const std::filesystem::path& path) {
  return load_as<PlannerExpert>(path, "a planner");
}

}  // namespace ccoe
