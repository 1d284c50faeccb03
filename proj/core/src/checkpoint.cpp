#include "dcar/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "dcar/binary_io.hpp"
#include "dcar/config.hpp"
#include "dcar/errors.hpp"

namespace dcar {
namespace {

constexpr char kMagic[8] = {'D', 'C', 'A', 'R', 'C', 'K', 'P', 'T'};

enum class DType : uint8_t { f32 = 1, f64 = 2, i64 = 3, boolean = 4 };

DType dtype_code(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat: return DType::f32;
    case torch::kDouble: return DType::f64;
    case torch::kLong: return DType::i64;
    case torch::kBool: return DType::boolean;
    default: throw InvalidArgument("checkpoint: unsupported tensor dtype");
  }
}

torch::ScalarType scalar_type(DType d) {
  switch (d) {
    case DType::f32: return torch::kFloat;
    case DType::f64: return torch::kDouble;
    case DType::i64: return torch::kLong;
    case DType::boolean: return torch::kBool;
  }
  throw InvalidArgument("checkpoint: unknown dtype code");
}

template <typename T>
void write_elements(std::ostream& os, const torch::Tensor& t) {
  const T* p = t.data_ptr<T>();
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (int64_t i = 0; i < t.numel(); ++i) binary::write<T>(os, p[i]);
  }
}

template <typename T>
void read_elements(std::istream& is, torch::Tensor& t) {
  T* p = t.data_ptr<T>();
  if constexpr (std::endian::native == std::endian::little) {
    const auto n = static_cast<std::streamsize>(t.numel() * sizeof(T));
    if (!is.read(reinterpret_cast<char*>(p), n)) throw InvalidArgument("checkpoint truncated in tensor data");
  } else {
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = binary::read<T>(is);
  }
}

void write_tensor(std::ostream& os, const std::string& name, const torch::Tensor& tensor) {
  auto t = tensor.detach().cpu().contiguous();
  const auto code = dtype_code(t);
  binary::write_string(os, name);
  binary::write<uint8_t>(os, static_cast<uint8_t>(code));
  binary::write<uint32_t>(os, static_cast<uint32_t>(t.dim()));
  for (auto d : t.sizes()) binary::write<int64_t>(os, d);
  switch (code) {
    case DType::f32: write_elements<float>(os, t); break;
    case DType::f64: write_elements<double>(os, t); break;
    case DType::i64: write_elements<int64_t>(os, t); break;
    case DType::boolean: {
      auto bytes = t.to(torch::kUInt8);
      os.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), static_cast<std::streamsize>(t.numel()));
      break;
    }
  }
}

std::pair<std::string, torch::Tensor> read_tensor(std::istream& is) {
  auto name = binary::read_string(is, 1 << 16);
  const auto code = static_cast<DType>(binary::read<uint8_t>(is));
  const auto ndim = binary::read<uint32_t>(is);
  if (ndim > 8) throw InvalidArgument("checkpoint: tensor rank out of range");
  std::vector<int64_t> dims;
  for (uint32_t i = 0; i < ndim; ++i) {
    const auto d = binary::read<int64_t>(is);
    if (d < 0 || d > (1LL << 32)) throw InvalidArgument("checkpoint: tensor dimension out of range");
    dims.push_back(d);
  }
  auto t = torch::empty(dims, scalar_type(code));
  switch (code) {
    case DType::f32: read_elements<float>(is, t); break;
    case DType::f64: read_elements<double>(is, t); break;
    case DType::i64: read_elements<int64_t>(is, t); break;
    case DType::boolean: {
      auto bytes = torch::empty(dims, torch::kUInt8);
      if (!is.read(reinterpret_cast<char*>(bytes.data_ptr<uint8_t>()), static_cast<std::streamsize>(bytes.numel()))) {
        throw InvalidArgument("checkpoint truncated in tensor data");
      }
      t = bytes.to(torch::kBool);
      break;
    }
  }
  return {name, t};
}

void check_kind(const Checkpoint& ckpt, ComponentKind expected) {
  if (ckpt.kind != expected) {
    throw ConfigError(std::string("expected a ") + to_string(expected) + " checkpoint, found " + to_string(ckpt.kind));
  }
}

}  // namespace

const char* to_string(ComponentKind k) {
  switch (k) {
    case ComponentKind::tokenizer: return "tokenizer";
    case ComponentKind::generator: return "generator";
    case ComponentKind::head: return "head";
  }
  return "unknown";
}

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) return &value;
  }
  return nullptr;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  binary::write<uint32_t>(os, ckpt.version);
  binary::write<uint32_t>(os, static_cast<uint32_t>(ckpt.kind));
  binary::write_string(os, ckpt.config.dump());
  binary::write<uint64_t>(os, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) write_tensor(os, name, t);
  binary::write<uint8_t>(os, ckpt.stats ? 1 : 0);
  if (ckpt.stats) {
    auto mean = ckpt.stats->mean.to(torch::kDouble).contiguous();
    auto std = ckpt.stats->std.to(torch::kDouble).contiguous();
    binary::write<uint64_t>(os, static_cast<uint64_t>(mean.numel()));
    write_elements<double>(os, mean);
    write_elements<double>(os, std);
  }
  binary::write_string(os, ckpt.rng_state);
  return os.str();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw InvalidArgument("not a dcar checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.version = binary::read<uint32_t>(is);
  if (ckpt.version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const auto kind = binary::read<uint32_t>(is);
  if (kind < 1 || kind > 3) throw InvalidArgument("checkpoint: unknown component kind");
  ckpt.kind = static_cast<ComponentKind>(kind);
  try {
    ckpt.config = nlohmann::json::parse(binary::read_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("checkpoint: malformed config snapshot: ") + e.what());
  }
  const auto count = binary::read<uint64_t>(is);
  if (count > (1ULL << 20)) throw InvalidArgument("checkpoint: tensor count out of range");
  for (uint64_t i = 0; i < count; ++i) ckpt.tensors.push_back(read_tensor(is));
  if (binary::read<uint8_t>(is) != 0) {
    const auto d = binary::read<uint64_t>(is);
    if (d > (1ULL << 20)) throw InvalidArgument("checkpoint: stats dimension out of range");
    ResidualStats stats{torch::empty({static_cast<int64_t>(d)}, torch::kDouble),
                        torch::empty({static_cast<int64_t>(d)}, torch::kDouble)};
    read_elements<double>(is, stats.mean);
    read_elements<double>(is, stats.std);
    ckpt.stats = ResidualStats{stats.mean.to(torch::kFloat), stats.std.to(torch::kFloat)};
  }
  ckpt.rng_state = binary::read_string(is);
  if (is.peek() != std::char_traits<char>::eof()) throw InvalidArgument("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return deserialize_checkpoint(buf.str());
}

void collect_state(const torch::nn::Module& module, const std::string& prefix,
                   std::vector<std::pair<std::string, torch::Tensor>>& out) {
  for (const auto& p : module.named_parameters()) out.emplace_back(prefix + p.key(), p.value().detach());
  for (const auto& b : module.named_buffers()) out.emplace_back(prefix + b.key(), b.value().detach());
}

void restore_state(torch::nn::Module& module, const std::string& prefix, const Checkpoint& ckpt) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    const auto* src = ckpt.find(prefix + key);
    if (src == nullptr) throw InvalidArgument("checkpoint is missing tensor '" + prefix + key + "'");
    if (!src->sizes().equals(target.sizes())) {
      throw InvalidArgument("checkpoint tensor '" + prefix + key + "' has the wrong shape");
    }
    target.copy_(*src);
  };
  for (auto& p : module.named_parameters()) assign(p.key(), p.value());
  for (auto& b : module.named_buffers()) assign(b.key(), b.value());
}

Checkpoint tokenizer_checkpoint(TokenizerModel& model, const nlohmann::json& meta, const std::string& rng_state) {
  Checkpoint c;
  c.kind = ComponentKind::tokenizer;
  c.config = {{"tokenizer", model->config()}, {"meta", meta}};
  collect_state(*model, "", c.tensors);
  c.rng_state = rng_state;
  return c;
}

TokenizerModel tokenizer_from_checkpoint(const Checkpoint& ckpt) {
  check_kind(ckpt, ComponentKind::tokenizer);
  TokenizerConfig cfg;
  from_json(ckpt.config.at("tokenizer"), cfg);
  TokenizerModel model(cfg);
  restore_state(*model, "", ckpt);
  return model;
}

Checkpoint generator_checkpoint(MaskTransformer& generator, DiffusionHead& head, const nlohmann::json& meta,
                                const std::string& rng_state) {
  Checkpoint c;
  c.kind = ComponentKind::generator;
  c.config = {{"generator", generator->config()}, {"head", head->config()}, {"meta", meta}};
  collect_state(*generator, "generator.", c.tensors);
  collect_state(*head, "head.", c.tensors);
  c.stats = head->stats();
  c.rng_state = rng_state;
  return c;
}

std::pair<MaskTransformer, DiffusionHead> generator_from_checkpoint(const Checkpoint& ckpt) {
  check_kind(ckpt, ComponentKind::generator);
  GeneratorConfig gcfg;
  DiffusionHeadConfig hcfg;
  from_json(ckpt.config.at("generator"), gcfg);
  from_json(ckpt.config.at("head"), hcfg);
  MaskTransformer generator(gcfg);
  DiffusionHead head(hcfg);
  restore_state(*generator, "generator.", ckpt);
  restore_state(*head, "head.", ckpt);
  if (ckpt.stats) head->set_stats(*ckpt.stats);
  return {generator, head};
}

Checkpoint head_checkpoint(DiffusionHead& head, const std::string& rng_state) {
  Checkpoint c;
  c.kind = ComponentKind::head;
  c.config = {{"head", head->config()}};
  collect_state(*head, "", c.tensors);
  c.stats = head->stats();
  c.rng_state = rng_state;
  return c;
}

DiffusionHead head_from_checkpoint(const Checkpoint& ckpt) {
  check_kind(ckpt, ComponentKind::head);
  DiffusionHeadConfig cfg;
  from_json(ckpt.config.at("head"), cfg);
  DiffusionHead head(cfg);
  restore_state(*head, "", ckpt);
  if (ckpt.stats) head->set_stats(*ckpt.stats);
  return head;
}

}  // namespace dcar
