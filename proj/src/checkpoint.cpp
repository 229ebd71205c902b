#include "mose/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mose {

namespace {

constexpr char kMagic[5] = {'M', 'O', 'S', 'E', '1'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  put_u32(os, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw FormatError("checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
  const uint64_t lo = get_u32(is);
  const uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const uint32_t len = get_u32(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw FormatError("checkpoint: truncated string");
  return s;
}

void put_f32_data(std::ostream& os, const float* data, int64_t count) {
  static_assert(sizeof(float) == 4);
  for (int64_t i = 0; i < count; ++i) {
    uint32_t bits = std::bit_cast<uint32_t>(data[i]);
    put_u32(os, bits);
  }
}

void get_f32_data(std::istream& is, float* data, int64_t count) {
  for (int64_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32(is));
  }
}

}  // namespace

Checkpoint Checkpoint::from_model(ModelParams<float>& model, int64_t iteration,
                                  const std::string& rng_state) {
  Checkpoint c;
  c.config = model.config;
  for (auto& p : model.named_params()) c.tensors.emplace_back(p.name, p.tensor);
  c.iteration = iteration;
  c.rng_state = rng_state;
  return c;
}

ModelParams<float> Checkpoint::to_model() const {
  ModelParams<float> model = ModelParams<float>::init(config);
  auto params = model.named_params();
  if (params.size() != tensors.size()) {
    throw FormatError("checkpoint: expected " + std::to_string(params.size()) +
                      " tensors, found " + std::to_string(tensors.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = tensors[i];
    if (name != params[i].name) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is \"" + name +
                        "\", expected \"" + params[i].name + "\"");
    }
    if (tensor.shape() != params[i].tensor.shape()) {
      throw FormatError("checkpoint: tensor \"" + name + "\" has shape " +
                        shape_str(tensor.shape()) + ", expected " +
                        shape_str(params[i].tensor.shape()));
    }
    std::copy(tensor.data(), tensor.data() + tensor.numel(), params[i].tensor.data());
  }
  return model;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  put_string(os, config.to_json().dump());
  put_u64(os, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    put_string(os, name);
    put_u32(os, static_cast<uint32_t>(tensor.ndim()));
    for (int i = 0; i < tensor.ndim(); ++i) put_u64(os, static_cast<uint64_t>(tensor.dim(i)));
    put_u64(os, static_cast<uint64_t>(tensor.numel()) * 4);
    put_f32_data(os, tensor.data(), tensor.numel());
  }
  put_u64(os, static_cast<uint64_t>(iteration));
  put_string(os, rng_state);
  if (!os) throw IoError("checkpoint: write failure on " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[5];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic, not a MOSE1 file: " + path);
  }
  const uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint c;
  try {
    c.config = ModelConfig::from_json(nlohmann::json::parse(get_string(is)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad embedded config: ") + e.what());
  }
  const uint64_t count = get_u64(is);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = get_string(is);
    const uint32_t ndim = get_u32(is);
    std::vector<int64_t> shape(ndim);
    int64_t numel = 1;
    for (uint32_t j = 0; j < ndim; ++j) {
      shape[j] = static_cast<int64_t>(get_u64(is));
      numel *= shape[j];
    }
    const uint64_t bytes = get_u64(is);
    if (bytes != static_cast<uint64_t>(numel) * 4) {
      throw FormatError("checkpoint: tensor \"" + name + "\" byte length " +
                        std::to_string(bytes) + " does not match shape " + shape_str(shape));
    }
    auto t = Tensor<float>::zeros(shape);
    get_f32_data(is, t.data(), numel);
    c.tensors.emplace_back(std::move(name), std::move(t));
  }
  c.iteration = static_cast<int64_t>(get_u64(is));
  c.rng_state = get_string(is);
  return c;
}

void Checkpoint::check_compatible(const ModelConfig& a, const ModelConfig& b) {
  auto differ = [](const std::string& field, auto x, auto y) {
    if (x != y) {
      throw MismatchError("config/checkpoint mismatch on " + field + ": " + std::to_string(x) +
                          " vs " + std::to_string(y));
    }
  };
  differ("model.n_layers", a.n_layers, b.n_layers);
  differ("model.n_heads", a.n_heads, b.n_heads);
  differ("model.model_dim", a.model_dim, b.model_dim);
  differ("model.vocab", a.vocab, b.vocab);
  differ("model.seq_len", a.seq_len, b.seq_len);
  differ("model.n_experts", a.n_experts, b.n_experts);
  differ("model.top_k", a.top_k, b.top_k);
  differ("model.width_min", a.width_min, b.width_min);
  differ("model.width_max", a.width_max, b.width_max);
  differ("model.width_step", a.width_step, b.width_step);
}

}  // namespace mose
