#include "metaicl/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "metaicl/error.hpp"
#include "metaicl/io.hpp"

namespace metaicl {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'I', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(U) > bytes.size()) throw DataError("checkpoint truncated");
  U value;
  std::memcpy(&value, bytes.data() + pos, sizeof(U));
  pos += sizeof(U);
  return value;
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ffn", c.d_ffn},       {"max_positions", c.max_positions}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string serialize_checkpoint(const ModelParams<float>& params, const CheckpointInfo& info) {
  json header;
  header["format"] = "metaicl-checkpoint";
  header["version"] = kVersion;
  header["config"] = to_json(params.config);
  header["step"] = info.step;
  header["rng_state"] = info.rng_state;
  header["provenance"] = info.provenance;
  json tensors = json::array();
  params.for_each_tensor([&](const std::string& name, const float*, Eigen::Index r, Eigen::Index c) {
    tensors.push_back({{"name", name}, {"rows", r}, {"cols", c}});
  });
  header["tensors"] = tensors;
  const std::string header_text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  params.for_each_tensor([&](const std::string&, const float* d, Eigen::Index r, Eigen::Index c) {
    out.append(reinterpret_cast<const char*>(d), static_cast<std::size_t>(r * c) * sizeof(float));
  });
  return out;
}

Checkpoint parse_checkpoint(std::string_view bytes, const ModelConfig* expected) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) throw DataError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;

  const ModelConfig config = model_config_from_json(header.at("config"));
  if (expected && !(*expected == config)) {
    throw ConfigError("checkpoint config " + to_json(config).dump() + " does not match expected " +
                      to_json(*expected).dump());
  }
  Checkpoint ckpt{ModelParams<float>::zeros(config), {}};
  ckpt.info.step = header.value("step", std::uint64_t{0});
  ckpt.info.rng_state = header.value("rng_state", std::string{});
  ckpt.info.provenance = header.value("provenance", json::object());

  const json& tensors = header.at("tensors");
  std::size_t index = 0;
  ckpt.params.for_each_tensor([&](const std::string& name, float* d, Eigen::Index r, Eigen::Index c) {
    if (index >= tensors.size()) throw DataError("checkpoint is missing tensor " + name);
    const json& t = tensors[index++];
    if (t.at("name").get<std::string>() != name || t.at("rows").get<Eigen::Index>() != r ||
        t.at("cols").get<Eigen::Index>() != c) {
      throw DataError("checkpoint tensor mismatch at " + name);
    }
    const std::size_t nbytes = static_cast<std::size_t>(r * c) * sizeof(float);
    if (pos + nbytes > bytes.size()) throw DataError("checkpoint data truncated at " + name);
    std::memcpy(d, bytes.data() + pos, nbytes);
    pos += nbytes;
  });
  if (index != tensors.size() || pos != bytes.size()) throw DataError("checkpoint has trailing or extra tensors");
  if (!ckpt.params.all_finite()) throw NumericalError("checkpoint contains non-finite weights");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const CheckpointInfo& info) {
  write_file_atomic(path, serialize_checkpoint(params, info));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  return parse_checkpoint(read_file(path), expected);
}

}  // namespace metaicl
