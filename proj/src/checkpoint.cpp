#include "mim/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mim/errors.hpp"

namespace mim {

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, value >>= 4) out[static_cast<std::size_t>(i)] = kDigits[value & 0xf];
  return out;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a(ss.str()));
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, const Tensor<float>& t) {
  const std::size_t at = out.size();
  out.resize(at + 4 * t.size());
  char* dst = out.data() + at;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t.data()[i]);
    for (int b = 0; b < 4; ++b) dst[4 * i + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
}

void get_f32(const char* src, Tensor<float>& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + static_cast<std::size_t>(b)])) << (8 * b);
    }
    t.data()[i] = std::bit_cast<float>(bits);
  }
}

nlohmann::json vocab_spec(const ModelConfig& c) {
  return {{"size", c.vocab_size},      {"bytes", vocab::kByteCount}, {"bos", vocab::kBos},
          {"eos", vocab::kEos},        {"l2r", vocab::kL2R},         {"r2l", vocab::kR2L},
          {"pre", vocab::kPre},        {"suf", vocab::kSuf},         {"mid", vocab::kMid},
          {"pad", vocab::kPad},        {"sentinel_compatible", c.sentinel_compatible()}};
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Returns the header and the payload offset.
std::pair<nlohmann::json, std::size_t> parse_header(const std::string& bytes, const std::filesystem::path& path) {
  if (bytes.size() < 16 || std::string_view(bytes).substr(0, 8) != kCheckpointMagic) {
    throw IoError(path.string() + ": not a checkpoint (bad magic)");
  }
  const std::uint64_t len = get_u64(bytes.data() + 8);
  if (len > bytes.size() - 16) throw IoError(path.string() + ": truncated header");
  try {
    return {nlohmann::json::parse(bytes.substr(16, len)), 16 + len};
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const Parameters<float>& p = data.params;
  std::vector<std::pair<std::string, const Tensor<float>*>> entries;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) entries.emplace_back(p.names[i], &p.tensors[i]);
  if (data.optimizer) {
    for (std::size_t i = 0; i < p.tensors.size(); ++i) entries.emplace_back("adam.m." + p.names[i], &data.optimizer->m[i]);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) entries.emplace_back("adam.v." + p.names[i], &data.optimizer->v[i]);
  }

  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  for (const auto& [name, t] : entries) {
    dir.push_back({{"name", name}, {"shape", t->shape()}, {"offset", payload.size()}, {"bytes", 4 * t->size()}});
    put_f32(payload, *t);
  }
  nlohmann::json header = {{"format", std::string(kCheckpointMagic)},
                           {"model", p.config},
                           {"config", data.run_config},
                           {"config_hash", data.config_hash},
                           {"vocab", vocab_spec(p.config)},
                           {"step", data.step},
                           {"tokens_seen", data.tokens_seen},
                           {"optimizer", data.optimizer.has_value()},
                           {"adam_step", data.optimizer ? data.optimizer->step : 0},
                           {"tensors", dir},
                           {"payload_bytes", payload.size()}};
  const std::string head = header.dump();

  std::string out(kCheckpointMagic);
  put_u64(out, head.size());
  out += head;
  out += payload;

  // Write then rename so a crash never leaves a half-written checkpoint behind.
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  return parse_header(read_all(path), path).first;
}

CheckpointData load_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& expected_hash) {
  const std::string bytes = read_all(path);
  const auto [header, start] = parse_header(bytes, path);
  CheckpointData out;
  try {
    out.config_hash = header.at("config_hash").get<std::string>();
    if (expected_hash && *expected_hash != out.config_hash) {
      throw ConfigError(path.string() + ": config hash " + out.config_hash + " does not match requested config " +
                        *expected_hash);
    }
    out.run_config = header.at("config");
    out.step = header.at("step").get<std::uint64_t>();
    out.tokens_seen = header.value("tokens_seen", std::uint64_t{0});
    const ModelConfig config = header.at("model").get<ModelConfig>();
    config.validate();
    out.params = init_parameters<float>(config, 0);

    std::map<std::string, nlohmann::json> dir;
    for (const auto& e : header.at("tensors")) dir[e.at("name").get<std::string>()] = e;
    const std::size_t payload = bytes.size() - start;
    auto fill = [&](const std::string& name, Tensor<float>& t) {
      const auto it = dir.find(name);
      if (it == dir.end()) throw IoError(path.string() + ": missing tensor " + name);
      const auto shape = it->second.at("shape").get<Shape>();
      if (shape != t.shape()) {
        throw IoError(path.string() + ": tensor " + name + " has shape " + shape_string(shape) + ", expected " +
                      shape_string(t.shape()));
      }
      const auto offset = it->second.at("offset").get<std::size_t>();
      if (offset > payload || payload - offset < 4 * t.size()) throw IoError(path.string() + ": truncated payload");
      get_f32(bytes.data() + start + offset, t);
    };
    for (std::size_t i = 0; i < out.params.tensors.size(); ++i) fill(out.params.names[i], out.params.tensors[i]);
    if (header.at("optimizer").get<bool>()) {
      OptimizerState<float> opt = init_optimizer(out.params);
      opt.step = header.at("adam_step").get<std::uint64_t>();
      for (std::size_t i = 0; i < out.params.tensors.size(); ++i) {
        fill("adam.m." + out.params.names[i], opt.m[i]);
        fill("adam.v." + out.params.names[i], opt.v[i]);
      }
      out.optimizer = std::move(opt);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed header: " + e.what());
  }
  return out;
}

}  // namespace mim
