// SPDX-License-Identifier: Apache-2.0

#include "cpa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cpa/error.hpp"

namespace cpa {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw IoError(std::string("checkpoint truncated while reading ") + what + " (need " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()) + ")");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8, "parameters");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads}, {"d_mlp", c.d_mlp},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_mlp = j.at("d_mlp").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint metadata: ") + e.what());
  }
  return c;
}

std::string serialize_checkpoint(const Transformer& model, const nlohmann::json& extra) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["config"] = config_to_json(model.config());
  const std::string meta_text = meta.dump();
  std::string out(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  for (const Tensor* t : model.parameters()) {
    for (double x : t->data()) put_f64(out, x);
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  const std::string magic = in.take(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) {
    throw IoError("checkpoint magic mismatch: found '" + magic + "', expected 'CPAE'");
  }
  const std::uint32_t version = in.u32("version");
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint version mismatch: found " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  }
  const std::uint32_t meta_len = in.u32("metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in.take(meta_len, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const ModelConfig config = config_from_json(meta.at("config"));
  config.validate();
  // Shapes come from a fresh initialization; every value is overwritten.
  Transformer model = Transformer::random(config);
  for (Tensor* t : model.parameters()) {
    for (double& x : t->data()) x = in.f64();
  }
  if (in.remaining() != 0) {
    throw IoError("checkpoint has " + std::to_string(in.remaining()) + " trailing bytes");
  }
  return Checkpoint{std::move(model), std::move(meta)};
}

void save_checkpoint(const Transformer& model, const std::filesystem::path& path, const nlohmann::json& extra) {
  const std::string bytes = serialize_checkpoint(model, extra);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

std::string model_checksum(const Transformer& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : model.parameters()) {
    for (double x : t->data()) {
      auto bits = std::bit_cast<std::uint64_t>(x);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace cpa
