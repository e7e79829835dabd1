#include "agecycle/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <openssl/evp.h>

#include "agecycle/errors.hpp"

namespace agecycle {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in native order, which must be little-endian");

namespace {

enum class BlobType : std::uint8_t { kFloat32 = 1, kFloat64 = 2, kInt64 = 3 };

BlobType blob_type(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat32:
      return BlobType::kFloat32;
    case torch::kFloat64:
      return BlobType::kFloat64;
    case torch::kInt64:
      return BlobType::kInt64;
    default:
      throw InvalidInput("checkpoint: unsupported tensor dtype");
  }
}

torch::Dtype torch_type(BlobType t) {
  switch (t) {
    case BlobType::kFloat32:
      return torch::kFloat32;
    case BlobType::kFloat64:
      return torch::kFloat64;
    case BlobType::kInt64:
      return torch::kInt64;
  }
  throw IoError("checkpoint: unknown blob dtype");
}

template <typename T>
void put(std::string& out, T value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw IoError("checkpoint truncated: " + path_);
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string encode_blobs(const std::vector<NamedTensor>& blobs) {
  std::string out;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, tensor] : blobs) {
    const auto t = tensor.detach().contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(blob_type(t)));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) {
      put<std::int64_t>(out, d);
    }
    const auto bytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    put<std::uint64_t>(out, bytes);
    out.append(static_cast<const char*>(t.data_ptr()), bytes);
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open: " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_state(std::vector<NamedTensor>& dst, const std::string& prefix,
                  const std::vector<NamedTensor>& src) {
  for (const auto& [name, t] : src) {
    dst.emplace_back(prefix + name, t);
  }
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericError("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file_hex(const std::filesystem::path& path) {
  const auto data = read_file(path);
  return sha256_hex(data.data(), data.size());
}

void write_archive(const std::filesystem::path& path, const nlohmann::json& header,
                   const std::vector<NamedTensor>& blobs) {
  const std::string blob_section = encode_blobs(blobs);
  nlohmann::json full = header;
  full["schema_version"] = kCheckpointSchemaVersion;
  full["content_sha256"] = sha256_hex(blob_section.data(), blob_section.size());
  const std::string json_text = full.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointSchemaVersion);
  put<std::uint64_t>(out, json_text.size());
  out.append(json_text);
  out.append(blob_section);

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) {
      throw IoError("cannot write checkpoint: " + tmp.string());
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) {
      throw IoError("short write: " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
  }
}

CheckpointArchive read_archive(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  Reader r(data, path.string());
  if (std::memcmp(r.take(sizeof(kCheckpointMagic)), kCheckpointMagic, sizeof(kCheckpointMagic)) !=
      0) {
    throw IoError("not a checkpoint (bad magic): " + path.string());
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointSchemaVersion) {
    throw IoError("unsupported checkpoint schema version " + std::to_string(version) + ": " +
                  path.string());
  }
  const auto json_len = r.get<std::uint64_t>();
  CheckpointArchive archive;
  try {
    archive.header = nlohmann::json::parse(std::string_view(r.take(json_len), json_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint header is not valid JSON: " + path.string() + ": " + e.what());
  }
  const std::size_t blob_start = r.pos();
  const auto expected = archive.header.value("content_sha256", std::string());
  const auto actual = sha256_hex(data.data() + blob_start, data.size() - blob_start);
  if (expected != actual) {
    throw IoError("checkpoint content hash mismatch: " + path.string());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len), name_len);
    const auto type = static_cast<BlobType>(r.get<std::uint8_t>());
    const auto ndim = r.get<std::uint32_t>();
    std::vector<std::int64_t> dims;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      dims.push_back(r.get<std::int64_t>());
    }
    const auto bytes = r.get<std::uint64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(torch_type(type)));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != bytes) {
      throw IoError("checkpoint blob '" + name + "' size mismatch: " + path.string());
    }
    std::memcpy(t.data_ptr(), r.take(bytes), bytes);
    archive.blobs.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) {
    throw IoError("trailing bytes in checkpoint: " + path.string());
  }
  return archive;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  nlohmann::json header;
  header["config"] = state.config.to_json();
  header["step"] = state.step;
  header["g_optimizer_steps"] = state.g_optimizer.steps();
  header["d_optimizer_steps"] = state.d_optimizer.steps();
  if (state.weights) {
    header["weights"] = {{"lambda_recon", state.weights->lambda_recon},
                         {"lambda_actv", state.weights->lambda_actv},
                         {"lambda_reg", state.weights->lambda_reg}};
  } else {
    header["weights"] = nullptr;
  }
  std::vector<NamedTensor> blobs = state.generator_parameters();
  for (auto& b : state.discriminator_parameters()) {
    blobs.push_back(std::move(b));
  }
  append_state(blobs, "opt_G/", state.g_optimizer.state());
  append_state(blobs, "opt_D/", state.d_optimizer.state());
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, _] : blobs) {
    names.push_back(name);
  }
  header["blobs"] = names;
  write_archive(path, header, blobs);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const auto archive = read_archive(path);
  const auto& h = archive.header;
  TrainConfig config;
  try {
    config = TrainConfig::from_json(h.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint config block invalid: " + path.string() + ": " + e.what());
  }
  TrainState state = init_train_state(config);
  std::map<std::string, torch::Tensor> blobs(archive.blobs.begin(), archive.blobs.end());
  {
    torch::NoGradGuard no_grad;
    for (const auto& list : {state.generator_parameters(), state.discriminator_parameters()}) {
      for (const auto& [name, p] : list) {
        const auto it = blobs.find(name);
        if (it == blobs.end()) {
          throw IoError("checkpoint missing parameter '" + name + "': " + path.string());
        }
        if (it->second.sizes() != p.sizes()) {
          throw IoError("checkpoint parameter '" + name + "' has wrong shape: " + path.string());
        }
        p.copy_(it->second);
      }
    }
  }
  auto collect = [&](const std::string& prefix) {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : archive.blobs) {
      if (name.rfind(prefix, 0) == 0) {
        out.emplace_back(name.substr(prefix.size()), t);
      }
    }
    return out;
  };
  state.g_optimizer.load_state(collect("opt_G/"), h.at("g_optimizer_steps").get<std::int64_t>());
  state.d_optimizer.load_state(collect("opt_D/"), h.at("d_optimizer_steps").get<std::int64_t>());
  state.step = h.at("step").get<std::int64_t>();
  if (h.contains("weights") && h["weights"].is_object()) {
    LossWeights w;
    w.lambda_recon = h["weights"].at("lambda_recon").get<double>();
    w.lambda_actv = h["weights"].at("lambda_actv").get<double>();
    w.lambda_reg = h["weights"].at("lambda_reg").get<double>();
    state.weights = w;
  }
  return state;
}

}  // namespace agecycle
