#include "varp/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

#include "varp/errors.hpp"

namespace varp {

namespace {

constexpr char kMagic[4] = {'V', 'A', 'R', 'P'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc_of(const std::string& bytes, std::size_t len) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(len)));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CorruptFileError("checkpoint directory runs past the end of the payload");
  }
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

Tensor chars_tensor(const std::string& s) {
  std::vector<double> v(s.begin(), s.end());
  if (v.empty()) v.push_back(0.0);
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v));
}

std::string tensor_chars(const Tensor& t) {
  std::string s;
  for (double c : t.data()) {
    if (c != 0.0) s.push_back(static_cast<char>(static_cast<int>(c)));
  }
  return s;
}

const Tensor& need(const TensorDict& d, const std::string& name) {
  auto it = d.find(name);
  if (it == d.end()) throw CorruptFileError(fmt::format("checkpoint lacks '{}'", name));
  return it->second;
}

std::size_t as_size(double v) { return static_cast<std::size_t>(v); }

Tensor schedule_tensor(const ScaleSchedule& s) {
  std::vector<double> v;
  for (const auto& e : s.extents()) {
    v.push_back(static_cast<double>(e.height));
    v.push_back(static_cast<double>(e.width));
  }
  const std::size_t k = s.size();
  return Tensor::from({k, 2}, std::move(v));
}

ScaleSchedule schedule_from(const Tensor& t) {
  std::vector<Extent> e;
  auto d = t.data();
  for (std::size_t i = 0; i + 1 < d.size(); i += 2) e.push_back({as_size(d[i]), as_size(d[i + 1])});
  return ScaleSchedule(std::move(e));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path));
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::string& bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(fmt::format("short write to '{}'", path));
}

}  // namespace

std::string encode_checkpoint(const TensorDict& tensors) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u64(out, e);
    for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  put_u32(out, crc_of(out, out.size()));
  return out;
}

TensorDict decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16) throw CorruptFileError(fmt::format("checkpoint truncated ({} bytes)", bytes.size()));
  if (bytes.compare(0, 4, kMagic, 4) != 0) throw CorruptFileError("bad checkpoint magic");
  const std::size_t body = bytes.size() - 4;
  const std::string crc_bytes = bytes.substr(body);
  Reader tail(crc_bytes, 4);
  const auto stored = static_cast<std::uint32_t>(tail.uint(4));
  if (stored != crc_of(bytes, body)) throw CorruptFileError("checkpoint CRC mismatch");
  Reader r(bytes, body);
  r.str(4);
  const auto version = r.uint(4);
  if (version != kCheckpointVersion) {
    throw VersionError(fmt::format("checkpoint version {} (supported: {})", version, kCheckpointVersion));
  }
  const auto count = r.uint(4);
  TensorDict out;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = r.str(r.uint(4));
    const auto rank = r.uint(4);
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(8));
    const std::size_t n = numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = std::bit_cast<double>(r.uint(8));
    Tensor t = rank == 0 ? Tensor::scalar(data.at(0)) : Tensor::from(std::move(shape), std::move(data));
    if (!out.emplace(std::move(name), std::move(t)).second) throw CorruptFileError("duplicate tensor name in checkpoint");
  }
  if (!r.done()) throw CorruptFileError("trailing bytes after checkpoint directory");
  return out;
}

void save_tensors(const std::string& path, const TensorDict& tensors) { write_file(path, encode_checkpoint(tensors)); }

TensorDict load_tensors(const std::string& path) { return decode_checkpoint(read_file(path)); }

Role role_for_name(const std::string& name) {
  auto ends_with = [&](const char* s) {
    const std::string suf(s);
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".lora_a") || ends_with(".lora_b")) return Role::LORA;
  if (name == "embed.subject") return Role::SUBJECT;
  if (name.rfind("embed.", 0) == 0 || name.rfind("head.", 0) == 0) return Role::EMBED;
  if (name.rfind("blocks.", 0) == 0) {
    const auto dot = name.find('.', 7);
    const std::string part = name.substr(dot + 1, name.find('.', dot + 1) - dot - 1);
    if (part == "sa") return Role::SA;
    if (part == "ca") return Role::CA;
    if (part == "ffn") return Role::FFN;
    if (part == "norm") return Role::NORM;
  }
  throw CorruptFileError(fmt::format("parameter '{}' has no known role", name));
}

TensorDict model_to_dict(const VarModel& m) {
  TensorDict d;
  const auto& c = m.config;
  d["meta.kind"] = chars_tensor("var");
  d["meta.config"] = Tensor::from({6}, {static_cast<double>(c.vocab), static_cast<double>(c.channels),
                                        static_cast<double>(c.depth), static_cast<double>(c.width),
                                        static_cast<double>(c.heads), static_cast<double>(c.ffn)});
  d["meta.schedule"] = schedule_tensor(c.schedule);
  std::string words;
  for (const auto& w : m.prompts.words()) words += w + "\n";
  d["meta.prompts"] = chars_tensor(words);
  d["codebook"] = m.codebook.entries.detach();
  for (const auto& [name, p] : m.params) d["param." + name] = p.value.detach();
  return d;
}

VarModel model_from_dict(const TensorDict& d) {
  if (tensor_chars(need(d, "meta.kind")) != "var") throw CorruptFileError("checkpoint does not hold a VAR model");
  auto cfg = need(d, "meta.config").data();
  if (cfg.size() != 6) throw CorruptFileError("malformed meta.config");
  VarModel m;
  m.config = VarConfig{.vocab = as_size(cfg[0]), .channels = as_size(cfg[1]),
                       .schedule = schedule_from(need(d, "meta.schedule")), .depth = as_size(cfg[2]),
                       .width = as_size(cfg[3]), .heads = as_size(cfg[4]), .ffn = as_size(cfg[5])};
  std::vector<std::string> words;
  std::istringstream in(tensor_chars(need(d, "meta.prompts")));
  for (std::string w; std::getline(in, w);) words.push_back(w);
  m.prompts = PromptVocab(std::move(words));
  m.codebook = Codebook{need(d, "codebook").clone()};
  for (const auto& [name, t] : d) {
    if (name.rfind("param.", 0) != 0) continue;
    const std::string pname = name.substr(6);
    const Role role = role_for_name(pname);
    int block = -1;
    if (pname.rfind("blocks.", 0) == 0) block = std::stoi(pname.substr(7));
    Tensor v = t.clone();
    v.set_requires_grad(true);
    m.params.emplace(pname, Param{std::move(v), role, block});
  }
  // Architecture sanity: a fresh model must have exactly the base parameter set.
  auto ref = VarModel::init(m.config, m.prompts, m.codebook, 0);
  for (const auto& [name, p] : ref.params) {
    auto it = m.params.find(name);
    if (it == m.params.end() || it->second.value.shape() != p.value.shape()) {
      throw CorruptFileError(fmt::format("checkpoint parameter '{}' missing or misshapen", name));
    }
  }
  return m;
}

void save_model(const std::string& path, const VarModel& model) { save_tensors(path, model_to_dict(model)); }

VarModel load_model(const std::string& path) { return model_from_dict(load_tensors(path)); }

TensorDict autoencoder_to_dict(const AutoencoderWeights& w) {
  TensorDict d;
  const auto& c = w.config;
  d["meta.kind"] = chars_tensor("autoencoder");
  d["meta.config"] = Tensor::from({5}, {static_cast<double>(c.image_size), static_cast<double>(c.patch),
                                        static_cast<double>(c.channels), static_cast<double>(c.hidden),
                                        static_cast<double>(c.vocab)});
  d["meta.schedule"] = schedule_tensor(c.schedule);
  d["codebook"] = w.codebook.entries.detach();
  for (const auto& [name, t] : w.params) d["param." + name] = t.detach();
  return d;
}

AutoencoderWeights autoencoder_from_dict(const TensorDict& d) {
  if (tensor_chars(need(d, "meta.kind")) != "autoencoder") {
    throw CorruptFileError("checkpoint does not hold an autoencoder");
  }
  auto cfg = need(d, "meta.config").data();
  if (cfg.size() != 5) throw CorruptFileError("malformed meta.config");
  AutoencoderConfig c{.image_size = as_size(cfg[0]), .patch = as_size(cfg[1]), .channels = as_size(cfg[2]),
                      .hidden = as_size(cfg[3]), .vocab = as_size(cfg[4]),
                      .schedule = schedule_from(need(d, "meta.schedule"))};
  AutoencoderWeights w = AutoencoderWeights::init(c, 0);
  for (auto& [name, t] : w.params) {
    const auto& stored = need(d, "param." + name);
    if (stored.shape() != t.shape()) throw CorruptFileError(fmt::format("autoencoder parameter '{}' misshapen", name));
    t = stored.clone();
  }
  const auto& cb = need(d, "codebook");
  if (cb.shape() != w.codebook.entries.shape()) throw CorruptFileError("codebook misshapen");
  w.codebook.entries = cb.clone();
  return w;
}

void save_autoencoder(const std::string& path, const AutoencoderWeights& w) {
  save_tensors(path, autoencoder_to_dict(w));
}

AutoencoderWeights load_autoencoder(const std::string& path) { return autoencoder_from_dict(load_tensors(path)); }

}  // namespace varp
