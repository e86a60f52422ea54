#include "evolve/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "evolve/errors.hpp"

namespace evolve {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'L', 'V'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void size(std::size_t v, const char* what) {
    if (v > 0xFFFFFFFFu) throw ConfigError(std::string(what) + " does not fit the checkpoint format");
    u32(static_cast<std::uint32_t>(v));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor<float>* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  for (std::size_t v : {c.d_model, c.n_heads, c.n_layers, c.max_seq_len, c.vocab_size, c.n_ages, c.n_t2f, c.n_classes}) {
    w.size(v, "model config");
  }
  w.f64(c.dropout);
  w.u8(static_cast<std::uint8_t>(c.mode));
  w.size(ckpt.tensors.size(), "tensor count");
  for (const auto& t : ckpt.tensors) {
    w.size(t.name.size(), "tensor name");
    w.bytes(t.name.data(), t.name.size());
    w.size(t.tensor.rank(), "tensor rank");
    for (std::size_t d : t.tensor.shape()) w.size(d, "tensor dimension");
    for (float v : t.tensor.data()) w.f32(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw DataError("not a checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  for (std::size_t* field : {&c.d_model, &c.n_heads, &c.n_layers, &c.max_seq_len, &c.vocab_size, &c.n_ages, &c.n_t2f,
                             &c.n_classes}) {
    *field = r.u32();
  }
  c.dropout = r.f64();
  const std::uint8_t mode = r.u8();
  if (mode > 1) throw DataError("checkpoint has unknown model mode " + std::to_string(mode));
  c.mode = static_cast<ModelMode>(mode);
  const std::uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw DataError("tensor '" + t.name + "' has invalid rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = r.f32();
    t.tensor = Tensor<float>(std::move(shape), std::move(values));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

bool is_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char head[4] = {};
  in.read(head, 4);
  return in.gcount() == 4 && std::memcmp(head, kMagic, 4) == 0;
}

Checkpoint checkpoint_from_model(const EvolveModel<float>& model) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  for (const auto& p : model.parameters()) ckpt.tensors.push_back({p.name, Tensor<float>(p.tensor.shape(), p.tensor.values())});
  return ckpt;
}

EvolveModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<NamedTensor<float>> params;
  for (const auto& [name, shape] : EvolveModel<float>::parameter_layout(ckpt.config)) {
    const NamedTensor<float>* t = ckpt.find(name);
    if (t == nullptr) throw DataError("checkpoint is missing tensor '" + name + "'");
    params.push_back({t->name, Tensor<float>(t->tensor.shape(), t->tensor.values())});
  }
  return EvolveModel<float>(ckpt.config, std::move(params));
}

}  // namespace evolve
