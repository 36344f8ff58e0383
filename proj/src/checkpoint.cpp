#include "sgm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "sgm/errors.hpp"
#include "sgm/io.hpp"

namespace sgm {

static_assert(sizeof(float) == 4, "checkpoint format requires 32-bit floats");

namespace {

constexpr char kMagic[4] = {'S', 'G', 'M', 'N'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                               std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T take(const char* what) {
    need(sizeof(T), what);
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    if constexpr (std::is_same_v<T, float>)
      return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    else
      return static_cast<T>(bits);
  }

  std::string take_string(std::size_t n) {
    need(n, "tensor name");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size())
      throw DataError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, const Tensor& t) { tensors_.push_back({std::move(name), t}); }

std::optional<Tensor> Checkpoint::find(std::string_view name) const {
  for (const auto& nt : tensors_)
    if (nt.name == name) return nt.tensor;
  return std::nullopt;
}

Tensor Checkpoint::get(std::string_view name, const Shape& shape) const {
  auto t = find(name);
  if (!t) throw DataError("checkpoint has no tensor '" + std::string(name) + "'");
  if (t->shape() != shape)
    throw DataError("checkpoint tensor '" + std::string(name) + "' has shape " + to_string(t->shape()) +
                    ", expected " + to_string(shape));
  return *t;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint16_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    if (name.size() > 0xffff) throw ArgumentError("checkpoint: tensor name too long: " + name.substr(0, 32));
    if (t.rank() > 0xff) throw ArgumentError("checkpoint: rank too large for " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) put<float>(out, v);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic bytes");
  Reader r(bytes);
  for (int i = 0; i < 4; ++i) r.take<std::uint8_t>("magic");
  const auto version = r.take<std::uint16_t>("version");
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.take<std::uint32_t>("tensor count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.take<std::uint16_t>("name length");
    std::string name = r.take_string(name_len);
    const auto rank = r.take<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.take<std::uint32_t>("extent");
    Tensor t(shape);
    for (auto& v : t.data()) v = r.take<float>("payload");
    ck.add(std::move(name), t);
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes after " + std::to_string(count) + " tensors");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  try {
    return deserialize(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void Checkpoint::assign_to(TensorList& params) const {
  for (auto& p : params) {
    Tensor src = get(p.name, p.tensor.shape());
    p.tensor.vec() = src.vec();
  }
}

std::uint64_t checksum(const TensorList& tensors) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& nt : tensors) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(nt.tensor.ptr());
    for (std::size_t i = 0; i < nt.tensor.numel() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace sgm
