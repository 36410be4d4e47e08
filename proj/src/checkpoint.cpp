#include "dreamrec/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dreamrec::num {
namespace {

constexpr std::array<char, 8> kMagic = {'D', 'R', 'E', 'C', 'C', 'K', 'P', 'T'};
// Guards against absurd allocations when reading a corrupt file.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

class Writer {
 public:
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
    }
  }
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(source_ + ": " + what + " (offset " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated container");
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::vector<char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

const ContainerEntry* Container::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const std::string* Container::meta(std::string_view key) const {
  for (const auto& [k, v] : metadata) {
    if (k == key) return &v;
  }
  return nullptr;
}

const std::string& Container::require_meta(std::string_view key) const {
  if (const auto* v = meta(key)) return *v;
  throw FormatError("checkpoint is missing metadata key '" + std::string(key) + "'");
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.u32(kContainerVersion);
  w.u64(container.fingerprint);
  w.u32(static_cast<std::uint32_t>(container.metadata.size()));
  for (const auto& [k, v] : container.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(container.entries.size()));
  for (const auto& e : container.entries) {
    if (shape_size(e.shape) != e.values.size()) {
      throw ContractError("container entry '" + e.name + "' has inconsistent shape");
    }
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.u64(d);
    for (float v : e.values) w.u32(std::bit_cast<std::uint32_t>(v));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kMagic) r.fail("not a checkpoint container (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    r.fail("unsupported container version " + std::to_string(version));
  }
  Container c;
  c.fingerprint = r.u64();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    std::string v = r.str();
    c.metadata.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n_entries = r.u32();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    ContainerEntry e;
    e.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("entry '" + e.name + "' has implausible rank");
    std::uint64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t extent = r.u64();
      count *= extent;
      if (count > kMaxElements) r.fail("entry '" + e.name + "' is too large");
      e.shape.push_back(static_cast<std::size_t>(extent));
    }
    e.values.resize(static_cast<std::size_t>(count));
    for (auto& v : e.values) v = std::bit_cast<float>(r.u32());
    c.entries.push_back(std::move(e));
  }
  if (!r.done()) r.fail("trailing bytes after last entry");
  return c;
}

template <typename Real>
void append_parameters(Container& container, const ParameterSet<Real>& params,
                       std::string_view prefix) {
  for (const Parameter<Real>* p : params.all()) {
    ContainerEntry e;
    e.name = std::string(prefix) + p->name;
    e.shape = p->value.shape();
    e.values.assign(p->value.values().begin(), p->value.values().end());
    container.entries.push_back(std::move(e));
  }
}

template <typename Real>
void load_parameters(const Container& container, const ParameterSet<Real>& params,
                     std::string_view prefix) {
  for (Parameter<Real>* p : params.all()) {
    const std::string name = std::string(prefix) + p->name;
    const ContainerEntry* e = container.find(name);
    if (e == nullptr) throw FormatError("checkpoint has no entry for parameter '" + name + "'");
    if (e->shape != p->value.shape()) {
      throw FormatError("checkpoint entry '" + name + "' has shape " + shape_string(e->shape) +
                        ", model expects " + shape_string(p->value.shape()));
    }
    std::vector<Real> values(e->values.begin(), e->values.end());
    p->value = Tensor<Real>(e->shape, std::move(values));
  }
}

template void append_parameters<float>(Container&, const ParameterSet<float>&, std::string_view);
template void append_parameters<double>(Container&, const ParameterSet<double>&, std::string_view);
template void load_parameters<float>(const Container&, const ParameterSet<float>&,
                                     std::string_view);
template void load_parameters<double>(const Container&, const ParameterSet<double>&,
                                      std::string_view);

}  // namespace dreamrec::num
