#include <bit>
#include <cstring>
#include <fstream>

#include "muffin/error.hpp"
#include "muffin/model.hpp"

// Layout: magic, u32 version, config, then named tensors (rank, u64 dims,
// f64 payload) and named batch-norm buffers. All integers and floats are
// little-endian.

namespace muffin::model {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes the host representation");

constexpr char kMagic[8] = {'M', 'U', 'F', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void text(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(std::span<const double> v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }
  void finish() {
    out_.flush();
    if (!out_) throw IoError("write to " + path_.string() + " failed");
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open checkpoint " + path.string());
  }
  template <typename T>
  T pod() {
    T v{};
    read(&v, sizeof v);
    return v;
  }
  std::string text() {
    const auto len = pod<std::uint32_t>();
    if (len > (1u << 16)) fail("implausible name length");
    std::string s(len, '\0');
    read(s.data(), len);
    return s;
  }
  void doubles(std::span<double> v) { read(v.data(), v.size_bytes()); }
  [[noreturn]] void fail(const std::string& why) const {
    throw IoError("checkpoint " + path_.string() + ": " + why);
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  void read(void* dst, std::size_t bytes) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!in_) fail("truncated");
  }
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  Writer w(path);
  for (char ch : kMagic) w.pod(ch);
  w.pod(kVersion);
  const ModelConfig& c = params.config;
  for (std::size_t v : {c.num_items, c.d, c.n, c.layers, c.bands, c.kernel})
    w.pod(static_cast<std::uint64_t>(v));
  w.pod(c.dropout);
  for (bool flag : {c.use_uaf, c.use_gfm, c.use_lfm, c.uaf_as_mlp, c.uaf_per_layer})
    w.pod(static_cast<std::uint8_t>(flag));

  const auto tensors = params.parameters();
  w.pod(static_cast<std::uint64_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.text(name);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod(static_cast<std::uint64_t>(d));
    w.doubles(t.values());
  }
  const auto buffers = params.buffers();
  w.pod(static_cast<std::uint64_t>(buffers.size()));
  for (const auto& [name, stats] : buffers) {
    w.text(name);
    w.pod(static_cast<std::uint64_t>(stats->mean.size()));
    w.doubles(stats->mean);
    w.doubles(stats->var);
    w.pod(stats->momentum);
    w.pod(stats->eps);
  }
  w.finish();
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  for (char ch : kMagic)
    if (r.pod<char>() != ch) r.fail("not a checkpoint file");
  if (const auto version = r.pod<std::uint32_t>(); version != kVersion)
    r.fail("unsupported version " + std::to_string(version));

  ModelConfig c;
  for (std::size_t* field : {&c.num_items, &c.d, &c.n, &c.layers, &c.bands, &c.kernel})
    *field = static_cast<std::size_t>(r.pod<std::uint64_t>());
  c.dropout = r.pod<double>();
  for (bool* flag : {&c.use_uaf, &c.use_gfm, &c.use_lfm, &c.uaf_as_mlp, &c.uaf_per_layer})
    *flag = r.pod<std::uint8_t>() != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("stored configuration is invalid: ") + e.what());
  }

  ModelParams params = ModelParams::init(c, 0);
  auto tensors = params.parameters();
  if (r.pod<std::uint64_t>() != tensors.size()) r.fail("tensor count does not match configuration");
  for (auto& [name, t] : tensors) {
    if (r.text() != name) r.fail("expected tensor " + name);
    const auto rank = r.pod<std::uint32_t>();
    ad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
    if (shape != t.shape()) r.fail("tensor " + name + " has shape " + ad::shape_string(shape));
    r.doubles(t.mutable_values());
  }
  auto buffers = params.buffers();
  if (r.pod<std::uint64_t>() != buffers.size()) r.fail("buffer count does not match configuration");
  for (auto& [name, stats] : buffers) {
    if (r.text() != name) r.fail("expected buffer " + name);
    if (r.pod<std::uint64_t>() != stats->mean.size()) r.fail("buffer " + name + " has wrong width");
    r.doubles(stats->mean);
    r.doubles(stats->var);
    stats->momentum = r.pod<double>();
    stats->eps = r.pod<double>();
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return params;
}

}  // namespace muffin::model
