#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "muffin/data.hpp"
#include "muffin/error.hpp"

namespace muffin::data {

namespace {

static_assert(std::endian::native == std::endian::little, "dataset cache writes the host representation");

constexpr char kMagic[8] = {'M', 'U', 'F', 'F', 'D', 'S', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

class Fnv1a {
 public:
  void bytes(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void text(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

void write_text(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class CacheReader {
 public:
  explicit CacheReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot read dataset cache " + path.string());
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    read(&v, sizeof v);
    return v;
  }
  std::string text() {
    const std::uint64_t len = u64();
    if (len > (1u << 20)) fail("implausible string length");
    std::string s(len, '\0');
    read(s.data(), len);
    return s;
  }
  void read(void* dst, std::size_t bytes) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!in_) fail("truncated");
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw IoError("dataset cache " + path_.string() + ": " + why);
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

std::size_t SequenceDataset::num_interactions() const {
  std::size_t total = 0;
  for (const auto& s : sequences) total += s.size();
  return total;
}

std::span<const std::size_t> SequenceDataset::train_input(std::size_t user) const {
  const auto& s = sequences.at(user);
  return std::span<const std::size_t>(s).first(s.size() - 2);
}

std::size_t SequenceDataset::valid_target(std::size_t user) const {
  const auto& s = sequences.at(user);
  return s[s.size() - 2];
}

std::size_t SequenceDataset::test_target(std::size_t user) const { return sequences.at(user).back(); }

std::uint64_t SequenceDataset::hash() const {
  Fnv1a h;
  h.u64(user_ids.size());
  for (const auto& u : user_ids) h.text(u);
  h.u64(item_ids.size());
  for (const auto& i : item_ids) h.text(i);
  for (const auto& s : sequences) {
    h.u64(s.size());
    for (std::size_t id : s) h.u64(id);
  }
  return h.value();
}

SequenceDataset build_sequences(const InteractionLog& log, std::vector<std::string>* warnings) {
  std::map<std::string, std::vector<std::size_t>> by_user;  // record indices in input order
  for (std::size_t i = 0; i < log.records.size(); ++i) by_user[log.records[i].user].push_back(i);

  std::map<std::string, std::size_t> item_index;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> kept;
  for (auto& [user, idx] : by_user) {
    if (idx.size() < 3) {
      if (warnings != nullptr)
        warnings->push_back("user " + user + " has " + std::to_string(idx.size()) +
                            " interactions; at least 3 are needed for train/valid/test, dropped");
      continue;
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return log.records[a].timestamp < log.records[b].timestamp;
    });
    for (std::size_t i : idx) item_index.emplace(log.records[i].item, 0);
    kept.emplace_back(user, std::move(idx));
  }
  if (kept.empty()) throw DataError("no user has the three interactions needed for leave-one-out");

  SequenceDataset ds;
  std::size_t next = 1;
  for (auto& [item, id] : item_index) {
    id = next++;
    ds.item_ids.push_back(item);
  }
  for (auto& [user, idx] : kept) {
    ds.user_ids.push_back(user);
    auto& seq = ds.sequences.emplace_back();
    seq.reserve(idx.size());
    for (std::size_t i : idx) seq.push_back(item_index.at(log.records[i].item));
  }
  return ds;
}

std::vector<Example> examples(const SequenceDataset& ds, Split split, bool all_prefixes) {
  std::vector<Example> out;
  for (std::size_t u = 0; u < ds.num_users(); ++u) {
    const auto& seq = ds.sequences[u];
    const std::span<const std::size_t> all(seq);
    const std::size_t train_len = seq.size() - 2;
    switch (split) {
      case Split::Train:
        if (all_prefixes) {
          for (std::size_t k = 1; k < train_len; ++k) out.push_back({u, all.first(k), seq[k]});
        } else if (train_len >= 2) {
          out.push_back({u, all.first(train_len - 1), seq[train_len - 1]});
        }
        break;
      case Split::Valid: out.push_back({u, all.first(train_len), seq[train_len]}); break;
      case Split::Test: out.push_back({u, all.first(train_len + 1), seq[train_len + 1]}); break;
    }
  }
  return out;
}

SequenceBatch make_batch(std::span<const Example> rows, std::size_t n) {
  SequenceBatch b;
  b.rows = rows.size();
  b.length = n;
  b.ids.assign(rows.size() * n, kPaddingId);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto ctx = rows[r].context;
    const std::size_t keep = std::min(ctx.size(), n);
    std::copy(ctx.end() - static_cast<std::ptrdiff_t>(keep), ctx.end(),
              b.ids.begin() + static_cast<std::ptrdiff_t>(r * n + n - keep));
    b.lengths.push_back(keep);
    b.targets.push_back(rows[r].target);
    b.users.push_back(rows[r].user);
  }
  return b;
}

std::vector<SequenceBatch> make_batches(const SequenceDataset& ds, std::size_t n, std::size_t batch_size,
                                        std::uint64_t seed, Split split, bool all_prefixes) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<Example> rows = examples(ds, split, all_prefixes);
  if (split == Split::Train) {
    std::mt19937_64 rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
  }
  std::vector<SequenceBatch> out;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, rows.size() - start);
    out.push_back(make_batch(std::span<const Example>(rows).subspan(start, count), n));
  }
  return out;
}

DatasetStats dataset_stats(const SequenceDataset& ds) {
  DatasetStats s;
  s.users = ds.num_users();
  s.items = ds.num_items();
  s.interactions = ds.num_interactions();
  if (s.users > 0) s.avg_length = static_cast<double>(s.interactions) / static_cast<double>(s.users);
  if (s.users > 0 && s.items > 0)
    s.sparsity = 1.0 - static_cast<double>(s.interactions) / (static_cast<double>(s.users) * static_cast<double>(s.items));
  return s;
}

std::string format_stats(const DatasetStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "# Users\t# Items\t# Interactions\tAvg. Length\tSparsity\n%zu\t%zu\t%zu\t%.1f\t%.2f%%\n", s.users,
                s.items, s.interactions, s.avg_length, 100.0 * s.sparsity);
  return buf;
}

void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset cache " + path.string());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  write_u64(out, ds.hash());
  write_u64(out, ds.user_ids.size());
  for (const auto& u : ds.user_ids) write_text(out, u);
  write_u64(out, ds.item_ids.size());
  for (const auto& i : ds.item_ids) write_text(out, i);
  for (const auto& s : ds.sequences) {
    write_u64(out, s.size());
    for (std::size_t id : s) write_u64(out, id);
  }
  out.flush();
  if (!out) throw IoError("write to " + path.string() + " failed");
}

SequenceDataset load_dataset(const std::filesystem::path& path) {
  CacheReader r(path);
  char magic[8];
  r.read(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic)) r.fail("not a dataset cache");
  std::uint32_t version = 0;
  r.read(&version, sizeof version);
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint64_t stored_hash = r.u64();

  SequenceDataset ds;
  ds.user_ids.resize(r.u64());
  for (auto& u : ds.user_ids) u = r.text();
  ds.item_ids.resize(r.u64());
  for (auto& i : ds.item_ids) i = r.text();
  ds.sequences.resize(ds.user_ids.size());
  for (auto& s : ds.sequences) {
    s.resize(r.u64());
    for (auto& id : s) {
      id = r.u64();
      if (id == kPaddingId || id > ds.item_ids.size()) r.fail("item index out of range");
    }
    if (s.size() < 3) r.fail("sequence shorter than three items");
  }
  if (ds.hash() != stored_hash) r.fail("content hash mismatch");
  return ds;
}

}  // namespace muffin::data
