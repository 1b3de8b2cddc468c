#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "muffin/data.hpp"
#include "muffin/error.hpp"

namespace muffin::data {

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? tab : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return fields;
}

bool parse_int(std::string_view s, std::int64_t& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && !s.empty();
}

struct TripleHash {
  std::size_t operator()(const Interaction& r) const noexcept {
    const std::hash<std::string> h;
    std::size_t seed = h(r.user);
    seed ^= h(r.item) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
    seed ^= std::hash<std::int64_t>()(r.timestamp) + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2);
    return seed;
  }
};

}  // namespace

InteractionLog parse_log(std::istream& in, const std::string& source) {
  InteractionLog log;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    const bool was_first = first_content;
    first_content = false;
    if (fields.size() < 3 || fields.size() > 4)
      throw DataError(source + ":" + std::to_string(line_no) + ": expected 3 or 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    std::int64_t ts = 0;
    if (!parse_int(fields[2], ts)) {
      if (was_first) continue;  // header
      throw DataError(source + ":" + std::to_string(line_no) + ": timestamp '" + std::string(fields[2]) +
                      "' is not an integer");
    }
    if (fields[0].empty() || fields[1].empty())
      throw DataError(source + ":" + std::to_string(line_no) + ": empty user or item id");
    log.records.push_back({std::string(fields[0]), std::string(fields[1]), ts});
  }
  return log;
}

InteractionLog read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read interaction log " + path.string());
  return parse_log(in, path.string());
}

void write_log(const InteractionLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write interaction log " + path.string());
  out << "user\titem\ttimestamp\n";
  for (const Interaction& r : log.records) out << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
  if (!out) throw IoError("write to " + path.string() + " failed");
}

InteractionLog deduplicate(const InteractionLog& log) {
  InteractionLog out;
  std::unordered_set<Interaction, TripleHash> seen;
  for (const Interaction& r : log.records)
    if (seen.insert(r).second) out.records.push_back(r);
  return out;
}

InteractionLog five_core(const InteractionLog& log, std::size_t min_count) {
  if (log.records.empty()) throw DataError("interaction log is empty");
  std::vector<bool> alive(log.records.size(), true);
  std::size_t rounds = 0;
  bool changed = true;
  auto sweep = [&](auto key) {
    std::unordered_map<std::string_view, std::size_t> counts;
    for (std::size_t i = 0; i < alive.size(); ++i)
      if (alive[i]) ++counts[key(log.records[i])];
    bool removed = false;
    for (std::size_t i = 0; i < alive.size(); ++i)
      if (alive[i] && counts[key(log.records[i])] < min_count) {
        alive[i] = false;
        removed = true;
      }
    return removed;
  };
  while (changed) {
    ++rounds;
    const bool users = sweep([](const Interaction& r) -> std::string_view { return r.user; });
    const bool items = sweep([](const Interaction& r) -> std::string_view { return r.item; });
    changed = users || items;
  }
  InteractionLog out;
  for (std::size_t i = 0; i < alive.size(); ++i)
    if (alive[i]) out.records.push_back(log.records[i]);
  if (out.records.empty()) {
    std::unordered_set<std::string_view> users, items;
    for (const Interaction& r : log.records) {
      users.insert(r.user);
      items.insert(r.item);
    }
    throw DataError(std::to_string(min_count) + "-core filtering removed everything: input had " +
                    std::to_string(log.records.size()) + " interactions, " + std::to_string(users.size()) +
                    " users, " + std::to_string(items.size()) + " items; " + std::to_string(rounds) +
                    " rounds");
  }
  return out;
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
}

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

}  // namespace muffin::data
