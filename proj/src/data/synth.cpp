#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "muffin/data.hpp"
#include "muffin/error.hpp"

namespace muffin::data {

namespace {

constexpr std::int64_t kEpoch = 1'600'000'000;
constexpr std::int64_t kStepSeconds = 3600;

std::string padded(std::size_t value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, value);
  return buf;
}

template <typename T>
T parse_value(const std::string& key, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (!in || !(in >> std::ws).eof())
    throw ConfigError(source + ": value '" + text + "' for " + key + " is not valid");
  if constexpr (std::is_unsigned_v<T>)
    if (text.find('-') != std::string::npos)
      throw ConfigError(source + ": " + key + " must be non-negative");
  return value;
}

}  // namespace

void SynthSpec::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("synthetic spec: " + msg);
  };
  require(num_users >= 1, "num_users must be positive");
  require(genres >= 1, "genres must be positive");
  require(num_items >= genres, "num_items must be at least genres");
  for (double share : {share_slow, share_multi, share_rapid})
    require(share >= 0.0 && share <= 1.0, "population shares must lie in [0, 1]");
  require(std::abs(share_slow + share_multi + share_rapid - 1.0) < 1e-9, "population shares must sum to 1");
  for (double rate : {switch_slow, switch_multi, switch_rapid})
    require(rate >= 0.0 && rate <= 1.0, "switch rates must lie in [0, 1]");
  require(min_length >= 3, "min_length must be at least 3");
  require(max_length >= min_length, "max_length must be at least min_length");
  require(zipf_exponent >= 0.0, "zipf_exponent must be non-negative");
}

const char* population_name(Population p) {
  switch (p) {
    case Population::Slow: return "slow";
    case Population::Multi: return "multi";
    case Population::Rapid: return "rapid";
  }
  return "?";
}

SynthSpec parse_synth_spec(std::istream& in, const std::string& source) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  SynthSpec spec;
  const std::map<std::string, std::function<void(const std::string&)>> fields = {
      {"num_users", [&](const std::string& v) { spec.num_users = parse_value<std::size_t>("num_users", v, source); }},
      {"num_items", [&](const std::string& v) { spec.num_items = parse_value<std::size_t>("num_items", v, source); }},
      {"genres", [&](const std::string& v) { spec.genres = parse_value<std::size_t>("genres", v, source); }},
      {"share_slow", [&](const std::string& v) { spec.share_slow = parse_value<double>("share_slow", v, source); }},
      {"share_multi", [&](const std::string& v) { spec.share_multi = parse_value<double>("share_multi", v, source); }},
      {"share_rapid", [&](const std::string& v) { spec.share_rapid = parse_value<double>("share_rapid", v, source); }},
      {"switch_slow", [&](const std::string& v) { spec.switch_slow = parse_value<double>("switch_slow", v, source); }},
      {"switch_multi", [&](const std::string& v) { spec.switch_multi = parse_value<double>("switch_multi", v, source); }},
      {"switch_rapid", [&](const std::string& v) { spec.switch_rapid = parse_value<double>("switch_rapid", v, source); }},
      {"min_length", [&](const std::string& v) { spec.min_length = parse_value<std::size_t>("min_length", v, source); }},
      {"max_length", [&](const std::string& v) { spec.max_length = parse_value<std::size_t>("max_length", v, source); }},
      {"zipf_exponent", [&](const std::string& v) { spec.zipf_exponent = parse_value<double>("zipf_exponent", v, source); }},
      {"seed", [&](const std::string& v) { spec.seed = parse_value<std::uint64_t>("seed", v, source); }},
  };
  auto apply = [&](const std::string& key, const std::string& value) {
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(source + ": unknown key '" + key + "'");
    it->second(value);
  };
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      apply(key, node.data());
    } else if (key == "synth") {
      for (const auto& [inner, leaf] : node) apply(inner, leaf.data());
    } else {
      throw ConfigError(source + ": unknown section [" + key + "]");
    }
  }
  spec.validate();
  return spec;
}

SynthSpec parse_synth_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read synthetic spec " + path.string());
  return parse_synth_spec(in, path.string());
}

std::string format_synth_spec(const SynthSpec& s) {
  std::ostringstream out;
  out.precision(17);
  out << "[synth]\n"
      << "num_users = " << s.num_users << "\nnum_items = " << s.num_items << "\ngenres = " << s.genres
      << "\nshare_slow = " << s.share_slow << "\nshare_multi = " << s.share_multi
      << "\nshare_rapid = " << s.share_rapid << "\nswitch_slow = " << s.switch_slow
      << "\nswitch_multi = " << s.switch_multi << "\nswitch_rapid = " << s.switch_rapid
      << "\nmin_length = " << s.min_length << "\nmax_length = " << s.max_length
      << "\nzipf_exponent = " << s.zipf_exponent << "\nseed = " << s.seed << "\n";
  return out.str();
}

std::vector<std::size_t> population_counts(const SynthSpec& spec) {
  const auto slow = static_cast<std::size_t>(std::floor(spec.share_slow * static_cast<double>(spec.num_users)));
  const auto multi = static_cast<std::size_t>(std::floor(spec.share_multi * static_cast<double>(spec.num_users)));
  return {slow, multi, spec.num_users - std::min(spec.num_users, slow + multi)};
}

InteractionLog synth_generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t g_count = spec.genres;

  // Item i belongs to genre i % G and has popularity rank i / G inside it.
  std::vector<std::vector<std::string>> genre_items(g_count);
  for (std::size_t i = 0; i < spec.num_items; ++i)
    genre_items[i % g_count].push_back("g" + padded(i % g_count, 2) + "-i" + padded(i / g_count, 4));
  std::vector<std::discrete_distribution<std::size_t>> popularity;
  for (const auto& items : genre_items) {
    std::vector<double> w(items.size());
    for (std::size_t r = 0; r < w.size(); ++r) w[r] = std::pow(static_cast<double>(r + 1), -spec.zipf_exponent);
    popularity.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> start_genre(0, g_count - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  InteractionLog log;
  const auto counts = population_counts(spec);
  const Population order[3] = {Population::Slow, Population::Multi, Population::Rapid};
  std::size_t serial = 0;
  for (int p = 0; p < 3; ++p) {
    for (std::size_t k = 0; k < counts[p]; ++k, ++serial) {
      const std::string user = std::string(population_name(order[p])) + "-" + padded(serial, 6);
      const std::size_t len = length(rng);
      std::size_t genre = start_genre(rng);
      const std::size_t home = genre;
      for (std::size_t step = 0; step < len; ++step) {
        std::size_t current = genre;
        switch (order[p]) {
          case Population::Slow:
            if (step > 0 && unit(rng) < spec.switch_slow) genre = (genre + 1) % g_count;
            current = genre;
            break;
          case Population::Multi:
            current = unit(rng) < spec.switch_multi ? (home + 1) % g_count : home;
            break;
          case Population::Rapid:
            if (step > 0 && unit(rng) < spec.switch_rapid) genre = (genre + 1) % g_count;
            current = genre;
            break;
        }
        const std::string& item = genre_items[current][popularity[current](rng)];
        log.records.push_back({user, item, kEpoch + static_cast<std::int64_t>(step) * kStepSeconds});
      }
    }
  }
  return log;
}

Population synth_population(const std::string& user_id) {
  for (Population p : {Population::Slow, Population::Multi, Population::Rapid}) {
    const std::string prefix = std::string(population_name(p)) + "-";
    if (user_id.rfind(prefix, 0) == 0) return p;
  }
  throw DataError("'" + user_id + "' is not a synthetic user id");
}

std::size_t synth_genre(const std::string& item_id) {
  if (item_id.size() < 4 || item_id[0] != 'g' || item_id.find('-') == std::string::npos)
    throw DataError("'" + item_id + "' is not a synthetic item id");
  return static_cast<std::size_t>(std::stoul(item_id.substr(1, item_id.find('-') - 1)));
}

}  // namespace muffin::data
