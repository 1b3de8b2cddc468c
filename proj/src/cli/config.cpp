#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "muffin/cli.hpp"
#include "muffin/error.hpp"

namespace muffin::cli {

namespace {

template <typename T>
T parse_value(const std::string& key, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  T value{};
  in >> value;
  if (!in || !(in >> std::ws).eof())
    throw ConfigError(source + ": value '" + text + "' for " + key + " is not valid");
  if constexpr (std::is_unsigned_v<T>)
    if (text.find('-') != std::string::npos) throw ConfigError(source + ": " + key + " must be non-negative");
  return value;
}

bool parse_bool(const std::string& key, const std::string& text, const std::string& source) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(source + ": value '" + text + "' for " + key + " is not a boolean");
}

template <typename T>
std::vector<T> parse_numbers(const std::string& key, const std::string& text, const std::string& source) {
  std::vector<T> out;
  for (const std::string& item : parse_list(text)) out.push_back(parse_value<T>(key, item, source));
  if (out.empty()) throw ConfigError(source + ": " + key + " needs at least one value");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::ostringstream out;
  for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"data",
       {
           {"dataset", [](RunConfig& c, const std::string& v, const std::string&) { c.dataset = v; }},
           {"profile", [](RunConfig& c, const std::string& v, const std::string&) { c.profile = v; }},
           {"min_core",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.min_core = parse_value<std::size_t>("min_core", v, s); }},
       }},
      {"model",
       {
           {"d", [](RunConfig& c, const std::string& v, const std::string& s) { c.model.d = parse_value<std::size_t>("d", v, s); }},
           {"n", [](RunConfig& c, const std::string& v, const std::string& s) { c.model.n = parse_value<std::size_t>("n", v, s); }},
           {"layers",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.model.layers = parse_value<std::size_t>("layers", v, s); }},
           {"bands",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.model.bands = parse_value<std::size_t>("bands", v, s); }},
           {"kernel",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.model.kernel = parse_value<std::size_t>("kernel", v, s); }},
           {"dropout",
            [](RunConfig& c, const std::string& v, const std::string& s) {
              c.model.dropout = parse_value<double>("dropout", v, s);
              c.dropout_explicit = true;
            }},
           {"use_uaf", [](RunConfig& c, const std::string& v, const std::string& s) { c.model.use_uaf = parse_bool("use_uaf", v, s); }},
           {"use_gfm", [](RunConfig& c, const std::string& v, const std::string& s) { c.model.use_gfm = parse_bool("use_gfm", v, s); }},
           {"use_lfm", [](RunConfig& c, const std::string& v, const std::string& s) { c.model.use_lfm = parse_bool("use_lfm", v, s); }},
           {"uaf_as_mlp",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.model.uaf_as_mlp = parse_bool("uaf_as_mlp", v, s); }},
           {"uaf_per_layer",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.model.uaf_per_layer = parse_bool("uaf_per_layer", v, s); }},
       }},
      {"train",
       {
           {"lr", [](RunConfig& c, const std::string& v, const std::string& s) { c.train.lr = parse_value<double>("lr", v, s); }},
           {"batch_size",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.batch_size = parse_value<std::size_t>("batch_size", v, s); }},
           {"alpha", [](RunConfig& c, const std::string& v, const std::string& s) { c.train.alpha = parse_value<double>("alpha", v, s); }},
           {"beta", [](RunConfig& c, const std::string& v, const std::string& s) { c.train.beta = parse_value<double>("beta", v, s); }},
           {"max_epochs",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.max_epochs = parse_value<std::size_t>("max_epochs", v, s); }},
           {"patience",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.patience = parse_value<std::size_t>("patience", v, s); }},
           {"seeds",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.seeds = parse_numbers<std::uint64_t>("seeds", v, s); }},
           {"adam_beta1",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.adam_beta1 = parse_value<double>("adam_beta1", v, s); }},
           {"adam_beta2",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.adam_beta2 = parse_value<double>("adam_beta2", v, s); }},
           {"adam_eps",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.adam_eps = parse_value<double>("adam_eps", v, s); }},
           {"clip_norm",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.clip_norm = parse_value<double>("clip_norm", v, s); }},
           {"all_prefixes",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.all_prefixes = parse_bool("all_prefixes", v, s); }},
           {"threads",
            [](RunConfig& c, const std::string& v, const std::string& s) { c.train.threads = parse_value<std::size_t>("threads", v, s); }},
       }},
      {"eval",
       {
           {"ks", [](RunConfig& c, const std::string& v, const std::string& s) { c.ks = parse_numbers<std::size_t>("ks", v, s); }},
       }},
      {"run",
       {
           {"output", [](RunConfig& c, const std::string& v, const std::string&) { c.output = v; }},
       }},
  };
  return table;
}

}  // namespace

std::vector<std::string> parse_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    const auto last = item.find_last_not_of(" \t");
    out.push_back(item.substr(first, last - first + 1));
  }
  return out;
}

double profile_dropout(const std::string& profile) { return profile == "ml-1m" ? 0.1 : 0.4; }

void RunConfig::validate() const {
  if (dataset.empty()) throw ConfigError("[data] dataset is required");
  if (min_core < 1) throw ConfigError("min_core must be at least 1");
  model::ModelConfig probe = model;
  probe.num_items = std::max<std::size_t>(probe.num_items, 1);
  probe.validate();
  train.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (ks.empty()) throw ConfigError("at least one cutoff K is required");
  for (std::size_t k : ks)
    if (k < 1) throw ConfigError("cutoff K must be at least 1");
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  RunConfig config;
  for (const auto& [section, node] : tree) {
    const auto it = schema().find(section);
    if (node.empty() || it == schema().end())
      throw ConfigError(source + ": unknown section [" + section + "]");
    for (const auto& [key, leaf] : node) {
      const auto setter = it->second.find(key);
      if (setter == it->second.end()) throw ConfigError(source + ": unknown key '" + key + "' in [" + section + "]");
      setter->second(config, leaf.data(), source);
    }
  }
  if (!config.dropout_explicit) config.model.dropout = profile_dropout(config.profile);
  config.train.seed = config.seeds.front();
  config.validate();
  return config;
}

RunConfig parse_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  RunConfig config = parse_run_config(in, path.string());
  // Relative paths are taken from the config file's directory.
  const auto base = path.parent_path();
  if (config.dataset.is_relative()) config.dataset = base / config.dataset;
  if (config.output.is_relative()) config.output = base / config.output;
  return config;
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream out;
  out.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  out << "[data]\n"
      << "dataset = " << c.dataset.string() << "\nprofile = " << c.profile << "\nmin_core = " << c.min_core << "\n\n"
      << "[model]\n"
      << "d = " << c.model.d << "\nn = " << c.model.n << "\nlayers = " << c.model.layers << "\nbands = " << c.model.bands
      << "\nkernel = " << c.model.kernel << "\ndropout = " << c.model.dropout << "\nuse_uaf = " << b(c.model.use_uaf)
      << "\nuse_gfm = " << b(c.model.use_gfm) << "\nuse_lfm = " << b(c.model.use_lfm)
      << "\nuaf_as_mlp = " << b(c.model.uaf_as_mlp) << "\nuaf_per_layer = " << b(c.model.uaf_per_layer) << "\n\n"
      << "[train]\n"
      << "lr = " << c.train.lr << "\nbatch_size = " << c.train.batch_size << "\nalpha = " << c.train.alpha
      << "\nbeta = " << c.train.beta << "\nmax_epochs = " << c.train.max_epochs << "\npatience = " << c.train.patience
      << "\nseeds = " << join(c.seeds) << "\nadam_beta1 = " << c.train.adam_beta1 << "\nadam_beta2 = " << c.train.adam_beta2
      << "\nadam_eps = " << c.train.adam_eps << "\nclip_norm = " << c.train.clip_norm
      << "\nall_prefixes = " << b(c.train.all_prefixes) << "\nthreads = " << c.train.threads << "\n\n"
      << "[eval]\nks = " << join(c.ks) << "\n\n"
      << "[run]\noutput = " << c.output.string() << "\n";
  return out.str();
}

data::SequenceDataset load_any_dataset(const std::filesystem::path& path, std::size_t min_core, std::ostream* log) {
  char magic[8] = {};
  {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot read dataset " + path.string());
    probe.read(magic, sizeof magic);
  }
  if (std::memcmp(magic, "MUFFDSET", sizeof magic) == 0) return data::load_dataset(path);
  const data::InteractionLog raw = data::deduplicate(data::read_log(path));
  const data::InteractionLog core = min_core > 1 ? data::five_core(raw, min_core) : raw;
  std::vector<std::string> warnings;
  data::SequenceDataset ds = data::build_sequences(core, &warnings);
  if (log)
    for (const auto& w : warnings) *log << "warning: " << w << '\n';
  return ds;
}

}  // namespace muffin::cli
