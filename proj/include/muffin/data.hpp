#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "muffin/batch.hpp"

namespace muffin::data {

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

// Records in input order.
struct InteractionLog {
  std::vector<Interaction> records;
};

// Tab-separated `user item timestamp [rating]`; a header line is detected by
// a non-integer timestamp field. Blank lines are skipped.
InteractionLog read_log(const std::filesystem::path& path);
InteractionLog parse_log(std::istream& in, const std::string& source);
void write_log(const InteractionLog& log, const std::filesystem::path& path);

// Drops exact repeats of (user, item, timestamp), keeping first occurrences.
InteractionLog deduplicate(const InteractionLog& log);

// Alternately removes users then items with fewer than min_count records
// until nothing changes. Throws DataError when nothing survives.
InteractionLog five_core(const InteractionLog& log, std::size_t min_count = 5);

enum class Split { Train, Valid, Test };
Split parse_split(const std::string& name);
const char* split_name(Split split);

// Chronological per-user item sequences with dense ids. Item index 0 is the
// padding id; item_ids[i - 1] names item i.
struct SequenceDataset {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::vector<std::vector<std::size_t>> sequences;  // per user, length >= 3

  std::size_t num_users() const noexcept { return sequences.size(); }
  std::size_t num_items() const noexcept { return item_ids.size(); }
  std::size_t num_interactions() const;

  // Leave-one-out views.
  std::span<const std::size_t> train_input(std::size_t user) const;
  std::size_t valid_target(std::size_t user) const;
  std::size_t test_target(std::size_t user) const;

  // FNV-1a over ids and sequences.
  std::uint64_t hash() const;
};

// Sorts each user's records by timestamp (stable, so ties keep input order)
// and drops users with fewer than three records; dropped users are reported
// through warnings when given.
SequenceDataset build_sequences(const InteractionLog& log,
                                std::vector<std::string>* warnings = nullptr);

// One prediction task: the context (most recent last) and the item to predict.
struct Example {
  std::size_t user = 0;
  std::span<const std::size_t> context;
  std::size_t target = 0;
};

// Train: the train input predicts its own last item; with all_prefixes every
// prefix of the train input of length >= 1 predicts its successor.
// Valid: the train input predicts the validation target.
// Test: train input plus validation target predict the test target.
std::vector<Example> examples(const SequenceDataset& ds, Split split, bool all_prefixes = false);

// Left-pads or truncates (keeping the most recent n) each context.
SequenceBatch make_batch(std::span<const Example> rows, std::size_t n);

// Train examples are shuffled with seed; valid and test keep user order.
std::vector<SequenceBatch> make_batches(const SequenceDataset& ds, std::size_t n,
                                        std::size_t batch_size, std::uint64_t seed, Split split,
                                        bool all_prefixes = false);

struct DatasetStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double avg_length = 0.0;
  double sparsity = 0.0;  // 1 - interactions / (users * items)
};
DatasetStats dataset_stats(const SequenceDataset& ds);
std::string format_stats(const DatasetStats& stats);

void save_dataset(const SequenceDataset& ds, const std::filesystem::path& path);
SequenceDataset load_dataset(const std::filesystem::path& path);

// Synthetic log with three user populations over genre-partitioned items.
// Genre changes always move to the cyclically next genre.
struct SynthSpec {
  std::size_t num_users = 2000;
  std::size_t num_items = 1000;
  std::size_t genres = 10;
  double share_slow = 1.0 / 3.0;
  double share_multi = 1.0 / 3.0;
  double share_rapid = 1.0 / 3.0;
  double switch_slow = 0.03;   // per-step probability of moving on
  double switch_multi = 0.3;   // per-step probability of a one-step excursion
  double switch_rapid = 0.7;
  std::size_t min_length = 20;
  std::size_t max_length = 80;
  double zipf_exponent = 1.0;  // popularity skew inside a genre
  std::uint64_t seed = 7;

  void validate() const;
};

enum class Population { Slow, Multi, Rapid };
const char* population_name(Population p);

SynthSpec parse_synth_spec(const std::filesystem::path& path);
SynthSpec parse_synth_spec(std::istream& in, const std::string& source);
std::string format_synth_spec(const SynthSpec& spec);

// Per-population user counts in generation order.
std::vector<std::size_t> population_counts(const SynthSpec& spec);
InteractionLog synth_generate(const SynthSpec& spec);

// Population and genre encoded in synthetic user and item ids.
Population synth_population(const std::string& user_id);
std::size_t synth_genre(const std::string& item_id);

}  // namespace muffin::data
