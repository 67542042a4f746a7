#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resd/rng.hpp"
#include "resd/vocab.hpp"

namespace resd::mem {

using Step = std::int64_t;

enum class TagLabel { kHelpful, kHarmful, kNeutral };
enum class EntryStatus { kUnused, kHarmful, kHelpful };
enum class ConciseMethod { kPrioritized, kStaleness };
enum class ConciseTrigger { kNone, kFrequency, kLimit };

const char* to_string(TagLabel label);
const char* to_string(EntryStatus status);
const char* to_string(ConciseMethod method);
const char* to_string(ConciseTrigger trigger);
TagLabel parse_tag_label(const std::string& s);
ConciseMethod parse_concise_method(const std::string& s);

struct PlaybookEntry {
  std::uint64_t id = 0;
  std::string text;
  std::string category;
  std::uint64_t helpful = 0;  // h
  std::uint64_t harmful = 0;  // d
  std::optional<Step> last_tagged_step;
  Step created_step = 0;

  bool operator==(const PlaybookEntry&) const = default;
};

struct Tag {
  std::uint64_t entry_id = 0;
  TagLabel label = TagLabel::kNeutral;

  bool operator==(const Tag&) const = default;
};

struct Candidate {
  std::string text;
  std::string category;
};

struct Playbook {
  std::vector<PlaybookEntry> entries;
  std::size_t m_max = 200;
  ConciseMethod method = ConciseMethod::kPrioritized;
  std::size_t frequency = 4;  // F
  std::uint64_t next_id = 1;

  const PlaybookEntry* find(std::uint64_t id) const;
  std::size_t size() const { return entries.size(); }
  bool operator==(const Playbook&) const = default;
};

// Helpful bumps h, harmful bumps d; every label (neutral included) moves
// last_tagged_step. Unknown ids throw before anything is modified.
void apply_tags(Playbook& playbook, std::span<const Tag> tags, Step step);

EntryStatus categorize(const PlaybookEntry& entry);

// Limit is checked first.
ConciseTrigger concise_trigger(const Playbook& playbook, Step step, Step steps_since_last_concise);

// Drops Unused and Harmful entries; with enforce_budget, then drops uniformly
// random Helpful entries down to m_max.
void concise_prioritized(Playbook& playbook, Rng& rng, bool enforce_budget);

// Drops Harmful entries and Unused entries created more than one
// context-update step ago; with enforce_budget, then evicts the least
// recently tagged (untagged entries count from created_step) down to m_max.
void concise_staleness(Playbook& playbook, Step step, bool enforce_budget);

// Runs the configured method for a trigger; kNone is a no-op. Returns the
// number of removed entries.
std::size_t concise(Playbook& playbook, ConciseTrigger trigger, Step step, Rng& rng);

// Dedup key is (category, case-folded whitespace-normalized text), checked
// against the playbook and earlier candidates of the same call.
std::size_t add_entries(Playbook& playbook, std::span<const Candidate> candidates, Step step);

std::string normalize_text(const std::string& text);

// Numbered list, most recently tagged first, cut at entry boundaries so the
// result never exceeds char_budget.
std::string render_playbook(const Playbook& playbook, std::size_t char_budget);

struct Trajectory {
  std::vector<TokenId> response;
  std::string program_text;

  bool operator==(const Trajectory&) const = default;
};

class SolutionBuffer {
 public:
  void put(const std::string& prompt_key, Trajectory trajectory);
  std::optional<Trajectory> get(const std::string& prompt_key) const;
  std::size_t size() const { return solutions_.size(); }
  const std::map<std::string, Trajectory>& solutions() const { return solutions_; }

  bool operator==(const SolutionBuffer&) const = default;

 private:
  std::map<std::string, Trajectory> solutions_;
};

// Snapshots. Playbook: "resd-playbook 1", optional setting lines, then one
// "entry <id> <category> <h> <d> <last_tagged|-> <created> <text>" line per
// entry. Errors carry the offending line number.
void write_playbook(std::ostream& out, const Playbook& playbook);
Playbook read_playbook(std::istream& in);
void save_playbook(const std::string& path, const Playbook& playbook);
Playbook load_playbook(const std::string& path);

void write_buffer(std::ostream& out, const SolutionBuffer& buffer);
SolutionBuffer read_buffer(std::istream& in);

}  // namespace resd::mem
