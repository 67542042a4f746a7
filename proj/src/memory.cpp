#include "resd/memory.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "resd/error.hpp"

namespace resd::mem {

const char* to_string(TagLabel label) {
  switch (label) {
    case TagLabel::kHelpful: return "helpful";
    case TagLabel::kHarmful: return "harmful";
    case TagLabel::kNeutral: return "neutral";
  }
  return "?";
}

const char* to_string(EntryStatus status) {
  switch (status) {
    case EntryStatus::kUnused: return "Unused";
    case EntryStatus::kHarmful: return "Harmful";
    case EntryStatus::kHelpful: return "Helpful";
  }
  return "?";
}

const char* to_string(ConciseMethod method) {
  return method == ConciseMethod::kPrioritized ? "prioritized" : "staleness";
}

const char* to_string(ConciseTrigger trigger) {
  switch (trigger) {
    case ConciseTrigger::kNone: return "none";
    case ConciseTrigger::kFrequency: return "frequency";
    case ConciseTrigger::kLimit: return "limit";
  }
  return "?";
}

TagLabel parse_tag_label(const std::string& s) {
  if (s == "helpful") return TagLabel::kHelpful;
  if (s == "harmful") return TagLabel::kHarmful;
  if (s == "neutral") return TagLabel::kNeutral;
  throw Error(ErrorCode::kFormat, "unknown tag label: " + s);
}

ConciseMethod parse_concise_method(const std::string& s) {
  if (s == "prioritized") return ConciseMethod::kPrioritized;
  if (s == "staleness") return ConciseMethod::kStaleness;
  throw Error(ErrorCode::kConfig, "unknown concise method '" + s + "' (expected prioritized or staleness)");
}

const PlaybookEntry* Playbook::find(std::uint64_t id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

void apply_tags(Playbook& playbook, std::span<const Tag> tags, Step step) {
  for (const auto& t : tags) {
    if (!playbook.find(t.entry_id)) {
      throw Error(ErrorCode::kUnknownId, "tag for unknown playbook entry " + std::to_string(t.entry_id));
    }
  }
  for (const auto& t : tags) {
    for (auto& e : playbook.entries) {
      if (e.id != t.entry_id) continue;
      if (t.label == TagLabel::kHelpful) ++e.helpful;
      if (t.label == TagLabel::kHarmful) ++e.harmful;
      e.last_tagged_step = step;
    }
  }
}

EntryStatus categorize(const PlaybookEntry& entry) {
  if (entry.helpful + entry.harmful == 0) return EntryStatus::kUnused;
  if (entry.harmful >= entry.helpful && entry.harmful > 0) return EntryStatus::kHarmful;
  return EntryStatus::kHelpful;
}

ConciseTrigger concise_trigger(const Playbook& playbook, Step /*step*/, Step steps_since_last_concise) {
  if (playbook.entries.size() > playbook.m_max) return ConciseTrigger::kLimit;
  if (steps_since_last_concise >= static_cast<Step>(playbook.frequency)) return ConciseTrigger::kFrequency;
  return ConciseTrigger::kNone;
}

void concise_prioritized(Playbook& playbook, Rng& rng, bool enforce_budget) {
  auto& es = playbook.entries;
  std::erase_if(es, [](const PlaybookEntry& e) { return categorize(e) != EntryStatus::kHelpful; });
  if (!enforce_budget) return;
  while (es.size() > playbook.m_max) {
    es.erase(es.begin() + static_cast<std::ptrdiff_t>(rng.below(es.size())));
  }
}

namespace {

Step recency(const PlaybookEntry& e) { return e.last_tagged_step.value_or(e.created_step); }

}  // namespace

void concise_staleness(Playbook& playbook, Step step, bool enforce_budget) {
  auto& es = playbook.entries;
  std::erase_if(es, [&](const PlaybookEntry& e) {
    const auto status = categorize(e);
    return status == EntryStatus::kHarmful ||
           (status == EntryStatus::kUnused && step - e.created_step > 1);
  });
  if (!enforce_budget || es.size() <= playbook.m_max) return;
  std::vector<std::size_t> order(es.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return recency(es[a]) < recency(es[b]) || (recency(es[a]) == recency(es[b]) && es[a].id < es[b].id);
  });
  std::set<std::size_t> evict(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(es.size() - playbook.m_max));
  std::vector<PlaybookEntry> kept;
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (!evict.contains(i)) kept.push_back(std::move(es[i]));
  }
  es = std::move(kept);
}

std::size_t concise(Playbook& playbook, ConciseTrigger trigger, Step step, Rng& rng) {
  if (trigger == ConciseTrigger::kNone) return 0;
  const std::size_t before = playbook.entries.size();
  const bool enforce = trigger == ConciseTrigger::kLimit;
  if (playbook.method == ConciseMethod::kPrioritized) {
    concise_prioritized(playbook, rng, enforce);
  } else {
    concise_staleness(playbook, step, enforce);
  }
  return before - playbook.entries.size();
}

std::string normalize_text(const std::string& text) {
  std::string out;
  bool space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

std::size_t add_entries(Playbook& playbook, std::span<const Candidate> candidates, Step step) {
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& e : playbook.entries) seen.insert({e.category, normalize_text(e.text)});
  std::size_t added = 0;
  for (const auto& c : candidates) {
    if (c.text.empty() || c.category.empty()) continue;
    if (!seen.insert({c.category, normalize_text(c.text)}).second) continue;
    PlaybookEntry e;
    e.id = playbook.next_id++;
    e.text = c.text;
    e.category = c.category;
    e.created_step = step;
    playbook.entries.push_back(std::move(e));
    ++added;
  }
  return added;
}

std::string render_playbook(const Playbook& playbook, std::size_t char_budget) {
  std::vector<const PlaybookEntry*> order;
  for (const auto& e : playbook.entries) order.push_back(&e);
  std::stable_sort(order.begin(), order.end(), [](const PlaybookEntry* a, const PlaybookEntry* b) {
    return recency(*a) > recency(*b) || (recency(*a) == recency(*b) && a->id < b->id);
  });
  std::string out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::string line = std::to_string(i + 1) + ". " + order[i]->text + "\n";
    if (out.size() + line.size() > char_budget) break;
    out += line;
  }
  return out;
}

void SolutionBuffer::put(const std::string& prompt_key, Trajectory trajectory) {
  solutions_[prompt_key] = std::move(trajectory);
}

std::optional<Trajectory> SolutionBuffer::get(const std::string& prompt_key) const {
  auto it = solutions_.find(prompt_key);
  if (it == solutions_.end()) return std::nullopt;
  return it->second;
}

namespace {

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else out += c;
  }
  return out;
}

std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[++i];
      out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
    } else {
      out += s[i];
    }
  }
  return out;
}

[[noreturn]] void bad_line(const char* what, int line_no, const std::string& why) {
  throw Error(ErrorCode::kFormat, std::string(what) + " line " + std::to_string(line_no) + ": " + why);
}

}  // namespace

void write_playbook(std::ostream& out, const Playbook& p) {
  out << "resd-playbook 1\n"
      << "m_max " << p.m_max << '\n'
      << "method " << to_string(p.method) << '\n'
      << "frequency " << p.frequency << '\n'
      << "next_id " << p.next_id << '\n';
  for (const auto& e : p.entries) {
    out << "entry " << e.id << ' ' << e.category << ' ' << e.helpful << ' ' << e.harmful << ' ';
    if (e.last_tagged_step) out << *e.last_tagged_step;
    else out << '-';
    out << ' ' << e.created_step << ' ' << escape(e.text) << '\n';
  }
}

Playbook read_playbook(std::istream& in) {
  Playbook p;
  std::string line;
  int line_no = 1;
  if (!std::getline(in, line) || line != "resd-playbook 1") bad_line("playbook", 1, "missing 'resd-playbook 1' header");
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    try {
      if (key == "m_max") {
        ls >> p.m_max;
      } else if (key == "method") {
        std::string m;
        ls >> m;
        p.method = parse_concise_method(m);
      } else if (key == "frequency") {
        ls >> p.frequency;
      } else if (key == "next_id") {
        ls >> p.next_id;
      } else if (key == "entry") {
        PlaybookEntry e;
        std::string last;
        ls >> e.id >> e.category >> e.helpful >> e.harmful >> last >> e.created_step;
        if (!ls) bad_line("playbook", line_no, "malformed entry record");
        if (last != "-") e.last_tagged_step = std::stoll(last);
        std::string text;
        std::getline(ls, text);
        if (!text.empty() && text[0] == ' ') text.erase(0, 1);
        e.text = unescape(text);
        if (p.find(e.id)) bad_line("playbook", line_no, "duplicate entry id");
        p.next_id = std::max(p.next_id, e.id + 1);
        p.entries.push_back(std::move(e));
        continue;
      } else {
        bad_line("playbook", line_no, "unknown record '" + key + "'");
      }
    } catch (const Error& err) {
      if (err.code() == ErrorCode::kFormat) throw;
      bad_line("playbook", line_no, err.what());
    } catch (const std::logic_error&) {
      bad_line("playbook", line_no, "bad number");
    }
    if (!ls) bad_line("playbook", line_no, "malformed value for " + key);
  }
  return p;
}

void save_playbook(const std::string& path, const Playbook& playbook) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for writing: " + path);
  write_playbook(out, playbook);
}

Playbook load_playbook(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open: " + path);
  return read_playbook(in);
}

void write_buffer(std::ostream& out, const SolutionBuffer& buffer) {
  out << "resd-buffer 1\n";
  for (const auto& [key, traj] : buffer.solutions()) {
    out << "solution " << key << ' ' << traj.response.size();
    for (TokenId t : traj.response) out << ' ' << t;
    out << "\nprogram " << escape(traj.program_text) << '\n';
  }
}

SolutionBuffer read_buffer(std::istream& in) {
  SolutionBuffer buffer;
  std::string line;
  int line_no = 1;
  if (!std::getline(in, line) || line != "resd-buffer 1") bad_line("buffer", 1, "missing 'resd-buffer 1' header");
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, key;
    std::size_t n = 0;
    ls >> kind >> key >> n;
    if (kind != "solution" || !ls) bad_line("buffer", line_no, "expected 'solution <key> <n> ids...'");
    Trajectory traj;
    for (std::size_t i = 0; i < n; ++i) {
      TokenId t;
      if (!(ls >> t)) bad_line("buffer", line_no, "truncated token list");
      traj.response.push_back(t);
    }
    if (!std::getline(in, line) || line.rfind("program ", 0) != 0) bad_line("buffer", line_no + 1, "expected 'program <text>'");
    ++line_no;
    traj.program_text = unescape(line.substr(8));
    buffer.put(key, std::move(traj));
  }
  return buffer;
}

}  // namespace resd::mem
