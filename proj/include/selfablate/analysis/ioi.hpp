#pragma once

// Indirect-object-identification prompt generation.
//
//   ABBA: "Then, A and B went to the PLACE. B gave a OBJECT to"  -> " A"
//   BABA: "Then, B and A went to the PLACE. B gave a OBJECT to"  -> " A"
//
// The corrupt prompt replaces the giver (second-clause B) with a third
// name C, which removes the signal that identifies the indirect object.
// A, B and C always have the same byte length, so clean and corrupt
// tokenize to aligned sequences under the byte tokenizer, and they start
// with distinct letters so the first answer byte separates them.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "selfablate/tensor.hpp"

namespace selfablate::analysis {

enum class IoiPattern { abba, baba };

inline std::string to_string(IoiPattern p) { return p == IoiPattern::abba ? "ABBA" : "BABA"; }

struct IoiPrompt {
  std::string clean;
  std::string corrupt;
  std::string answer;      // indirect object, with leading space
  std::string distractor;  // subject, with leading space
  IoiPattern pattern = IoiPattern::abba;

  bool operator==(const IoiPrompt&) const = default;
};

struct IoiPools {
  std::vector<std::string> names;
  std::vector<std::string> places;
  std::vector<std::string> objects;
};

inline IoiPools default_ioi_pools() {
  return {{"Tom", "Sam", "Max", "Ben", "Amy", "Zoe", "Kim", "Dan", "Eva", "Leo",
           "Lily", "Emma", "Jack", "Mike", "Sara", "Ryan", "Kate", "Noah", "Finn", "Gabe"},
          {"park", "school", "store", "beach", "garden", "forest", "lake", "zoo"},
          {"ball", "book", "toy", "cake", "kite", "flower", "hat", "apple"}};
}

/// Reads pools from a JSON file {"names":[...],"places":[...],"objects":[...]}.
inline IoiPools load_ioi_pools(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read IOI pool file '" + path + "'");
  const auto j = nlohmann::json::parse(in);
  return {j.at("names").get<std::vector<std::string>>(), j.at("places").get<std::vector<std::string>>(),
          j.at("objects").get<std::vector<std::string>>()};
}

inline IoiPrompt make_ioi_prompt(IoiPattern pattern, const std::string& io_name, const std::string& subject,
                                 const std::string& place, const std::string& object,
                                 const std::string& corrupt_subject) {
  const std::string first = pattern == IoiPattern::abba ? io_name + " and " + subject : subject + " and " + io_name;
  const std::string head = "Then, " + first + " went to the " + place + ". ";
  const std::string tail = " gave a " + object + " to";
  IoiPrompt p;
  p.clean = head + subject + tail;
  p.corrupt = head + corrupt_subject + tail;
  p.answer = " " + io_name;
  p.distractor = " " + subject;
  p.pattern = pattern;
  return p;
}

/// `n` prompts alternating ABBA / BABA, deterministic in `seed`.
inline std::vector<IoiPrompt> generate_ioi(std::size_t n, std::uint64_t seed, const IoiPools& pools) {
  if (pools.places.empty() || pools.objects.empty()) throw Error("IOI place and object pools must be nonempty");
  // Names usable together: same length, unique first letter within the group.
  std::map<std::size_t, std::vector<std::string>> by_length;
  std::set<std::string> seen;
  for (const auto& name : pools.names) {
    if (name.empty() || !seen.insert(name).second) continue;
    auto& group = by_length[name.size()];
    const bool clash = std::any_of(group.begin(), group.end(), [&](const std::string& o) { return o[0] == name[0]; });
    if (!clash) group.push_back(name);
  }
  std::vector<const std::vector<std::string>*> groups;
  for (const auto& [_, g] : by_length) {
    if (g.size() >= 3) groups.push_back(&g);
  }
  if (groups.empty()) {
    throw Error("IOI name pool needs at least 3 names of equal length with distinct first letters");
  }
  std::mt19937_64 rng(seed);
  auto pick = [&rng](std::size_t size) {
    return static_cast<std::size_t>(std::uniform_int_distribution<std::uint64_t>(0, size - 1)(rng));
  };
  std::vector<IoiPrompt> prompts;
  prompts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& group = *groups[pick(groups.size())];
    const std::size_t a = pick(group.size());
    std::size_t b = pick(group.size() - 1);
    if (b >= a) ++b;
    std::size_t c = pick(group.size() - 2);
    for (std::size_t taken : {std::min(a, b), std::max(a, b)}) {
      if (c >= taken) ++c;
    }
    const auto& place = pools.places[pick(pools.places.size())];
    const auto& object = pools.objects[pick(pools.objects.size())];
    prompts.push_back(make_ioi_prompt(i % 2 == 0 ? IoiPattern::abba : IoiPattern::baba, group[a], group[b], place,
                                      object, group[c]));
  }
  return prompts;
}

inline nlohmann::json to_json(const IoiPrompt& p) {
  return {{"clean", p.clean}, {"corrupt", p.corrupt}, {"answer", p.answer},
          {"distractor", p.distractor}, {"template", to_string(p.pattern)}};
}

inline IoiPrompt ioi_prompt_from_json(const nlohmann::json& j) {
  IoiPrompt p;
  p.clean = j.at("clean").get<std::string>();
  p.corrupt = j.at("corrupt").get<std::string>();
  p.answer = j.at("answer").get<std::string>();
  p.distractor = j.at("distractor").get<std::string>();
  const auto t = j.at("template").get<std::string>();
  if (t != "ABBA" && t != "BABA") throw Error("unknown IOI template '" + t + "'");
  p.pattern = t == "ABBA" ? IoiPattern::abba : IoiPattern::baba;
  return p;
}

inline std::string ioi_to_jsonl(const std::vector<IoiPrompt>& prompts) {
  std::string out;
  for (const auto& p : prompts) out += to_json(p).dump() + "\n";
  return out;
}

inline std::vector<IoiPrompt> load_ioi_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read prompt file '" + path + "'");
  std::vector<IoiPrompt> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(ioi_prompt_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed prompt at " + path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace selfablate::analysis
