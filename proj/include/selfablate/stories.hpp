#pragma once

// Deterministic generator for small children's-story style text, used as a
// stand-in corpus at desk scale. Stories reuse the IOI name/place/object
// pools and include giving sentences, so a trained model has seen the
// indirect-object pattern.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "selfablate/analysis/ioi.hpp"

namespace selfablate {

inline std::vector<std::string> synthesize_stories(std::size_t target_bytes, std::uint64_t seed,
                                                   const analysis::IoiPools& pools = analysis::default_ioi_pools()) {
  static const std::vector<std::string> kAnimals = {"cat", "dog", "bird", "bunny", "frog", "bear", "fox", "duck"};
  static const std::vector<std::string> kAdjectives = {"little", "happy", "small", "brave", "kind", "silly", "shy", "big"};
  static const std::vector<std::string> kFeelings = {"happy", "sad", "excited", "tired", "proud", "scared", "glad"};
  static const std::vector<std::string> kWeather = {"sunny", "rainy", "windy", "warm", "cold"};

  std::mt19937_64 rng(seed);
  auto pick = [&rng](const std::vector<std::string>& v) -> const std::string& {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto coin = [&rng](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };

  std::vector<std::string> docs;
  std::size_t bytes = 0;
  while (bytes < target_bytes) {
    const std::string a = pick(pools.names);
    std::string b = pick(pools.names);
    while (b == a) b = pick(pools.names);
    const std::string& place = pick(pools.places);
    const std::string& object = pick(pools.objects);
    std::string s;
    switch (coin(3)) {
      case 0: s += "Once upon a time, there was a " + pick(kAdjectives) + " " + pick(kAnimals) + " named " + a + ". "; break;
      case 1: s += "One " + pick(kWeather) + " day, " + a + " wanted to go to the " + place + ". "; break;
      default: s += a + " had a friend named " + b + ". "; break;
    }
    const int sentences = 3 + coin(4);
    for (int i = 0; i < sentences; ++i) {
      switch (coin(8)) {
        case 0: s += "Then, " + a + " and " + b + " went to the " + place + ". " + b + " gave a " + object + " to " + a + ". "; break;
        case 1: s += "Then, " + b + " and " + a + " went to the " + place + ". " + b + " gave a " + object + " to " + a + ". "; break;
        case 2: s += a + " felt very " + pick(kFeelings) + ". "; break;
        case 3: s += "They played with the " + object + " all day. "; break;
        case 4: s += a + " and " + b + " saw a " + pick(kAdjectives) + " " + pick(kAnimals) + " at the " + place + ". "; break;
        case 5: s += b + " said, \"I like your " + object + ", " + a + "!\" "; break;
        case 6: s += "When " + a + " and " + b + " got home, " + a + " gave the " + object + " to " + b + ". "; break;
        default: s += "The " + pick(kAnimals) + " was " + pick(kFeelings) + " too. "; break;
      }
    }
    s += coin(2) ? "The end." : a + " and " + b + " were happy.";
    bytes += s.size() + 2;
    docs.push_back(std::move(s));
  }
  return docs;
}

inline std::string join_documents(const std::vector<std::string>& docs) {
  std::string out;
  for (const auto& d : docs) out += d + "\n\n";
  return out;
}

}  // namespace selfablate
