#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace mim::acceptance {

// Generated English-like paragraphs: a small grammar over a few hundred words
// with Zipf-weighted choices and a recurring protagonist per paragraph.
// Paragraphs are separated by blank lines.
class ProseGenerator {
 public:
  explicit ProseGenerator(std::uint64_t seed) : rng_(seed) {}

  std::string corpus(std::size_t bytes) {
    std::string out;
    while (out.size() < bytes) {
      out += paragraph();
      out += "\n\n";
    }
    return out;
  }

  std::string paragraph() {
    hero_ = pick(kNames);
    place_ = pick(kPlaces);
    std::string p;
    const int sentences = std::uniform_int_distribution<int>(2, 7)(rng_);
    for (int i = 0; i < sentences; ++i) {
      if (i > 0) p += ' ';
      p += sentence();
    }
    return p;
  }

 private:
  template <std::size_t N>
  std::string pick(const char* const (&words)[N]) {
    // Zipf weights 1/(rank+1).
    std::vector<double> w(N);
    for (std::size_t i = 0; i < N; ++i) w[i] = 1.0 / static_cast<double>(i + 1);
    return words[std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng_)];
  }

  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }

  std::string noun_phrase() {
    std::string np = "the ";
    if (coin(0.5)) np += pick(kAdjectives) + " ";
    return np + pick(kNouns);
  }

  std::string subject() { return coin(0.6) ? hero_ : (coin(0.5) ? pick(kNames) : capitalize(noun_phrase())); }

  static std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
    return s;
  }

  std::string sentence() {
    switch (std::uniform_int_distribution<int>(0, 5)(rng_)) {
      case 0:
        return subject() + " " + pick(kVerbs) + " " + noun_phrase() + " " + pick(kPrepositions) + " the " + place_ + ".";
      case 1:
        return capitalize(pick(kTimes)) + ", " + subject() + " " + pick(kVerbs) + " " + noun_phrase() + ".";
      case 2:
        return subject() + " was " + pick(kAdjectives) + " and " + pick(kAdjectives) + ".";
      case 3:
        return "\"" + capitalize(noun_phrase()) + " is " + pick(kAdjectives) + ",\" said " + hero_ + ".";
      case 4:
        return subject() + " " + pick(kVerbs) + " " + noun_phrase() + " because " + pick(kNames) + " " +
               pick(kVerbs) + " " + noun_phrase() + ".";
      default:
        return "There was " + std::string(coin(0.5) ? "a " : "one ") + pick(kAdjectives) + " " + pick(kNouns) + " " +
               pick(kPrepositions) + " the " + place_ + ".";
    }
  }

  static constexpr const char* kNames[] = {"Anna", "Tom",   "Mira",  "Jonas", "Lena",  "Oskar", "Ruth",
                                           "Ivan", "Clara", "Pablo", "Nora",  "Felix", "Greta", "Hugo"};
  static constexpr const char* kPlaces[] = {"river",  "village", "market", "forest", "harbor", "garden",
                                            "bridge", "library", "hill",   "school", "bakery", "station"};
  static constexpr const char* kNouns[] = {"dog",    "letter", "boat",  "key",    "bread",  "lamp",   "horse",
                                           "window", "song",   "map",   "coat",   "basket", "bell",   "garden",
                                           "stone",  "book",   "clock", "candle", "wagon",  "feather"};
  static constexpr const char* kAdjectives[] = {"old",   "small", "quiet",  "bright", "heavy", "green", "cold",
                                                "happy", "tired", "strange", "warm",  "empty", "brave", "careful"};
  static constexpr const char* kVerbs[] = {"found",   "carried", "painted", "lost",   "opened", "watched", "fixed",
                                           "brought", "sold",    "dropped", "hid",    "cleaned", "followed", "kept"};
  static constexpr const char* kPrepositions[] = {"near", "behind", "under", "across", "beside", "inside", "above"};
  static constexpr const char* kTimes[] = {"in the morning", "after supper", "that winter", "at noon",
                                           "the next day",   "before dawn",  "on sunday",   "later"};

  std::mt19937_64 rng_;
  std::string hero_;
  std::string place_;
};

}  // namespace mim::acceptance
