#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct/errors.hpp"
#include "ct/rng.hpp"
#include "ct/tensor.hpp"

namespace ct {
namespace ioi {

// Sentence frames. {N1}/{N2} hold the opening name pair, {S} the repeated
// late subject. The subject is always name B and, in sequence order, {S} is
// its second occurrence -- the substitution site for the corrupted variants.
// Whether B opens the pair (B A ... B) or follows A (A B ... B) is chosen
// per example, so the indirect object cannot be read off a fixed position.
inline const std::vector<std::vector<std::string>>& templates() {
  static const std::vector<std::vector<std::string>> kTemplates = {
      {"When", "{N1}", "and", "{N2}", "got", "a", "{OBJ}", "at", "the",
       "{PLACE}", ",", "{S}", "decided", "to", "give", "it", "to"},
      {"Then", ",", "{N1}", "and", "{N2}", "had", "a", "lot", "of", "fun", "at",
       "the", "{PLACE}", ".", "{S}", "gave", "a", "{OBJ}", "to"},
      {"Then", ",", "{N1}", "and", "{N2}", "had", "a", "long", "argument", ",",
       "and", "afterwards", "{S}", "said", "to"},
      {"Then", ",", "{N1}", "and", "{N2}", "went", "to", "the", "{PLACE}", ".",
       "{S}", "gave", "a", "{OBJ}", "to"},
  };
  return kTemplates;
}

inline const std::vector<std::string>& name_pool() {
  static const std::vector<std::string> kNames = {
      "Amy",     "Laura",  "Nicholas", "Danielle", "Andrew",
      "Jeremy",  "Anthony", "Jose",    "Nathan",   "Sean",
      "Vanessa", "Kimberly", "Christina", "Mary",   "John",
      "Sarah",   "Kevin",  "Jessica",  "Brian",    "Rachel"};
  return kNames;
}

inline const std::vector<std::string>& place_pool() {
  static const std::vector<std::string> kPlaces = {
      "house", "office", "restaurant", "school",
      "park",  "store",  "station",    "garden"};
  return kPlaces;
}

inline const std::vector<std::string>& object_pool() {
  static const std::vector<std::string> kObjects = {
      "snack", "computer", "drink", "ring",
      "book",  "ball",     "basket", "necklace"};
  return kObjects;
}

// Word-level bijective vocabulary. Every template word, name, place and
// object is a single token; ids are fixed by construction order.
class Vocabulary {
 public:
  Vocabulary() {
    add("<pad>");
    add("<unk>");
    for (const auto& tpl : templates())
      for (const auto& w : tpl)
        if (w[0] != '{') add(w);
    for (const auto& w : name_pool()) add(w);
    for (const auto& w : place_pool()) add(w);
    for (const auto& w : object_pool()) add(w);
  }

  int size() const { return static_cast<int>(words_.size()); }
  int pad_id() const { return 0; }
  int unk_id() const { return 1; }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? unk_id() : it->second;
  }

  bool has(const std::string& w) const { return index_.count(w) > 0; }

  const std::string& word(int id) const {
    if (id < 0 || id >= size())
      throw InputError("vocabulary: id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  std::vector<int> tokenize(const std::vector<std::string>& ws) const {
    std::vector<int> out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
  }

  std::vector<std::string> detokenize(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int t : ids) out.push_back(word(t));
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;

  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
};

inline const Vocabulary& vocabulary() {
  static const Vocabulary v;
  return v;
}

}  // namespace ioi

// One task instance: clean / corrupted / corrupted-hard token sequences of
// identical length, differing only at the second occurrence of name B.
struct IOIExample {
  std::vector<std::string> clean_words, corrupted_words, corrupted_hard_words;
  std::vector<int> clean_tokens, corrupted_tokens, corrupted_hard_tokens;
  int target_id = -1;      // name A (the indirect object)
  int distractor_id = -1;  // name B (the repeated subject)
  int template_id = -1;
  std::string name_a, name_b, name_c;

  std::size_t length() const { return clean_tokens.size(); }
};

namespace ioi {

inline IOIExample make_example(int template_id, const std::string& a,
                               const std::string& b, const std::string& c,
                               const std::string& place,
                               const std::string& object, bool a_first = true) {
  const auto& tpls = templates();
  if (template_id < 0 || template_id >= static_cast<int>(tpls.size()))
    throw InputError("template id out of range: " + std::to_string(template_id));
  if (a == b || b == c || a == c)
    throw InputError("names must be pairwise distinct");

  IOIExample ex;
  ex.template_id = template_id;
  ex.name_a = a;
  ex.name_b = b;
  ex.name_c = c;

  for (const auto& w : tpls[static_cast<std::size_t>(template_id)]) {
    std::string clean_w = w, corr_w = w, hard_w = w;
    if (w == "{N1}") {
      clean_w = corr_w = hard_w = a_first ? a : b;
    } else if (w == "{N2}") {
      clean_w = corr_w = hard_w = a_first ? b : a;
    } else if (w == "{S}") {
      clean_w = b;
      corr_w = c;
      hard_w = a;
    } else if (w == "{PLACE}") {
      clean_w = corr_w = hard_w = place;
    } else if (w == "{OBJ}") {
      clean_w = corr_w = hard_w = object;
    }
    ex.clean_words.push_back(clean_w);
    ex.corrupted_words.push_back(corr_w);
    ex.corrupted_hard_words.push_back(hard_w);
  }

  const Vocabulary& v = vocabulary();
  ex.clean_tokens = v.tokenize(ex.clean_words);
  ex.corrupted_tokens = v.tokenize(ex.corrupted_words);
  ex.corrupted_hard_tokens = v.tokenize(ex.corrupted_hard_words);
  ex.target_id = v.id(a);
  ex.distractor_id = v.id(b);
  return ex;
}

// n examples drawn uniformly over templates and entity pools, A != B != C.
inline std::vector<IOIExample> generate(int n, std::uint64_t seed) {
  if (n <= 0) throw InputError("generate: n must be positive");
  Rng rng(seed);
  const auto& names = name_pool();
  const auto& places = place_pool();
  const auto& objects = object_pool();

  std::vector<IOIExample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int tpl = static_cast<int>(rng.uniform_int(templates().size()));
    const std::size_t ia = rng.uniform_int(names.size());
    std::size_t ib = rng.uniform_int(names.size() - 1);
    if (ib >= ia) ++ib;
    std::size_t ic = rng.uniform_int(names.size() - 2);
    if (ic >= std::min(ia, ib)) ++ic;
    if (ic >= std::max(ia, ib)) ++ic;
    const std::string& place = places[rng.uniform_int(places.size())];
    const std::string& object = objects[rng.uniform_int(objects.size())];
    const bool a_first = rng.uniform_int(2) == 0;
    out.push_back(
        make_example(tpl, names[ia], names[ib], names[ic], place, object, a_first));
  }
  return out;
}

inline void save_jsonl(const std::vector<IOIExample>& data,
                       const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  for (const auto& ex : data) {
    nlohmann::json j;
    j["clean"] = ex.clean_words;
    j["corrupted"] = ex.corrupted_words;
    j["corrupted_hard"] = ex.corrupted_hard_words;
    j["target"] = ex.name_a;
    j["distractor"] = ex.name_b;
    j["template_id"] = ex.template_id;
    f << j.dump() << "\n";
  }
}

inline std::vector<IOIExample> load_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for read: " + path);
  const Vocabulary& v = vocabulary();
  std::vector<IOIExample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    IOIExample ex;
    ex.clean_words = j.at("clean").get<std::vector<std::string>>();
    ex.corrupted_words = j.at("corrupted").get<std::vector<std::string>>();
    ex.corrupted_hard_words = j.at("corrupted_hard").get<std::vector<std::string>>();
    ex.name_a = j.at("target").get<std::string>();
    ex.name_b = j.at("distractor").get<std::string>();
    ex.template_id = j.at("template_id").get<int>();
    ex.clean_tokens = v.tokenize(ex.clean_words);
    ex.corrupted_tokens = v.tokenize(ex.corrupted_words);
    ex.corrupted_hard_tokens = v.tokenize(ex.corrupted_hard_words);
    ex.target_id = v.id(ex.name_a);
    ex.distractor_id = v.id(ex.name_b);
    // Recover C from the substitution site, if present.
    for (std::size_t t = 0; t < ex.clean_words.size(); ++t)
      if (ex.corrupted_words[t] != ex.clean_words[t]) ex.name_c = ex.corrupted_words[t];
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace ioi

// logit(target) - logit(distractor) at the final sequence position.
inline double logit_diff(const Tensor& logits, const IOIExample& ex) {
  if (logits.ndim() != 2 || logits.rows() == 0)
    throw InputError("logit_diff: logits must be a nonempty seq x vocab matrix");
  const std::size_t v = logits.cols();
  if (ex.target_id < 0 || static_cast<std::size_t>(ex.target_id) >= v ||
      ex.distractor_id < 0 || static_cast<std::size_t>(ex.distractor_id) >= v)
    throw InputError("logit_diff: target/distractor id outside vocabulary");
  const std::size_t last = logits.rows() - 1;
  return logits(last, static_cast<std::size_t>(ex.target_id)) -
         logits(last, static_cast<std::size_t>(ex.distractor_id));
}

}  // namespace ct
