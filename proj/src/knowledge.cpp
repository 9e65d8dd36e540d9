#include "milecf/knowledge.hpp"

#include "milecf/metrics.hpp"

namespace milecf {

const char* to_string(Channel c) {
  switch (c) {
    case Channel::kActivity:
      return "activity";
    case Channel::kResource:
      return "resource";
    case Channel::kBoth:
      return "both";
  }
  return "both";
}

Channel channel_from_string(std::string_view s) {
  if (s == "activity") return Channel::kActivity;
  if (s == "resource") return Channel::kResource;
  if (s == "both") return Channel::kBoth;
  throw InvalidArgument("unknown channel '" + std::string(s) + "'");
}

std::size_t aligned_mismatches(std::span<const int> a, std::span<const int> b) {
  const std::size_t n = std::max(a.size(), b.size());
  std::size_t diff = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const int x = t < a.size() ? a[t] : TokenMap::kPad;
    const int y = t < b.size() ? b[t] : TokenMap::kPad;
    diff += x != y ? 1 : 0;
  }
  return diff;
}

double proximity(std::span<const int> a_acts, std::span<const int> a_res, double a_amount_norm,
                 std::span<const int> b_acts, std::span<const int> b_res, double b_amount_norm,
                 Channel channel) {
  double sq = 0.0;
  if (channel != Channel::kResource) sq += 2.0 * static_cast<double>(aligned_mismatches(a_acts, b_acts));
  if (channel != Channel::kActivity) sq += 2.0 * static_cast<double>(aligned_mismatches(a_res, b_res));
  const double d = a_amount_norm - b_amount_norm;
  return std::sqrt(sq + d * d);
}

KnowledgeBank::KnowledgeBank(const std::vector<Case>& cases, const Vocabulary& vocab) {
  traces_.reserve(cases.size());
  for (const auto& c : cases) {
    auto enc = encode(c, vocab);
    int node = 0;
    for (int a : enc.activities) {
      auto it = trie_[node].children.find(a);
      if (it == trie_[node].children.end()) {
        trie_.push_back(Node{});
        const int id = static_cast<int>(trie_.size()) - 1;
        trie_[node].children.emplace(a, id);
        node = id;
      } else {
        node = it->second;
      }
    }
    traces_.push_back(BankTrace{c.case_id, std::move(enc.activities), std::move(enc.resources), c.amount});
  }
}

bool KnowledgeBank::is_prefix(std::span<const int> activities) const {
  if (traces_.empty()) return false;
  int node = 0;
  for (int a : activities) {
    auto it = trie_[node].children.find(a);
    if (it == trie_[node].children.end()) return false;
    node = it->second;
  }
  return true;
}

bool KnowledgeBank::reaches(int activity) const {
  for (const auto& t : traces_) {
    if (std::find(t.activities.begin(), t.activities.end(), activity) != t.activities.end()) return true;
  }
  return false;
}

std::vector<std::vector<int>> KnowledgeBank::prefixes_followed_by(int next, std::size_t length) const {
  std::vector<std::vector<int>> out;
  std::vector<int> path;
  // Depth-first walk to `length`, children visited in index order.
  auto walk = [&](auto&& self, int node) -> void {
    if (path.size() == length) {
      if (trie_[node].children.count(next)) out.push_back(path);
      return;
    }
    for (const auto& [token, child] : trie_[node].children) {
      path.push_back(token);
      self(self, child);
      path.pop_back();
    }
  };
  walk(walk, 0);
  return out;
}

}  // namespace milecf
