#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "milecf/eventlog.hpp"

namespace milecf {

struct BankTrace {
  std::string case_id;
  std::vector<int> activities;
  std::vector<int> resources;
  double amount = 0.0;
};

/// Training traces encoded against a model vocabulary, with an activity
/// prefix trie. It is the background knowledge for plausibility checks and
/// counterfactual seeding.
class KnowledgeBank {
 public:
  KnowledgeBank() = default;
  KnowledgeBank(const std::vector<Case>& cases, const Vocabulary& vocab);

  const std::vector<BankTrace>& traces() const { return traces_; }
  std::size_t size() const { return traces_.size(); }
  bool empty() const { return traces_.empty(); }

  /// True when `activities` is a prefix of at least one training trace.
  bool is_prefix(std::span<const int> activities) const;

  /// True when some trace contains `activity`.
  bool reaches(int activity) const;

  /// Distinct activity prefixes of length `length` that are followed by
  /// `next` in some training trace, in lexicographic index order.
  std::vector<std::vector<int>> prefixes_followed_by(int next, std::size_t length) const;

 private:
  struct Node {
    std::map<int, int> children;
  };
  std::vector<BankTrace> traces_;
  std::vector<Node> trie_{Node{}};
};

}  // namespace milecf
