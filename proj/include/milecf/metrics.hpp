#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "milecf/eventlog.hpp"

namespace milecf {

/// Which encoded channels a distance looks at.
enum class Channel { kActivity, kResource, kBoth };

const char* to_string(Channel c);
Channel channel_from_string(std::string_view s);

/// Unit-cost edit distance.
template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  const std::size_t n = std::size(a), m = std::size(b);
  std::vector<std::size_t> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  auto ai = std::begin(a);
  for (std::size_t i = 1; i <= n; ++i, ++ai) {
    cur[0] = i;
    auto bj = std::begin(b);
    for (std::size_t j = 1; j <= m; ++j, ++bj) {
      const std::size_t sub = prev[j - 1] + (*ai == *bj ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

/// Number of positions where two PAD-aligned index sequences differ.
std::size_t aligned_mismatches(std::span<const int> a, std::span<const int> b);

/// L2 distance between PAD-aligned one-hot encodings plus the normalised
/// amount delta. Each differing position contributes 2 to the squared norm.
double proximity(std::span<const int> a_acts, std::span<const int> a_res, double a_amount_norm,
                 std::span<const int> b_acts, std::span<const int> b_res, double b_amount_norm,
                 Channel channel = Channel::kBoth);

}  // namespace milecf
