#include <algorithm>
#include <cmath>

#include "milecf/cfengine.hpp"

namespace milecf {

const char* to_string(BaselineOutcome o) {
  switch (o) {
    case BaselineOutcome::kFound:
      return "found";
    case BaselineOutcome::kNotFound:
      return "not_found";
    case BaselineOutcome::kLoopDetected:
      return "loop_detected";
  }
  return "not_found";
}

const char* to_string(BaselineDimension d) {
  switch (d) {
    case BaselineDimension::kActivity:
      return "activity";
    case BaselineDimension::kResource:
      return "resource";
    case BaselineDimension::kAmount:
      return "amount";
  }
  return "activity";
}

double mad_or_one(std::vector<double> values) {
  if (values.empty()) return 1.0;
  auto median = [](std::vector<double>& v) {
    const std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  const double m = median(values);
  for (auto& v : values) v = std::abs(v - m);
  const double mad = median(values);
  return mad > 0 ? mad : 1.0;
}

namespace {

// Flattens a matrix Var row by row into 1 x (rows * cols).
Var flatten(const Var& m) {
  Var out = num::slice_rows(m, 0, 1);
  for (Eigen::Index r = 1; r < m.rows(); ++r) out = num::concat_cols(out, num::slice_rows(m, r, 1));
  return out;
}

Var l1_scaled(const Var& a, const Var& b, const Mat& inv_mad) {
  auto& g = a.graph();
  return num::sum(num::mul(num::abs(num::sub(a, b)), g.constant(inv_mad)));
}

// Hard projection: every row becomes the one-hot of its largest data entry.
void project_one_hot(Mat& m, const TokenMap& map) {
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    int best = TokenMap::kEos + 1;
    for (int j = best + 1; j < map.unk(); ++j) {
      if (m(t, j) > m(t, best)) best = j;
    }
    m.row(t).setZero();
    m(t, best) = 1.0;
  }
}

std::vector<int> indices_of(const Mat& one_hot) {
  std::vector<int> out(static_cast<std::size_t>(one_hot.rows()));
  for (Eigen::Index t = 0; t < one_hot.rows(); ++t) {
    Eigen::Index j;
    one_hot.row(t).maxCoeff(&j);
    out[t] = static_cast<int>(j);
  }
  return out;
}

// Per-column MAD of position-wise one-hot indicators over the bank traces.
Mat categorical_inv_mad(const KnowledgeBank& bank, std::size_t len, int cols, bool resources) {
  Mat inv(static_cast<Eigen::Index>(len), cols);
  std::vector<double> column(bank.size());
  for (std::size_t t = 0; t < len; ++t) {
    for (int j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < bank.size(); ++i) {
        const auto& seq = resources ? bank.traces()[i].resources : bank.traces()[i].activities;
        const int tok = t < seq.size() ? seq[t] : TokenMap::kPad;
        column[i] = tok == j ? 1.0 : 0.0;
      }
      inv(static_cast<Eigen::Index>(t), j) = 1.0 / mad_or_one(column);
    }
  }
  return inv;
}

}  // namespace

Var dpp_kernel(const std::vector<Var>& candidates, const Mat& inv_mad) {
  if (candidates.empty()) throw InvalidArgument("dpp kernel needs at least one candidate");
  auto& g = candidates.front().graph();
  const std::size_t k = candidates.size();
  Mat one(1, 1);
  one(0, 0) = 1.0;
  std::vector<std::vector<Var>> entries(k, std::vector<Var>(k));
  for (std::size_t i = 0; i < k; ++i) {
    entries[i][i] = g.constant(one);
    for (std::size_t j = i + 1; j < k; ++j) {
      entries[i][j] = num::reciprocal(num::add_scalar(l1_scaled(candidates[i], candidates[j], inv_mad), Real(1)));
      entries[j][i] = entries[i][j];
    }
  }
  Var kernel;
  for (std::size_t i = 0; i < k; ++i) {
    Var row = entries[i][0];
    for (std::size_t j = 1; j < k; ++j) row = num::concat_cols(row, entries[i][j]);
    kernel = i == 0 ? row : num::concat_rows(kernel, row);
  }
  return kernel;
}

BaselineResult dice_baseline(const EncodedQuery& query, const NextActivityModel& model, const KnowledgeBank& bank,
                             const BaselineOptions& options) {
  if (bank.empty()) throw EmptyKnowledgeBase("knowledge bank is empty");
  if (options.k < 1 || options.max_iters < 1 || options.loop_window < 1 || !(options.step > 0)) {
    throw InvalidArgument("invalid baseline options");
  }
  const auto& vocab = model.vocab();
  const int na = model.num_activities(), nr = model.num_resources();
  const std::size_t len = query.activities.size();
  const auto& stats = model.amount_stats();

  std::vector<double> amounts;
  for (const auto& t : bank.traces()) amounts.push_back(stats.normalize(t.amount));
  Mat inv_amount(1, 1);
  inv_amount(0, 0) = 1.0 / mad_or_one(amounts);
  const Mat inv_acts = categorical_inv_mad(bank, len, na, false);
  const Mat inv_res = categorical_inv_mad(bank, len, nr, true);
  Mat inv_flat(1, inv_acts.size() + inv_res.size() + 1);
  inv_flat << Eigen::Map<const Eigen::RowVectorXd>(inv_acts.data(), inv_acts.size()),
      Eigen::Map<const Eigen::RowVectorXd>(inv_res.data(), inv_res.size()), inv_amount;
  // Distances are averaged over the encoded features.
  inv_flat /= static_cast<Real>(inv_flat.cols());

  const auto q = CandidateTrace::one_hot(query.activities, query.resources, query.amount_norm, na, nr);
  Mat q_amount(1, 1);
  q_amount(0, 0) = query.amount_norm;
  std::vector<Param> acts(options.k, Param("acts", q.activity_probs));
  std::vector<Param> res(options.k, Param("res", q.resource_probs));
  std::vector<Param> amt(options.k, Param("amount", q_amount));
  const bool move_acts = options.dimension == BaselineDimension::kActivity;
  const bool move_res = options.dimension == BaselineDimension::kResource;
  const bool move_amt = options.dimension == BaselineDimension::kAmount;

  BaselineResult out;
  auto snapshot = [&] {
    std::vector<BaselineCandidate> s;
    for (int i = 0; i < options.k; ++i) {
      s.push_back(BaselineCandidate{indices_of(acts[i].value), indices_of(res[i].value),
                                    stats.denormalize(amt[i].value(0, 0))});
    }
    return s;
  };
  auto collect_found = [&](const std::vector<BaselineCandidate>& s) {
    for (const auto& c : s) {
      if (model.predict(c.activities, c.resources, c.amount).index != query.desired) continue;
      const bool dup = std::any_of(out.found.begin(), out.found.end(), [&](const BaselineCandidate& f) {
        return f.activities == c.activities && f.resources == c.resources && f.amount == c.amount;
      });
      if (!dup) out.found.push_back(c);
    }
  };
  auto same = [](const std::vector<BaselineCandidate>& a, const std::vector<BaselineCandidate>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].activities != b[i].activities || a[i].resources != b[i].resources || a[i].amount != b[i].amount) {
        return false;
      }
    }
    return true;
  };

  const auto initial = snapshot();
  collect_found(initial);
  if (!out.found.empty()) {
    out.outcome = BaselineOutcome::kFound;
    return out;
  }
  auto previous = initial;
  int unchanged = 0;
  for (int iter = 1; iter <= options.max_iters; ++iter) {
    out.iterations = iter;
    {
      Graph g;
      Var qa = g.constant(q.activity_probs), qr = g.constant(q.resource_probs), qm = g.constant(q_amount);
      const Var q_flat = num::concat_cols(num::concat_cols(flatten(qa), flatten(qr)), qm);
      std::vector<Var> flats;
      Var yloss = g.constant(Mat::Zero(1, 1));
      Var prox = g.constant(Mat::Zero(1, 1));
      for (int i = 0; i < options.k; ++i) {
        const Var a = move_acts ? g.parameter(acts[i]) : g.constant(acts[i].value);
        const Var r = move_res ? g.parameter(res[i]) : g.constant(res[i].value);
        const Var m = move_amt ? g.parameter(amt[i]) : g.constant(amt[i].value);
        yloss = num::add(yloss, num::hinge(model.forward_relaxed(g, a, r, m), query.desired));
        flats.push_back(num::concat_cols(num::concat_cols(flatten(a), flatten(r)), m));
        prox = num::add(prox, l1_scaled(flats.back(), q_flat, inv_flat));
      }
      const Real kk = static_cast<Real>(options.k);
      Var loss = num::add(num::scale(yloss, 1.0 / kk), num::scale(prox, options.lambda1 / kk));
      if (options.k > 1 && options.lambda2 > 0) {
        loss = num::sub(loss, num::scale(num::det(dpp_kernel(flats, inv_flat)), options.lambda2));
      }
      for (int i = 0; i < options.k; ++i) {
        acts[i].zero_grad();
        res[i].zero_grad();
        amt[i].zero_grad();
      }
      g.backward(loss);
    }
    for (int i = 0; i < options.k; ++i) {
      if (acts[i].has_grad) acts[i].value -= options.step * acts[i].grad;
      if (res[i].has_grad) res[i].value -= options.step * res[i].grad;
      if (amt[i].has_grad) amt[i].value -= options.step * amt[i].grad;
      project_one_hot(acts[i].value, vocab.activities);
      project_one_hot(res[i].value, vocab.resources);
    }
    const auto current = snapshot();
    if (!same(current, initial)) out.projection_changed = true;
    collect_found(current);
    if (!out.found.empty()) {
      out.outcome = BaselineOutcome::kFound;
      return out;
    }
    unchanged = same(current, previous) ? unchanged + 1 : 0;
    if (unchanged >= options.loop_window) {
      out.outcome = BaselineOutcome::kLoopDetected;
      return out;
    }
    previous = current;
  }
  out.outcome = BaselineOutcome::kNotFound;
  return out;
}

}  // namespace milecf
