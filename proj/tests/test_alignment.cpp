#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "twbert/alignment.hpp"
#include "twbert/core/grad_check.hpp"

using namespace twbert;
using T = Tensor<double>;

namespace {

T unit_rows(std::size_t n, std::size_t d, Rng& rng, bool grad = false) {
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < d; ++j) norm += std::pow(v[i * d + j] = rng.normal(), 2);
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] /= std::sqrt(norm);
  }
  return T::from({n, d}, v, grad);
}

double maxsim_oracle(const T& q, const T& c, bool normalize) {
  double total = 0;
  for (std::size_t n = 0; n < q.rows(); ++n) {
    double best = -1e300;
    for (std::size_t m = 0; m < c.rows(); ++m) {
      double dot = 0;
      for (std::size_t x = 0; x < q.cols(); ++x) dot += q.at(n, x) * c.at(m, x);
      best = std::max(best, dot);
    }
    total += best;
  }
  return normalize ? total / static_cast<double>(q.rows()) : total;
}

// -mean_i log softmax(row_i / tau)[i] + same over columns.
double infonce_oracle(const std::vector<std::vector<double>>& s, double tau) {
  const std::size_t b = s.size();
  double rows = 0, cols = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double zr = 0, zc = 0;
    for (std::size_t j = 0; j < b; ++j) {
      zr += std::exp(s[i][j] / tau);
      zc += std::exp(s[j][i] / tau);
    }
    rows += -(s[i][i] / tau - std::log(zr));
    cols += -(s[i][i] / tau - std::log(zc));
  }
  return rows / b + cols / b;
}

SimilarityMatrix<double> matrix_of(const T& scores, double tau) {
  SimilarityMatrix<double> s;
  s.scores = scores;
  s.tau = tau;
  for (std::size_t i = 0; i < scores.shape()[0]; ++i) s.positives.push_back(i);
  return s;
}

double loss_of(const std::vector<std::vector<double>>& s, double tau) {
  std::vector<double> flat, flat_t;
  const std::size_t b = s.size();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      flat.push_back(s[i][j]);
      flat_t.push_back(s[j][i]);
    }
  return contrastive_loss(matrix_of(T::from({b, b}, flat), tau), matrix_of(T::from({b, b}, flat_t), tau)).item();
}

}  // namespace

TEST(CoarseSim, IdenticalAndOrthogonal) {
  auto a = T::matrix({{1, 0}, {0, 1}});
  auto s = coarse_sim(a, a);
  EXPECT_EQ(s.scores.at(0, 0), 1.0);
  EXPECT_EQ(s.scores.at(0, 1), 0.0);
  EXPECT_EQ(s.positives, (std::vector<std::size_t>{0, 1}));
}

TEST(CoarseSim, MatchesDoubleLoop) {
  Rng rng(1);
  auto v = unit_rows(5, 7, rng), t = unit_rows(6, 7, rng);
  auto s = coarse_sim(v, t);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double dot = 0;
      for (std::size_t x = 0; x < 7; ++x) dot += v.at(i, x) * t.at(j, x);
      EXPECT_NEAR(s.scores.at(i, j), dot, 1e-12);
      EXPECT_LE(std::abs(s.scores.at(i, j)), 1.0 + 1e-12);
    }
  EXPECT_THROW(coarse_sim(v, unit_rows(2, 3, rng)), DimensionError);
}

TEST(FineSim, SinglePairIsDotProduct) {
  auto v = T::matrix({{0.6, 0.8}}), x = T::matrix({{1, 0}});
  EXPECT_NEAR(fine_sim_v2t(v, x).item(), 0.6, 1e-15);
  EXPECT_NEAR(fine_sim_t2v(x, v).item(), 0.6, 1e-15);
}

TEST(FineSim, MatchesLoopOracleBothNormalizations) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = unit_rows(1 + rng.below(9), 5, rng), x = unit_rows(1 + rng.below(6), 5, rng);
    for (bool norm : {true, false}) {
      EXPECT_NEAR(fine_sim_v2t(v, x, norm).item(), maxsim_oracle(v, x, norm), 1e-12);
      EXPECT_NEAR(fine_sim_t2v(x, v, norm).item(), maxsim_oracle(x, v, norm), 1e-12);
    }
  }
}

TEST(FineSimProperty, PermutationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nv = 1 + rng.below(8), nx = 1 + rng.below(8);
    auto v = unit_rows(nv, 4, rng), x = unit_rows(nx, 4, rng);
    std::vector<std::size_t> pv(nv), px(nx);
    std::iota(pv.begin(), pv.end(), 0);
    std::iota(px.begin(), px.end(), 0);
    rng.shuffle(pv);
    rng.shuffle(px);
    auto v2 = gather_rows(v, pv), x2 = gather_rows(x, px);
    EXPECT_EQ(fine_sim_v2t(v2, x2).item(), fine_sim_v2t(v, x).item());
    EXPECT_EQ(fine_sim_t2v(x2, v2).item(), fine_sim_t2v(x, v).item());
    EXPECT_EQ(fine_sim_v2t(v, x2).item(), fine_sim_v2t(v, x).item());
    EXPECT_EQ(fine_sim_t2v(x, v2).item(), fine_sim_t2v(x, v).item());
  }
}

TEST(FineSimProperty, DuplicateWordIsIdempotentAndSupersetMonotone) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t nx = 1 + rng.below(5);
    auto v = unit_rows(1 + rng.below(8), 4, rng), x = unit_rows(nx, 4, rng);
    std::vector<std::size_t> dup(nx);
    std::iota(dup.begin(), dup.end(), 0);
    dup.push_back(rng.below(nx));
    EXPECT_EQ(fine_sim_v2t(v, gather_rows(x, dup)).item(), fine_sim_v2t(v, x).item());
    auto bigger = concat_rows<double>({x, unit_rows(1, 4, rng)});
    EXPECT_GE(fine_sim_v2t(v, bigger, false).item(), fine_sim_v2t(v, x, false).item());
  }
}

TEST(FineSim, Errors) {
  EXPECT_THROW(maxsim_matrix<double>({}, {T::zeros({1, 2})}), ContractError);
  EXPECT_THROW(maxsim_matrix<double>({T::zeros({1, 2})}, {T::zeros({1, 3})}), DimensionError);
}

TEST(MaxsimMatrix, EveryEntryMatchesOracle) {
  Rng rng(5);
  std::vector<T> q, c;
  for (int i = 0; i < 3; ++i) q.push_back(unit_rows(1 + rng.below(5), 4, rng));
  for (int i = 0; i < 4; ++i) c.push_back(unit_rows(1 + rng.below(5), 4, rng));
  auto s = maxsim_matrix(q, c);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(s.at(i, j), maxsim_oracle(q[i], c[j], true), 1e-12);
}

TEST(ContrastiveLoss, SingleSampleIsZero) {
  EXPECT_EQ(loss_of({{0.3}}, 0.05), 0.0);
}

TEST(ContrastiveLoss, AllEqualScoresGiveTwoLogB) {
  EXPECT_NEAR(loss_of(std::vector<std::vector<double>>(4, std::vector<double>(4, 0.2)), 0.05), 2 * std::log(4.0),
              1e-12);
}

TEST(ContrastiveLoss, MatchesLogSumExpOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> s(4, std::vector<double>(4));
    for (auto& r : s)
      for (double& x : r) x = rng.uniform(-1, 1);
    const double tau = rng.uniform(0.05, 1.0);
    EXPECT_NEAR(loss_of(s, tau), infonce_oracle(s, tau), 1e-10);
  }
}

TEST(ContrastiveLoss, Errors) {
  auto s = matrix_of(T::matrix({{1, 0}, {0, 1}}), 0.0);
  EXPECT_THROW(contrastive_loss(s, s), ContractError);
  auto bad = matrix_of(T::matrix({{1, 0}, {0, 1}}), 0.1);
  bad.positives.pop_back();
  EXPECT_THROW(contrastive_loss(bad, bad), DimensionError);
}

TEST(ContrastiveLossProperty, NonNegativeAndDecreasingInPositiveScore) {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<double>> s(3, std::vector<double>(3));
    for (auto& r : s)
      for (double& x : r) x = rng.uniform(-1, 1);
    double prev = loss_of(s, 0.1);
    EXPECT_GE(prev, 0.0);
    for (int k = 0; k < 10; ++k) {
      s[1][1] += 0.3;
      const double cur = loss_of(s, 0.1);
      EXPECT_LT(cur, prev);
      EXPECT_GE(cur, 0.0);
      prev = cur;
    }
  }
}

TEST(ContrastiveLossProperty, TemperatureKeepsArgmax) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> row(6);
    for (double& x : row) x = rng.uniform(-1, 1);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    for (double tau : {0.01, 0.05, 0.5, 5.0}) {
      auto p = softmax_rows(scale(T::from({1, 6}, row), 1.0 / tau));
      EXPECT_EQ(std::max_element(p.values().begin(), p.values().end()) - p.values().begin(), best);
    }
  }
}

TEST(ContrastiveLoss, MaskedCandidatesLeaveTheSoftmax) {
  auto scores = T::matrix({{0.5, 0.1, 0.9}});
  SimilarityMatrix<double> s;
  s.scores = scores;
  s.tau = 0.5;
  s.positives = {0};
  s.allowed = {1, 1, 0};
  const double expected = -(1.0 - std::log(std::exp(1.0) + std::exp(0.2)));
  EXPECT_NEAR(contrastive_loss(s, s).item(), 2 * expected, 1e-12);
}

TEST(AlignmentGradients, CoarseAndFineLossesPassGradCheck) {
  Rng rng(9);
  std::vector<T> vids, words;
  for (int i = 0; i < 3; ++i) {
    vids.push_back(unit_rows(4, 5, rng, true));
    words.push_back(unit_rows(2 + i, 5, rng, true));
  }
  auto vcls = unit_rows(3, 5, rng, true), tcls = unit_rows(3, 5, rng, true);
  // Queued negatives are constants.
  auto queued = unit_rows(2, 5, rng);
  auto f = [&] {
    auto v2t = coarse_sim(vcls, concat_rows<double>({tcls, queued}), 0.2);
    auto t2v = coarse_sim(tcls, concat_rows<double>({vcls, queued}), 0.2);
    auto fv = matrix_of(maxsim_matrix(vids, words), 0.2);
    auto ft = matrix_of(maxsim_matrix(words, vids), 0.2);
    return add(contrastive_loss(v2t, t2v), contrastive_loss(fv, ft));
  };
  std::vector<Parameter<double>> params{{"vcls", vcls}, {"tcls", tcls}};
  for (int i = 0; i < 3; ++i) {
    params.push_back({"v" + std::to_string(i), vids[i]});
    params.push_back({"w" + std::to_string(i), words[i]});
  }
  auto report = grad_check<double>(f, params, 1e-6, 1e-4);
  EXPECT_TRUE(report.passed()) << report.to_string();
}

TEST(MomentumUpdate, Limits) {
  ParameterStore<double> online, teacher;
  online.add("a", {3}, {1, 2, 3});
  teacher.add("a", {3}, {7, 8, 9});
  momentum_update(online, teacher, 1.0);
  EXPECT_EQ(std::vector<double>(teacher.at("a").value.values().begin(), teacher.at("a").value.values().end()),
            (std::vector<double>{7, 8, 9}));
  momentum_update(online, teacher, 0.0);
  EXPECT_EQ(std::vector<double>(teacher.at("a").value.values().begin(), teacher.at("a").value.values().end()),
            (std::vector<double>{1, 2, 3}));
}

TEST(MomentumUpdate, GeometricRecurrence) {
  ParameterStore<double> online, teacher;
  online.add("theta", {1}, {1.0});
  teacher.add("theta", {1}, {0.0});
  for (double expected : {0.5, 0.75, 0.875}) {
    momentum_update(online, teacher, 0.5);
    EXPECT_EQ(teacher.at("theta").value.item(), expected);
  }
}

TEST(MomentumUpdate, Errors) {
  ParameterStore<double> a, b, c;
  a.add("x", {1}, {1.0});
  b.add("y", {1}, {1.0});
  c.add("x", {2}, {1.0, 2.0});
  EXPECT_THROW(momentum_update(a, b, 0.5), ContractError);
  EXPECT_THROW(momentum_update(a, c, 0.5), DimensionError);
  EXPECT_THROW(momentum_update(a, a, 1.5), ContractError);
}

TEST(FeatureQueue, FifoOverTenTimesCapacity) {
  FeatureQueue<double> q(7);
  for (std::size_t i = 0; i < 70; ++i) {
    q.push({i, {static_cast<double>(i)}, {}, 0});
    ASSERT_LE(q.size(), 7u);
    const std::size_t first = i + 1 >= 7 ? i + 1 - 7 : 0;
    for (std::size_t k = 0; k < q.size(); ++k) EXPECT_EQ(q[k].sample_id, first + k);
  }
  auto m = q.cls_matrix();
  EXPECT_EQ(m.shape(), (Shape{7, 1}));
  EXPECT_EQ(m.values()[0], 63.0);
}

TEST(FeatureQueue, ZeroCapacityStaysEmpty) {
  FeatureQueue<double> q(0);
  q.push({1, {1.0}, {}, 0});
  EXPECT_TRUE(q.empty());
}

TEST(StridedRows, EvenlySpacedAndCapped) {
  EXPECT_EQ(strided_rows(3, 16), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(strided_rows(8, 4), (std::vector<std::size_t>{0, 2, 4, 6}));
  auto r = strided_rows(64, 16);
  EXPECT_EQ(r.size(), 16u);
  EXPECT_TRUE(std::is_sorted(r.begin(), r.end()));
  EXPECT_EQ(std::adjacent_find(r.begin(), r.end()), r.end());
}
