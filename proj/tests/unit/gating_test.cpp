#include <gtest/gtest.h>

#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/gating.hpp"
#include "chanfuse/ops.hpp"
#include "chanfuse/sparse.hpp"
#include "oracles.hpp"

using namespace chanfuse;

namespace {

Tensor repeat_logits(const std::array<double, 3>& q, Index rows) {
  std::vector<double> v;
  for (Index r = 0; r < rows; ++r) v.insert(v.end(), q.begin(), q.end());
  return Tensor({rows, 3}, v);
}

std::array<double, 3> softmax3(const std::array<double, 3>& q) {
  const double m = std::max({q[0], q[1], q[2]});
  std::array<double, 3> p;
  double z = 0.0;
  for (int i = 0; i < 3; ++i) z += (p[i] = std::exp(q[i] - m));
  for (double& x : p) x /= z;
  return p;
}

std::array<double, 3> frequencies(const GumbelSample& s) {
  std::array<double, 3> f = {0, 0, 0};
  for (auto d : s.decisions) f[d] += 1.0;
  for (double& x : f) x /= static_cast<double>(s.decisions.size());
  return f;
}

std::vector<std::uint8_t> random_trace(std::mt19937_64& gen, Index n) {
  std::uniform_int_distribution<int> code(0, 2);
  std::vector<std::uint8_t> d(static_cast<std::size_t>(n));
  for (auto& x : d) x = static_cast<std::uint8_t>(code(gen));
  return d;
}

// Upstream stand-in for gate_forward tests: a fixed 1x1 convolution.
struct Upstream {
  Tensor w, b;
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, 1, 0); }
};

}  // namespace

TEST(Gumbel, UniformLogitsGiveEqualFrequencies) {
  Rng rng(1);
  const auto f = frequencies(gumbel_softmax(repeat_logits({0, 0, 0}, 30000), 0.67, rng));
  for (double x : f) EXPECT_NEAR(x, 1.0 / 3.0, 0.02);
}

TEST(Gumbel, DominantLogit) {
  Rng rng(2);
  const auto f = frequencies(gumbel_softmax(repeat_logits({10, 0, 0}, 30000), 0.67, rng));
  EXPECT_GT(f[0], 0.999);
}

TEST(Gumbel, FrequenciesWithinThreeSigmaOfSoftmax) {
  std::mt19937_64 gen(77);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Rng rng(3);
  const double n = 30000;
  for (int rep = 0; rep < 10; ++rep) {
    const std::array<double, 3> q = {u(gen), u(gen), u(gen)};
    const auto p = softmax3(q);
    const auto f = frequencies(gumbel_softmax(repeat_logits(q, 30000), 0.67, rng));
    for (int i = 0; i < 3; ++i) {
      const double sigma = std::sqrt(p[i] * (1 - p[i]) / n);
      EXPECT_LE(std::abs(f[i] - p[i]), 3 * sigma) << "rep " << rep << " code " << i;
    }
  }
}

TEST(Gumbel, HugeTemperatureIsUniform) {
  Rng rng(4);
  const GumbelSample s = gumbel_softmax(repeat_logits({2.0, -1.0, 0.5}, 1000), 1e6, rng);
  for (double v : s.soft) EXPECT_NEAR(v, 1.0 / 3.0, 1e-3);
}

TEST(Gumbel, SampleInvariantsForFrozenNoise) {
  std::mt19937_64 gen(5);
  Rng rng(5);
  const Tensor q = oracle::random_tensor({200, 3}, gen, -3.0, 3.0);
  const Tensor g = draw_gumbel_noise(200, rng);
  const GumbelSample s = gumbel_softmax(q, g, 0.67);
  for (Index r = 0; r < 200; ++r) {
    double m = -1e300;
    for (int i = 0; i < 3; ++i) m = std::max(m, q.at(r * 3 + i));
    double z = 0.0;
    for (int i = 0; i < 3; ++i) z += std::exp(q.at(r * 3 + i) - m);
    int best = 0, soft_best = 0;
    double best_v = -1e300, soft_sum = 0.0, ones = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double v = q.at(r * 3 + i) - m - std::log(z) + g.at(r * 3 + i);
      if (v > best_v) best_v = v, best = i;
      const double sv = s.soft[static_cast<std::size_t>(r * 3 + i)];
      EXPECT_GT(sv, 0.0);
      soft_sum += sv;
      if (sv > s.soft[static_cast<std::size_t>(r * 3 + soft_best)]) soft_best = i;
      const double h = s.onehot.at(r * 3 + i);
      EXPECT_TRUE(h == 0.0 || h == 1.0);
      ones += h;
    }
    EXPECT_EQ(ones, 1.0);
    EXPECT_EQ(s.decisions[static_cast<std::size_t>(r)], best);
    EXPECT_EQ(s.onehot.at(r * 3 + best), 1.0);
    EXPECT_EQ(soft_best, best);
    EXPECT_NEAR(soft_sum, 1.0, 1e-12);
  }
}

TEST(Gumbel, Errors) {
  Rng rng(6);
  EXPECT_THROW(gumbel_softmax(Tensor({1, 3}, {0.0, NAN, 0.0}), 0.67, rng), NumericError);
  EXPECT_THROW(gumbel_softmax(Tensor({1, 3}, {0.0, INFINITY, 0.0}), 0.67, rng), NumericError);
  EXPECT_THROW(gumbel_softmax(Tensor({1, 3}, {0.0, 0.0, 0.0}), 0.0, rng), ContractError);
}

TEST(Gumbel, ArgmaxPolicyBreaksTiesLow) {
  const GumbelSample s = argmax_policy(Tensor({3, 3}, {0, 0, 0, 1, 2, 2, -1, 3, 3}));
  EXPECT_EQ(s.decisions, (std::vector<std::uint8_t>{kKeep, kReuse, kReuse}));
}

TEST(Fuse, CaseExamples) {
  const Tensor y({1, 3, 1, 1}, {1, 2, 3});
  const Tensor prev({1, 3, 1, 1}, {4, 5, 6});
  const std::vector<std::uint8_t> krs = {kKeep, kReuse, kSkip};
  EXPECT_EQ(oracle::to_vec(fuse(y, prev, krs)), (std::vector<double>{1, 5, 0}));
  const std::vector<std::uint8_t> keep(3, kKeep), skip(3, kSkip);
  EXPECT_EQ(oracle::to_vec(fuse(y, prev, keep)), oracle::to_vec(y));
  EXPECT_EQ(oracle::to_vec(fuse(y, prev, skip)), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(fuse(y, Tensor::zeros({1, 2, 1, 1}), krs), DimensionError);
}

TEST(Fuse, StraightThroughFormEqualsCaseAnalysis) {
  std::mt19937_64 gen(9);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor y = oracle::random_tensor({3, 4, 2, 2}, gen);
    const Tensor prev = oracle::random_tensor({3, 4, 2, 2}, gen);
    const auto d = random_trace(gen, 12);
    const Tensor onehot = fixed_policy(d).onehot;
    EXPECT_EQ(oracle::to_vec(fuse(y, prev, onehot)), oracle::to_vec(fuse(y, prev, d)));
  }
}

TEST(ConvFlops, Examples) {
  EXPECT_DOUBLE_EQ(conv_flops(4, 2, 2, 3, 2), 304.0);
  EXPECT_DOUBLE_EQ(conv_flops(1, 1, 1, 1, 1), 2.0);
}

TEST(ConvFlops, MatchesInstrumentedCounters) {
  std::mt19937_64 gen(31);
  std::uniform_int_distribution<Index> pick(1, 5);
  for (int rep = 0; rep < 20; ++rep) {
    const Index c = pick(gen), co = pick(gen), k = 1 + 2 * (pick(gen) % 2);
    const Index stride = 1 + pick(gen) % 2, pad = pick(gen) % 2;
    const Index h = 3 + pick(gen), w = 3 + pick(gen);
    const Tensor x = oracle::random_tensor({1, c, h, w}, gen);
    const Tensor wt = oracle::random_tensor({co, k, k, c}, gen);
    const Tensor b = oracle::random_tensor({co}, gen);
    Index macs = 0, adds = 0;
    oracle::conv_reference(oracle::to_vec(x), 1, c, h, w, oracle::to_vec(wt), oracle::to_vec(b), co,
                           k, stride, pad, &macs, &adds);
    const Index ho = conv_out_size(h, k, stride, pad), wo = conv_out_size(w, k, stride, pad);
    EXPECT_EQ(static_cast<double>(macs + adds), conv_flops(co, ho, wo, k, c)) << "config " << rep;

    sparse::ConvCount count;
    std::vector<double> out(static_cast<std::size_t>(co * ho * wo));
    sparse::conv_loop(x.ptr(), c, h, w, wt, b, stride, pad, {}, {}, out.data(), &count);
    EXPECT_EQ(static_cast<double>(count.total()), conv_flops(co, ho, wo, k, c));
  }
}

TEST(BlockCost, WorkedExample) {
  const std::vector<std::uint8_t> d = {kKeep, kSkip, kReuse, kSkip};
  EXPECT_DOUBLE_EQ(block_cost(d, 2, 2, 304, 100), 252.0);
  EXPECT_DOUBLE_EQ(oracle::block_cost_bruteforce(d, 2, 2, 304, 100), 252.0);
}

TEST(BlockCost, Extremes) {
  const std::vector<std::uint8_t> keep(12, kKeep), skip(12, kSkip);
  EXPECT_DOUBLE_EQ(block_cost(keep, 3, 4, 10, 7), 3 * 17.0);
  EXPECT_DOUBLE_EQ(block_cost(skip, 3, 4, 10, 7), 0.0);
  const std::vector<std::uint8_t> bad = {kKeep, 3};
  EXPECT_THROW(block_cost(bad, 1, 2, 1, 1), ContractError);
}

TEST(BlockCost, MatchesBruteForceAndStaysInBounds) {
  std::mt19937_64 gen(41);
  std::uniform_int_distribution<Index> tdist(1, 6), cdist(1, 8);
  for (int rep = 0; rep < 200; ++rep) {
    const Index T = tdist(gen), c = cdist(gen);
    const auto d = random_trace(gen, T * c);
    const double m = block_cost(d, T, c, 304, 100);
    EXPECT_NEAR(m, oracle::block_cost_bruteforce(d, T, c, 304, 100), 1e-9);
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, T * 404.0);
  }
}

TEST(BlockCost, KeepToSkipNeverIncreasesCostExhaustive) {
  const Index T = 3, c = 2, cells = T * c;
  std::vector<std::uint8_t> d(static_cast<std::size_t>(cells));
  int checked = 0;
  for (int code = 0; code < 729; ++code) {
    int v = code;
    for (auto& x : d) x = static_cast<std::uint8_t>(v % 3), v /= 3;
    const double base = block_cost(d, T, c, 3.0, 5.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] != kKeep) continue;
      auto flipped = d;
      flipped[i] = kSkip;
      EXPECT_LE(block_cost(flipped, T, c, 3.0, 5.0), base);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 729 * 2);  // each of 6 cells is keep in a third of the traces
}

TEST(BlockCostRelaxed, ForwardEqualsHardCost) {
  std::mt19937_64 gen(51);
  std::uniform_int_distribution<Index> tdist(1, 4), cdist(1, 8), ndist(1, 3);
  for (int rep = 0; rep < 100; ++rep) {
    const Index T = tdist(gen), c = cdist(gen), n = ndist(gen);
    const auto d = random_trace(gen, n * T * c);
    double hard = 0.0;
    for (Index s = 0; s < n; ++s) {
      const std::vector<std::uint8_t> clip(d.begin() + s * T * c, d.begin() + (s + 1) * T * c);
      hard += block_cost(clip, T, c, 304, 100);
    }
    hard /= static_cast<double>(n);
    EXPECT_NEAR(block_cost_relaxed(fixed_policy(d).onehot, T, c, 304, 100).item(), hard, 1e-12);
  }
}

TEST(BlockCostRelaxed, GradientReachesLogitsOnSoftPath) {
  std::mt19937_64 gen(52);
  Rng rng(52);
  const Index T = 3, c = 4;
  const Tensor q = oracle::random_tensor({T * c, 3}, gen);
  const Tensor noise = draw_gumbel_noise(T * c, rng);
  auto cost = [&](const Tensor& logits) {
    return block_cost_relaxed(gumbel_softmax(logits, noise, 0.67, SamplePath::soft).onehot, T, c,
                              304, 100);
  };
  Tape tape;
  const Tensor x = tape.watch(q);
  tape.backward(cost(x));
  const auto analytic = oracle::to_vec(tape.grad(x));
  const auto numeric = oracle::numeric_grad(
      [&](const std::vector<std::vector<double>>& v) { return cost(oracle::with_data(q, v[0])).item(); },
      {oracle::to_vec(q)}, 0);
  EXPECT_LT(oracle::rel_err(analytic, numeric), 1e-6);
  double norm = 0.0;
  for (double g : analytic) norm += std::abs(g);
  EXPECT_GT(norm, 1e-3);
}

TEST(BlockCostRelaxed, KeepEverythingValueAndGradientStructure) {
  const Index T = 3, c = 2;
  Tape tape;
  const Tensor onehot = tape.watch(fixed_policy(std::vector<std::uint8_t>(T * c, kKeep)).onehot);
  const Tensor m = block_cost_relaxed(onehot, T, c, 10.0, 6.0);
  EXPECT_DOUBLE_EQ(m.item(), T * 16.0);
  tape.backward(m);
  const Tensor g = tape.grad(onehot);
  for (Index r = 0; r < T * c; ++r) {
    EXPECT_DOUBLE_EQ(g.at(r * 3 + 0), 10.0 / c);
    EXPECT_DOUBLE_EQ(g.at(r * 3 + 1), 0.0);  // (1 - k_prev) vanishes when everything is kept
    EXPECT_DOUBLE_EQ(g.at(r * 3 + 2), -6.0 / c);
  }
}

TEST(GateForward, ZeroPolicyHeadIsDeterministicAllKeep) {
  Rng init(1);
  FusionGate gate;
  gate.policy = make_policy_net("g", 2, 3, 8, init);
  std::mt19937_64 gen(2);
  const Upstream up{oracle::random_tensor({3, 1, 1, 2}, gen), oracle::random_tensor({3}, gen)};
  const Tensor x = oracle::random_tensor({2 * 4, 2, 3, 3}, gen);
  ParamScope scope;
  Rng r1(10), r2(99);
  const GateOutput a = gate_forward(gate, scope, x, 4, up, r1, Mode::eval);
  const GateOutput b = gate_forward(gate, scope, x, 4, up, r2, Mode::eval);
  EXPECT_EQ(a.sample.decisions, std::vector<std::uint8_t>(2 * 4 * 3, kKeep));
  EXPECT_EQ(oracle::to_vec(a.fused), oracle::to_vec(b.fused));
  EXPECT_EQ(oracle::to_vec(a.fused), oracle::to_vec(a.raw));
}

TEST(GateForward, ReuseAtFirstFrameIsZeroAndLaterFramesCopyRawHistory) {
  Rng init(3);
  FusionGate gate;
  gate.policy = make_policy_net("g", 2, 3, 8, init);
  std::mt19937_64 gen(4);
  const Upstream up{oracle::random_tensor({3, 1, 1, 2}, gen), oracle::random_tensor({3}, gen)};
  const Index n = 2, T = 3;
  const Tensor x = oracle::random_tensor({n * T, 2, 2, 2}, gen);
  ParamScope scope;
  Rng rng(5);
  const PolicyOverride all_reuse = [&](const Tensor&) {
    return fixed_policy(std::vector<std::uint8_t>(n * T * 3, kReuse));
  };
  const GateOutput g = gate_forward(gate, scope, x, T, up, rng, Mode::eval, all_reuse);
  const Index per = 3 * 4;
  for (Index s = 0; s < n; ++s) {
    for (Index i = 0; i < per; ++i) EXPECT_EQ(g.fused.at((s * T) * per + i), 0.0);
    for (Index t = 1; t < T; ++t)
      for (Index i = 0; i < per; ++i)
        EXPECT_EQ(g.fused.at((s * T + t) * per + i), g.raw.at((s * T + t - 1) * per + i));
  }
}

TEST(GateForward, EvalModeIgnoresRngAndTrainModeSamples) {
  Rng init(6);
  FusionGate gate;
  gate.policy = make_policy_net("g", 2, 4, 8, init);
  std::mt19937_64 gen(7);
  // Non-zero head so the policy depends on the input.
  gate.policy.fc2.weight.value = oracle::random_tensor(gate.policy.fc2.weight.value.shape(), gen, -3, 3);
  const Upstream up{oracle::random_tensor({4, 1, 1, 2}, gen), oracle::random_tensor({4}, gen)};
  const Tensor x = oracle::random_tensor({6, 2, 2, 2}, gen);
  ParamScope scope;
  Rng a(1), b(2);
  EXPECT_EQ(gate_forward(gate, scope, x, 3, up, a, Mode::eval).sample.decisions,
            gate_forward(gate, scope, x, 3, up, b, Mode::eval).sample.decisions);
  Rng c(1), d(1);
  EXPECT_EQ(gate_forward(gate, scope, x, 3, up, c, Mode::train).sample.decisions,
            gate_forward(gate, scope, x, 3, up, d, Mode::train).sample.decisions);
}
