#include <gtest/gtest.h>

#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"
#include "oracles.hpp"

using namespace chanfuse;

namespace {

using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Analytic gradient of sum(op(x) * w) from the tape against central
// differences of the same objective, worst input.
double op_grad_error(const OpFn& op, const std::vector<Tensor>& inputs, std::mt19937_64& gen) {
  const Tensor probe = op(inputs);
  const Tensor w = oracle::random_tensor(probe.shape(), gen);

  Tape tape;
  std::vector<Tensor> watched;
  for (const Tensor& t : inputs) watched.push_back(tape.watch(t));
  tape.backward(sum(mul(op(watched), w)));

  auto objective = [&](const std::vector<std::vector<double>>& xs) {
    std::vector<Tensor> ts;
    for (std::size_t k = 0; k < xs.size(); ++k) ts.push_back(oracle::with_data(inputs[k], xs[k]));
    const Tensor y = op(ts);
    double s = 0.0;
    for (Index i = 0; i < y.numel(); ++i) s += y.at(i) * w.at(i);
    return s;
  };
  std::vector<std::vector<double>> xs;
  for (const Tensor& t : inputs) xs.push_back(oracle::to_vec(t));

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto numeric = oracle::numeric_grad(objective, xs, k);
    worst = std::max(worst, oracle::rel_err(oracle::to_vec(tape.grad(watched[k])), numeric));
  }
  return worst;
}

struct Case {
  const char* name;
  std::vector<Shape> shapes;
  OpFn op;
  double lo = -1.0, hi = 1.0;
};

std::vector<Case> primitive_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& in) { return add(in[0], in[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](auto& in) { return sub(in[0], in[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](auto& in) { return mul(in[0], in[1]); }},
      {"mul_scalar", {{3, 4}, {1}}, [](auto& in) { return mul(in[0], in[1]); }},
      {"relu", {{3, 4}}, [](auto& in) { return relu(in[0]); }, 0.1, 1.0},
      {"relu_neg", {{3, 4}}, [](auto& in) { return relu(in[0]); }, -1.0, -0.1},
      {"exp", {{3, 4}}, [](auto& in) { return exp(in[0]); }},
      {"log", {{3, 4}}, [](auto& in) { return log(in[0]); }, 0.5, 2.0},
      {"scale", {{5}}, [](auto& in) { return scale(in[0], -2.5); }},
      {"matmul", {{3, 4}, {4, 2}}, [](auto& in) { return matmul(in[0], in[1]); }},
      {"sum", {{2, 3}}, [](auto& in) { return sum(in[0]); }},
      {"mean", {{2, 3}}, [](auto& in) { return mean(in[0]); }},
      {"select_last", {{4, 3}}, [](auto& in) { return select_last(in[0], 1); }},
      {"concat_cols", {{3, 2}, {3, 4}}, [](auto& in) { return concat_cols(in[0], in[1]); }},
      {"softmax_last", {{4, 3}}, [](auto& in) { return softmax_last(in[0]); }},
      {"log_softmax_last", {{4, 3}}, [](auto& in) { return log_softmax_last(in[0]); }},
      {"time_shift_fwd", {{6, 2}}, [](auto& in) { return time_shift(in[0], 3, 1); }},
      {"time_shift_back", {{6, 2}}, [](auto& in) { return time_shift(in[0], 3, -1); }},
      {"frame_mean", {{6, 2}}, [](auto& in) { return frame_mean(in[0], 3); }},
  };
}

}  // namespace

TEST(Elementwise, ReluForwardAndGradient) {
  Tape tape;
  const Tensor x = tape.watch(Tensor({2}, {-1.0, 2.0}));
  const Tensor y = relu(x);
  EXPECT_EQ(oracle::to_vec(y), (std::vector<double>{0.0, 2.0}));
  tape.backward(sum(y));
  EXPECT_EQ(oracle::to_vec(tape.grad(x)), (std::vector<double>{0.0, 1.0}));
}

TEST(Elementwise, AddAndLogExp) {
  EXPECT_EQ(oracle::to_vec(add(Tensor({2}, {1, 2}), Tensor({2}, {3, 4}))),
            (std::vector<double>{4, 6}));
  EXPECT_NEAR(log(exp(Tensor({1}, {0.5}))).item(), 0.5, 1e-12);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_str({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_str({3, 2})), std::string::npos) << msg;
  }
}

TEST(Matmul, Examples) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(oracle::to_vec(matmul(eye, m)), oracle::to_vec(m));
  EXPECT_EQ(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item(), 11.0);
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientAgainstFiniteDifferences) {
  std::mt19937_64 gen(3);
  const std::vector<Tensor> in = {oracle::random_tensor({3, 4}, gen),
                                  oracle::random_tensor({4, 2}, gen)};
  EXPECT_LT(op_grad_error([](auto& v) { return matmul(v[0], v[1]); }, in, gen), 1e-6);
}

TEST(Backward, Examples) {
  {
    Tape tape;
    const Tensor x = tape.watch(Tensor({3}, {1, 2, 3}));
    tape.backward(sum(mul(x, x)));
    EXPECT_EQ(oracle::to_vec(tape.grad(x)), (std::vector<double>{2, 4, 6}));
  }
  {
    Tape tape;
    const Tensor x = tape.watch(Tensor({2}, {-5, 5}));
    tape.backward(sum(relu(x)));
    EXPECT_EQ(oracle::to_vec(tape.grad(x)), (std::vector<double>{0, 1}));
  }
}

TEST(Backward, Errors) {
  Tape tape;
  const Tensor x = tape.watch(Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
  EXPECT_THROW(tape.backward(sum(x).detach()), ContractError);
  const Tensor l = sum(x);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), ContractError);
  tape.reset();
  const Tensor x2 = tape.watch(Tensor({2}, {1, 2}));
  tape.backward(sum(x2));
  EXPECT_EQ(oracle::to_vec(tape.grad(x2)), (std::vector<double>{1, 1}));
}

TEST(Backward, TopologicalOrderAndSingleVisit) {
  Tape tape;
  const Tensor x = tape.watch(Tensor({1}, {3.0}));
  const Tensor y = mul(x, x);
  const Tensor z = add(y, y);  // y feeds z twice
  tape.backward(sum(z));
  EXPECT_EQ(tape.num_ops(), 3u);
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 12.0);
}

TEST(Backward, AccumulationIsLinear) {
  std::mt19937_64 gen(5);
  const Tensor a = oracle::random_tensor({4}, gen);
  auto grad_of = [&](int which) {
    Tape tape;
    const Tensor x = tape.watch(a);
    const Tensor f = sum(exp(x));
    const Tensor g = sum(mul(x, x));
    tape.backward(which == 0 ? f : which == 1 ? g : add(f, g));
    return oracle::to_vec(tape.grad(x));
  };
  const auto f = grad_of(0), g = grad_of(1), fg = grad_of(2);
  for (std::size_t i = 0; i < fg.size(); ++i) EXPECT_NEAR(fg[i], f[i] + g[i], 1e-14);
}

TEST(Primitives, GradientsMatchFiniteDifferencesOnTenInstances) {
  for (const Case& c : primitive_cases()) {
    std::mt19937_64 gen(100);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<Tensor> in;
      for (const Shape& s : c.shapes) in.push_back(oracle::random_tensor(s, gen, c.lo, c.hi));
      worst = std::max(worst, op_grad_error(c.op, in, gen));
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}

TEST(Primitives, DoNotMutateInputs) {
  std::mt19937_64 gen(9);
  for (const Case& c : primitive_cases()) {
    std::vector<Tensor> in;
    for (const Shape& s : c.shapes) in.push_back(oracle::random_tensor(s, gen, c.lo, c.hi));
    std::vector<std::vector<double>> before;
    for (const Tensor& t : in) before.push_back(oracle::to_vec(t));
    Tape tape;
    std::vector<Tensor> watched;
    for (const Tensor& t : in) watched.push_back(tape.watch(t));
    tape.backward(sum(c.op(watched)));
    for (std::size_t k = 0; k < in.size(); ++k) {
      EXPECT_EQ(oracle::to_vec(in[k]), before[k]) << c.name;
      EXPECT_EQ(oracle::to_vec(watched[k]), before[k]) << c.name;
    }
  }
}

TEST(Primitives, StraightThroughRoutesGradientToSoft) {
  Tape tape;
  const Tensor soft = tape.watch(Tensor({3}, {0.2, 0.5, 0.3}));
  const Tensor hard({3}, {0.0, 1.0, 0.0});
  const Tensor st = straight_through(hard, soft);
  EXPECT_EQ(oracle::to_vec(st), oracle::to_vec(hard));
  tape.backward(sum(mul(st, Tensor({3}, {1.0, 2.0, 3.0}))));
  EXPECT_EQ(oracle::to_vec(tape.grad(soft)), (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(Primitives, SoftmaxStableAtLargeLogits) {
  const Tensor p = softmax_last(Tensor({1, 2}, {1000.0, 0.0}));
  EXPECT_DOUBLE_EQ(p.at(0), 1.0);
  EXPECT_TRUE(std::isfinite(log_softmax_last(Tensor({1, 2}, {1000.0, 0.0})).at(1)));
}

TEST(Tensor, ReshapeKeepsDataAndRejectsBadCounts) {
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(oracle::to_vec(t.reshape({3, 2})), oracle::to_vec(t));
  EXPECT_THROW(t.reshape({4}), DimensionError);
  EXPECT_THROW(Tensor({2}, {1.0}), DimensionError);
}
