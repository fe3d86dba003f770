#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "chanfuse/binary_io.hpp"
#include "chanfuse/checkpoint.hpp"
#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"
#include "chanfuse/train.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace chanfuse;

namespace {

ToyNetConfig tiny_net(Index classes = 2) {
  ToyNetConfig c;
  c.stem_channels = 4;
  c.blocks = {{4, 4, 1}, {4, 8, 2}};
  c.gated = {true, true};
  c.num_classes = classes;
  c.policy_hidden = 8;
  c.seed = 3;
  return c;
}

Dataset tiny_data(Index n, std::uint64_t seed, std::vector<MotionClass> classes = {MotionClass::left, MotionClass::right}) {
  SynthMotionSpec s;
  s.n_samples = n;
  s.seed = seed;
  s.classes = std::move(classes);
  return generate(s);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Sgd, Examples) {
  Parameter p{"p", Tensor({1}, {0.0})};
  std::vector<Parameter*> ps = {&p};
  std::vector<std::vector<double>> vel;
  const std::vector<Tensor> g = {Tensor({1}, {1.0})};
  sgd_step(ps, g, 0.1, 0.0, vel);
  EXPECT_DOUBLE_EQ(p.value.item(), -0.1);

  p.value = Tensor({1}, {0.0});
  vel.clear();
  sgd_step(ps, g, 1.0, 0.9, vel);
  sgd_step(ps, g, 1.0, 0.9, vel);
  EXPECT_DOUBLE_EQ(p.value.item(), -2.9);

  Parameter q{"q", Tensor({2}, {0.5, -0.25})};
  std::vector<Parameter*> qs = {&q};
  std::vector<std::vector<double>> v2;
  sgd_step(qs, std::vector<Tensor>{Tensor::zeros({2})}, 0.3, 0.9, v2);
  EXPECT_EQ(oracle::to_vec(q.value), (std::vector<double>{0.5, -0.25}));
  EXPECT_THROW(sgd_step(qs, std::vector<Tensor>{Tensor::zeros({3})}, 0.3, 0.9, v2), ContractError);
}

TEST(LrSchedule, StepDecay) {
  TrainConfig c;
  c.lr = 0.002;
  c.lr_decay_epochs = {20, 40};
  c.lr_decay_factor = 0.1;
  EXPECT_DOUBLE_EQ(lr_at(0, c), 0.002);
  EXPECT_DOUBLE_EQ(lr_at(19, c), 0.002);
  EXPECT_NEAR(lr_at(20, c), 0.0002, 1e-18);
  EXPECT_NEAR(lr_at(40, c), 0.00002, 1e-18);
  c.lr_decay_epochs.clear();
  EXPECT_DOUBLE_EQ(lr_at(100, c), 0.002);
  EXPECT_THROW(lr_at(-1, c), ContractError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr_decay_epochs = {5, 5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lambda_eff = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<Tensor> g = {Tensor({2}, {3.0, 0.0}), Tensor({1}, {4.0})};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0].at(0), 0.6, 1e-15);
  EXPECT_NEAR(g[1].at(0), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 10.0), 1.0);
  EXPECT_NEAR(g[1].at(0), 0.8, 1e-15);
}

TEST(Loss, LambdaZeroIsCrossEntropyAndSkipCostsNothing) {
  ToyNet net = make_toynet(tiny_net());
  const Dataset d = tiny_data(4, 1);
  const std::vector<Index> idx = {0, 1, 2, 3};
  const VideoBatch b = make_batch(d, idx);
  Rng rng(0);
  ParamScope scope;
  ForwardOptions o;
  o.mode = Mode::train;
  o.rng = &rng;
  const ForwardResult r = forward(net, scope, b.folded(), o);
  const double ce = cross_entropy(r.video_logits, b.labels).item();
  EXPECT_DOUBLE_EQ(loss(r.video_logits, b.labels, r.gate_utils, 0.0).item(), ce);
  double sum_util = 0.0;
  for (const Tensor& u : r.gate_utils) sum_util += u.item();
  EXPECT_NEAR(loss(r.video_logits, b.labels, r.gate_utils, 0.3).item(), ce + 0.3 * sum_util, 1e-14);

  o.baseline.kind = BaselinePolicy::Kind::forced;
  o.baseline.forced = kSkip;
  const ForwardResult s = forward(net, scope, b.folded(), o);
  for (const Tensor& u : s.gate_utils) EXPECT_EQ(u.item(), 0.0);
  EXPECT_DOUBLE_EQ(loss(s.video_logits, b.labels, s.gate_utils, 5.0).item(),
                   cross_entropy(s.video_logits, b.labels).item());
}

TEST(Loss, EfficiencyTermGradientMatchesFiniteDifferences) {
  ToyNet net = make_toynet(tiny_net());
  std::mt19937_64 gen(4);
  for (ResidualBlock& blk : net.blocks) {
    auto& w = blk.gate->policy.fc2.weight.value;
    w = oracle::random_tensor(w.shape(), gen, -1.0, 1.0);
  }
  const Dataset d = tiny_data(2, 2);
  const std::vector<Index> idx = {0, 1};
  const VideoBatch b = make_batch(d, idx);
  const Tensor x = b.folded();
  Rng noise_rng(5);
  const std::vector<Tensor> noise = {draw_gumbel_noise(2 * 8 * 4, noise_rng), draw_gumbel_noise(2 * 8 * 8, noise_rng)};
  const std::vector<int> labels = b.labels;

  // Efficiency term only, as a function of the policy heads. Noise is frozen,
  // so the objective is a fixed function of the weights.
  auto objective = [&](ParamScope& scope) {
    ForwardOptions o;
    o.mode = Mode::train;
    o.noise = &noise;
    o.path = SamplePath::soft;
    const ForwardResult r = forward(net, scope, x, o);
    return sub(loss(r.video_logits, labels, r.gate_utils, 0.5), cross_entropy(r.video_logits, labels));
  };
  std::vector<Parameter*> heads;
  for (ResidualBlock& blk : net.blocks) {
    heads.push_back(&blk.gate->policy.fc2.weight);
    heads.push_back(&blk.gate->policy.fc2.bias);
  }
  Tape tape;
  ParamScope scope(tape);
  tape.backward(objective(scope));
  for (Parameter* p : heads) {
    const auto analytic = oracle::to_vec(scope.grad(*p));
    const Tensor saved = p->value;
    const auto numeric = oracle::numeric_grad(
        [&](const std::vector<std::vector<double>>& v) {
          p->value = oracle::with_data(saved, v[0]);
          ParamScope plain;
          return objective(plain).item();
        },
        {oracle::to_vec(saved)}, 0);
    p->value = saved;
    EXPECT_LT(oracle::rel_err(analytic, numeric), 1e-4) << p->name;
    double norm = 0.0;
    for (double g : analytic) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(Evaluate, SamplingFreeAndHardCostBased) {
  ToyNet net = make_toynet(tiny_net());
  std::mt19937_64 gen(6);
  for (ResidualBlock& blk : net.blocks) {
    auto& w = blk.gate->policy.fc2.weight.value;
    w = oracle::random_tensor(w.shape(), gen, -2.0, 2.0);
  }
  const Dataset d = tiny_data(10, 3);
  EvalOptions o;
  o.batch_size = 4;
  o.collect_trace = true;
  const EvalReport a = evaluate(net, d, o);
  o.seed = 99;
  const EvalReport b = evaluate(net, d, o);
  EXPECT_EQ(a.top1, b.top1);
  EXPECT_EQ(a.mean_util, b.mean_util);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_FALSE(a.top5.has_value());
  EXPECT_NEAR(a.policy_fractions[0] + a.policy_fractions[1] + a.policy_fractions[2], 1.0, 1e-12);

  // Recompute util from the trace with the hard cost.
  double util = 0.0;
  for (std::size_t gi = 0; gi < a.trace.size(); ++gi) {
    const BlockTrace& t = a.trace[gi];
    const FusionGate& gate = *net.blocks[static_cast<std::size_t>(t.block)].gate;
    double s = 0.0;
    for (Index i = 0; i < t.samples; ++i) {
      const std::vector<std::uint8_t> clip(t.decisions.begin() + i * t.frames * t.channels,
                                           t.decisions.begin() + (i + 1) * t.frames * t.channels);
      s += oracle::block_cost_bruteforce(clip, t.frames, t.channels, gate.m_x, gate.m_y) /
           (static_cast<double>(t.frames) * (gate.m_x + gate.m_y));
    }
    util += s / static_cast<double>(t.samples);
  }
  EXPECT_NEAR(a.mean_util, util / static_cast<double>(a.trace.size()), 1e-12);
  EXPECT_GE(a.mean_util, 0.0);
  EXPECT_LE(a.mean_util, 1.0);
}

TEST(Evaluate, TopFiveWithManyClasses) {
  ToyNet net = make_toynet(tiny_net(6));
  const Dataset d = tiny_data(12, 4, {MotionClass::left, MotionClass::right, MotionClass::up,
                                      MotionClass::down, MotionClass::grow, MotionClass::shrink});
  const EvalReport r = evaluate(net, d);
  ASSERT_TRUE(r.top5.has_value());
  EXPECT_LE(r.top1, *r.top5);
  EXPECT_THROW(evaluate(net, tiny_data(4, 1)), ConfigError);
}

TEST(Train, ZeroRateLeavesWeightsAndMetricsUnchanged) {
  ToyNet net = make_toynet(tiny_net());
  const Dataset d = tiny_data(16, 5);
  std::vector<Tensor> before;
  for (const Parameter* p : parameters(net)) before.push_back(p->value);
  std::vector<Tensor> stats;
  for (auto& [name, t] : buffers(net)) stats.push_back(*t);
  const EvalReport init = evaluate(net, d);

  TrainConfig c;
  c.lambda_eff = 0.0;
  c.lr = 0.0;
  c.epochs = 1;
  c.batch_size = 8;
  const TrainResult r = train(net, d, d, c);
  const auto params = parameters(net);
  for (std::size_t i = 0; i < params.size(); ++i)
    EXPECT_EQ(oracle::to_vec(params[i]->value), oracle::to_vec(before[i])) << params[i]->name;
  std::size_t k = 0;
  for (auto& [name, t] : buffers(net)) *t = stats[k++];
  const EvalReport after = evaluate(net, d);
  EXPECT_EQ(after.top1, init.top1);
  EXPECT_EQ(after.mean_util, init.mean_util);
  EXPECT_EQ(after.loss, init.loss);
  ASSERT_EQ(r.history.size(), 1u);
}

TEST(Train, SameSeedSameMetricsLog) {
  const Dataset d = tiny_data(24, 6);
  const Dataset v = tiny_data(8, 7);
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 11;
  const auto dir = oracle::temp_dir("train_determinism");
  for (const char* run : {"a", "b"}) {
    ToyNet net = make_toynet(tiny_net());
    train(net, d, v, c, dir / run, "echo");
  }
  const std::string a = slurp(dir / "a" / "metrics.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.jsonl"));
  EXPECT_EQ(io::read_file((dir / "a" / "checkpoint.afck").string()),
            io::read_file((dir / "b" / "checkpoint.afck").string()));

  std::istringstream lines(a);
  std::string line;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_FALSE(j.contains("top5"));
    const auto& f = j["fractions"];
    EXPECT_NEAR(f["keep"].get<double>() + f["reuse"].get<double>() + f["skip"].get<double>(), 1.0, 1e-9);
    for (const char* key : {"epoch", "train_loss", "top1", "mean_flops", "mean_util"}) EXPECT_TRUE(j.contains(key));
  }
}

TEST(Train, NonFiniteLossIsDiagnosed) {
  ToyNet net = make_toynet(tiny_net());
  net.fc.bias.value = Tensor({2}, {NAN, 0.0});
  const Dataset d = tiny_data(8, 8);
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.lr = 0.05;
  try {
    train(net, d, d, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("lr 0.05"), std::string::npos) << msg;
  }
}

TEST(Train, LossDecreasesOverFirstEpochsForMostSeeds) {
  const Dataset d = tiny_data(96, 20);
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ToyNetConfig nc = tiny_net();
    nc.seed = seed;
    ToyNet net = make_toynet(nc);
    TrainConfig c;
    c.epochs = 5;
    c.batch_size = 16;
    c.seed = seed;
    const TrainResult r = train(net, d, d, c);
    decreased += r.history.back().train_loss < r.history.front().train_loss;
  }
  EXPECT_GE(decreased, 4);
}

TEST(Train, BestCheckpointRestoresEvaluation) {
  const Dataset d = tiny_data(16, 9);
  ToyNet net = make_toynet(tiny_net());
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 8;
  const auto dir = oracle::temp_dir("train_ckpt");
  const TrainResult r = train(net, d, d, c, dir, "cfg");
  ToyNet restored = make_toynet(tiny_net());
  restore_checkpoint(restored, load_checkpoint(dir / "checkpoint.afck"));
  EXPECT_EQ(evaluate(restored, d).top1, r.best.top1);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  ToyNet net = make_toynet(tiny_net());
  std::mt19937_64 gen(10);
  for (Parameter* p : parameters(net)) p->value = oracle::random_tensor(p->value.shape(), gen);
  const Checkpoint ck = make_checkpoint(net, "a=1\nb=2\n");
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_EQ(std::string(bytes.data(), 4), "AFCK");
  EXPECT_EQ(serialize_checkpoint(parse_checkpoint(bytes)), bytes);
  const Checkpoint back = parse_checkpoint(bytes);
  EXPECT_EQ(back.config_echo, "a=1\nb=2\n");

  ToyNet other = make_toynet(tiny_net());
  restore_checkpoint(other, back);
  const auto a = parameters(net), b = parameters(other);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(oracle::to_vec(a[i]->value), oracle::to_vec(b[i]->value));

  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(parse_checkpoint(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut))),
                 FormatError);

  ToyNetConfig wider = tiny_net();
  wider.stem_channels = 5;
  wider.blocks[0].in_channels = 5;
  ToyNet mismatch = make_toynet(wider);
  EXPECT_ANY_THROW(restore_checkpoint(mismatch, back));
}
