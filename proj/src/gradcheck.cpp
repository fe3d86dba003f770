#include "chanfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "chanfuse/errors.hpp"
#include "chanfuse/gating.hpp"
#include "chanfuse/layers.hpp"
#include "chanfuse/model.hpp"
#include "chanfuse/ops.hpp"
#include "chanfuse/rng.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

Tensor uniform(Shape shape, double lo, double hi, Rng& rng) {
  Buffer v(sz(numel_of(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Magnitudes in [lo, hi] with random sign: keeps kinks out of FD reach.
Tensor signed_away_from_zero(Shape shape, double lo, double hi, Rng& rng) {
  Buffer v(sz(numel_of(shape)));
  for (double& x : v) x = (rng.uniform_open() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

double objective(const Tensor& out, const Tensor& w) {
  double s = 0.0;
  for (Index i = 0; i < out.numel(); ++i) s += out.at(i) * w.at(i);
  return s;
}

struct Case {
  std::string op;
  GradFn fn;
  std::vector<Tensor> inputs;
  std::vector<bool> check;
};

// One gated residual block behind a stem, small enough to perturb every weight.
struct TinyNet {
  ToyNet net;
  Tensor clips;
  std::vector<int> labels;
  std::vector<Tensor> noise;
};

TinyNet make_tiny(Rng& rng) {
  ToyNetConfig cfg;
  cfg.stem_channels = 3;
  cfg.blocks = {{3, 4, 2}};
  cfg.gated = {true};
  cfg.variant = Variant::gated;
  cfg.num_classes = 3;
  cfg.frames = 3;
  cfg.policy_hidden = 5;
  cfg.seed = 11;
  TinyNet t;
  t.net = make_toynet(cfg);
  // Non-zero policy head so the policy gradient is exercised from the start.
  for (Parameter* p : parameters(t.net)) {
    if (p->name.find(".gate.") != std::string::npos) p->value = uniform(p->value.shape(), -0.8, 0.8, rng);
  }
  const Index n = 2;
  t.clips = uniform({n * cfg.frames, 1, 6, 6}, 0.0, 1.0, rng);
  t.labels = {0, 2};
  t.noise.push_back(draw_gumbel_noise(n * cfg.frames * 4, rng));
  return t;
}

// Inputs: clips, then every parameter in order.
GradFn tiny_loss(const TinyNet& tiny, SamplePath path) {
  return [tiny, path](const std::vector<Tensor>& in) {
    ToyNet net = tiny.net;
    auto params = parameters(net);
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = in[i + 1];
    ParamScope scope;
    ForwardOptions fo;
    fo.mode = Mode::train;
    fo.noise = &tiny.noise;
    fo.path = path;
    ForwardResult r = forward(net, scope, in[0], fo);
    Tensor l = cross_entropy(r.video_logits, tiny.labels);
    return add(l, scale(r.relaxed_util, 0.5));
  };
}

std::vector<Tensor> tiny_inputs(const TinyNet& tiny) {
  std::vector<Tensor> in = {tiny.clips};
  for (const Parameter* p : parameters(tiny.net)) in.push_back(p->value);
  return in;
}

std::vector<Case> build_cases(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 77));
  std::vector<Case> cases;
  auto u = [&](Shape s, double lo = -1.0, double hi = 1.0) { return uniform(std::move(s), lo, hi, rng); };

  cases.push_back({"add", [](const auto& in) { return add(in[0], in[1]); }, {u({3, 4}), u({3, 4})}, {}});
  cases.push_back({"sub", [](const auto& in) { return sub(in[0], in[1]); }, {u({3, 4}), u({3, 4})}, {}});
  cases.push_back({"mul",
                   [](const auto& in) { return add(mul(in[0], in[1]), mul(in[0], in[2])); },
                   {u({3, 4}), u({3, 4}), u({1})},
                   {}});
  cases.push_back({"relu", [](const auto& in) { return relu(in[0]); },
                   {signed_away_from_zero({4, 5}, 0.1, 1.0, rng)}, {}});
  cases.push_back({"exp", [](const auto& in) { return exp(in[0]); }, {u({3, 4})}, {}});
  cases.push_back({"log", [](const auto& in) { return log(in[0]); }, {u({3, 4}, 0.5, 2.0)}, {}});
  cases.push_back({"scale", [](const auto& in) { return scale(in[0], -1.7); }, {u({5})}, {}});
  cases.push_back({"add_scalar", [](const auto& in) { return add_scalar(in[0], 0.3); }, {u({5})}, {}});
  cases.push_back({"matmul", [](const auto& in) { return matmul(in[0], in[1]); }, {u({3, 4}), u({4, 2})}, {}});
  cases.push_back({"sum", [](const auto& in) { return sum(in[0]); }, {u({2, 3, 2})}, {}});
  cases.push_back({"mean", [](const auto& in) { return mean(in[0]); }, {u({2, 3, 2})}, {}});
  cases.push_back({"select_last", [](const auto& in) { return select_last(in[0], 1); }, {u({4, 3})}, {}});
  cases.push_back({"concat_cols", [](const auto& in) { return concat_cols(in[0], in[1]); }, {u({3, 2}), u({3, 4})}, {}});
  cases.push_back({"softmax_last", [](const auto& in) { return softmax_last(in[0]); }, {u({4, 3}, -2.0, 2.0)}, {}});
  cases.push_back({"log_softmax_last", [](const auto& in) { return log_softmax_last(in[0]); }, {u({4, 3}, -2.0, 2.0)}, {}});
  cases.push_back({"time_shift",
                   [](const auto& in) { return add(time_shift(in[0], 3, 1), scale(time_shift(in[0], 3, -1), 0.5)); },
                   {u({6, 2, 2, 2})},
                   {}});
  cases.push_back({"frame_mean", [](const auto& in) { return frame_mean(in[0], 4); }, {u({8, 3})}, {}});
  cases.push_back({"conv2d", [](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); },
                   {u({2, 3, 5, 5}), u({4, 3, 3, 3}), u({4})},
                   {}});
  cases.push_back({"batch_norm_train",
                   [](const auto& in) { return batch_norm_train(in[0], in[1], in[2], 1e-5); },
                   {u({3, 2, 3, 3}), u({2}, 0.5, 1.5), u({2})},
                   {}});
  {
    const Buffer mu = {0.1, -0.2}, var = {0.8, 1.3};
    cases.push_back({"batch_norm_eval",
                     [mu, var](const auto& in) { return batch_norm_eval(in[0], in[1], in[2], mu, var, 1e-5); },
                     {u({3, 2, 2, 2}), u({2}, 0.5, 1.5), u({2})},
                     {}});
  }
  cases.push_back({"global_avg_pool", [](const auto& in) { return global_avg_pool(in[0]); }, {u({2, 3, 4, 4})}, {}});
  cases.push_back({"linear", [](const auto& in) { return linear(in[1], in[2], in[0]); }, {u({4, 5}), u({3, 5}), u({3})}, {}});
  cases.push_back({"cross_entropy",
                   [](const auto& in) {
                     const std::vector<int> labels = {2, 0, 1, 2};
                     return cross_entropy(in[0], labels);
                   },
                   {u({4, 3}, -2.0, 2.0)},
                   {}});
  cases.push_back({"temporal_shift", [](const auto& in) { return temporal_shift(in[0], 4, 0.25); }, {u({8, 8, 2, 2})}, {}});
  cases.push_back({"channel_scale", [](const auto& in) { return channel_scale(in[0], in[1]); }, {u({3, 2, 3, 3}), u({3, 2})}, {}});
  {
    PolicyNet pn = make_policy_net("p", 3, 2, 5, rng);
    pn.fc2.weight.value = u(pn.fc2.weight.value.shape());
    cases.push_back({"policy_logits",
                     [pn](const auto& in) {
                       PolicyNet p = pn;
                       p.fc1.weight.value = in[2];
                       p.fc1.bias.value = in[3];
                       p.fc2.weight.value = in[4];
                       p.fc2.bias.value = in[5];
                       ParamScope scope;
                       return policy_logits(p, scope, in[0], in[1]);
                     },
                     {u({4, 3}), u({4, 3}), pn.fc1.weight.value, pn.fc1.bias.value, pn.fc2.weight.value,
                      pn.fc2.bias.value},
                     {}});
  }
  {
    const Tensor noise = draw_gumbel_noise(5, rng);
    cases.push_back({"gumbel_softmax",
                     [noise](const auto& in) { return gumbel_softmax(in[0], noise, 0.67, SamplePath::soft).onehot; },
                     {u({5, 3}, -2.0, 2.0)},
                     {}});
  }
  cases.push_back({"fuse", [](const auto& in) { return fuse(in[0], in[1], in[2]); },
                   {u({2, 3, 2, 2}), u({2, 3, 2, 2}), u({6, 3}, 0.0, 1.0)},
                   {}});
  cases.push_back({"block_cost_relaxed",
                   [](const auto& in) { return block_cost_relaxed(softmax_last(in[0]), 3, 2, 7.0, 5.0); },
                   {u({12, 3}, -2.0, 2.0)},
                   {}});

  const TinyNet tiny = make_tiny(rng);
  const auto inputs = tiny_inputs(tiny);
  cases.push_back({"gated_block", tiny_loss(tiny, SamplePath::soft), inputs, {}});
  // The hard forward is flat in everything that only reaches the loss through
  // the policy (input, stem, policy net), so those are left out here.
  std::vector<bool> backbone(inputs.size(), false);
  const auto params = parameters(tiny.net);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params[i]->name;
    backbone[i + 1] = name.rfind("stem.", 0) != 0 && name.find(".gate.") == std::string::npos;
  }
  cases.push_back({"gated_block_straight_through", tiny_loss(tiny, SamplePath::straight_through), inputs,
                   backbone});
  return cases;
}

}  // namespace

double gradient_error(const GradFn& fn, const std::vector<Tensor>& inputs,
                      const std::vector<bool>& check, double step, std::uint64_t seed) {
  if (!check.empty() && check.size() != inputs.size()) {
    throw ContractError("gradient_error: check mask does not match inputs");
  }
  auto checked = [&](std::size_t k) { return check.empty() || check[k]; };

  Tape tape;
  std::vector<Tensor> watched;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    watched.push_back(checked(k) ? tape.watch(inputs[k]) : inputs[k]);
  }
  const Tensor out = fn(watched);
  Rng rng(seed);
  const Tensor w = uniform(out.shape(), -1.0, 1.0, rng);
  const Tensor loss = sum(mul(out, w));
  tape.backward(loss);

  double max_diff = 0.0, max_mag = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!checked(k)) continue;
    const Tensor analytic = tape.grad(watched[k]);
    for (Index i = 0; i < inputs[k].numel(); ++i) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> in = inputs;
        Buffer v(inputs[k].data().begin(), inputs[k].data().end());
        v[sz(i)] += delta;
        in[k] = Tensor(inputs[k].shape(), std::move(v));
        return objective(fn(in), w);
      };
      const double numeric = (eval_at(step) - eval_at(-step)) / (2.0 * step);
      const double a = analytic.at(i);
      max_diff = std::max(max_diff, std::abs(a - numeric));
      max_mag = std::max({max_mag, std::abs(a), std::abs(numeric)});
    }
  }
  if (!std::isfinite(max_diff)) return max_diff;
  return max_mag > 0.0 ? max_diff / max_mag : max_diff;
}

std::vector<std::string> gradcheck_ops() {
  std::vector<std::string> names;
  for (const Case& c : build_cases(0)) names.push_back(c.op);
  return names;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
  std::vector<Case> cases = build_cases(options.seed);
  if (!options.corrupt.empty()) {
    auto it = std::find_if(cases.begin(), cases.end(), [&](const Case& c) { return c.op == options.corrupt; });
    if (it == cases.end()) throw ConfigError("gradcheck: no registered op named '" + options.corrupt + "'");
    // Same forward value, backward scaled by 1.01.
    GradFn inner = it->fn;
    it->fn = [inner](const std::vector<Tensor>& in) {
      const Tensor y = inner(in);
      return straight_through(y, scale(y, 1.01));
    };
  }
  std::vector<GradcheckResult> results;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = cases[i];
    GradcheckResult r;
    r.op = c.op;
    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
      if (c.check.empty() || c.check[k]) r.elements += c.inputs[k].numel();
    }
    r.max_rel_err = gradient_error(c.fn, c.inputs, c.check, options.step, derive_seed(options.seed, i));
    r.passed = r.max_rel_err < options.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace chanfuse
