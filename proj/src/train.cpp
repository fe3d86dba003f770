#include "chanfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>

#include "chanfuse/errors.hpp"
#include "chanfuse/ops.hpp"
#include "json.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

// Rank of the true class among the logits of row i (0 = best). Ties count
// against the true class, so a constant row never scores.
Index label_rank(const double* row, Index k, int label) {
  Index rank = 0;
  for (Index j = 0; j < k; ++j) {
    if (j != label && row[j] >= row[label]) ++rank;
  }
  return rank;
}

double cpu_now() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::vector<Index> range(Index begin, Index end) {
  std::vector<Index> v(sz(end - begin));
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda_eff >= 0.0)) throw ConfigError("train.lambda_eff must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum outside [0, 1)");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] < 0 || (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])) {
      throw ConfigError("train.lr_decay_epochs must be non-negative and strictly increasing");
    }
  }
  if (!(lr_decay_factor > 0.0)) throw ConfigError("train.lr_decay_factor must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(tau > 0.0)) throw ConfigError("train.tau must be > 0");
  if (warmup_epochs < 0) throw ConfigError("train.warmup_epochs must be >= 0");
  if (!(max_cpu_seconds >= 0.0)) throw ConfigError("train.max_cpu_seconds must be >= 0");
  policy.validate();
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["top1"] = top1;
  if (top5) j["top5"] = *top5;
  j["mean_flops"] = mean_flops;
  j["mean_util"] = mean_util;
  j["fractions"] = {{"keep", policy_fractions[0]},
                    {"reuse", policy_fractions[1]},
                    {"skip", policy_fractions[2]}};
  return j.dump();
}

EvalReport evaluate(ToyNet& net, const Dataset& data, const EvalOptions& options) {
  if (data.num_classes != net.config.num_classes) {
    throw ConfigError("evaluate: dataset has " + std::to_string(data.num_classes) +
                      " classes, net expects " + std::to_string(net.config.num_classes));
  }
  if (data.frames != net.config.frames) {
    throw ConfigError("evaluate: dataset clips have " + std::to_string(data.frames) +
                      " frames, net expects " + std::to_string(net.config.frames));
  }
  if (data.n < 1) throw ContractError("evaluate: empty dataset");
  if (options.batch_size < 1) throw ContractError("evaluate: batch_size must be positive");

  Rng rng(options.seed);
  EvalReport report;
  const Index K = data.num_classes;
  Index top1 = 0, top5 = 0;
  double flops = 0.0, util = 0.0, loss_sum = 0.0;
  std::array<double, 3> counts = {0.0, 0.0, 0.0};
  bool gated = false;

  for (Index start = 0; start < data.n; start += options.batch_size) {
    const Index end = std::min(data.n, start + options.batch_size);
    const auto idx = range(start, end);
    const VideoBatch batch = make_batch(data, idx);
    ParamScope scope;
    ForwardOptions fo;
    fo.mode = Mode::eval;
    fo.rng = &rng;
    fo.baseline = options.policy;
    ForwardResult r = forward(net, scope, batch.folded(), fo);

    const Index n = batch.size();
    const double* logits = r.video_logits.ptr();
    for (Index i = 0; i < n; ++i) {
      const Index rank = label_rank(logits + i * K, K, batch.labels[sz(i)]);
      top1 += rank < 1;
      top5 += rank < 5;
    }
    loss_sum += cross_entropy(r.video_logits, batch.labels).item() * static_cast<double>(n);
    flops += r.cost.total_flops * static_cast<double>(n);
    util += r.cost.mean_util * static_cast<double>(n);
    for (const BlockTrace& t : r.trace) {
      gated = true;
      for (std::uint8_t d : t.decisions) counts[d] += 1.0;
    }
    if (options.collect_trace) append_trace(report.trace, r.trace);
  }

  const double n = static_cast<double>(data.n);
  report.samples = data.n;
  report.top1 = static_cast<double>(top1) / n;
  if (K >= 5) report.top5 = static_cast<double>(top5) / n;
  report.mean_flops = flops / n;
  report.mean_util = util / n;
  report.loss = loss_sum / n;
  if (gated) {
    const double total = counts[0] + counts[1] + counts[2];
    for (int i = 0; i < 3; ++i) report.policy_fractions[sz(i)] = counts[sz(i)] / total;
  }
  return report;
}

Tensor loss(const Tensor& video_logits, std::span<const int> labels,
            const std::vector<Tensor>& gate_costs, double lambda_eff) {
  if (lambda_eff < 0.0) throw ContractError("loss: lambda_eff must be >= 0");
  Tensor l = cross_entropy(video_logits, labels);
  if (lambda_eff == 0.0 || gate_costs.empty()) return l;
  Tensor eff = gate_costs[0].reshape({1});
  for (std::size_t i = 1; i < gate_costs.size(); ++i) eff = add(eff, gate_costs[i].reshape({1}));
  return add(l, scale(eff, lambda_eff));
}

void sgd_step(std::span<Parameter* const> params, std::span<const Tensor> grads, double lr,
              double momentum, std::vector<std::vector<double>>& velocity) {
  if (params.size() != grads.size()) {
    throw ContractError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                        std::to_string(grads.size()) + " gradients");
  }
  if (velocity.empty()) velocity.resize(params.size());
  if (velocity.size() != params.size()) throw ContractError("sgd_step: velocity size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    const Tensor& g = grads[i];
    if (g.shape() != p.value.shape()) {
      throw ContractError("sgd_step: gradient " + shape_str(g.shape()) + " for parameter " +
                          p.name + " " + shape_str(p.value.shape()));
    }
    auto& v = velocity[i];
    if (v.empty()) v.assign(sz(p.value.numel()), 0.0);
    Buffer next(p.value.data().begin(), p.value.data().end());
    const double* gd = g.ptr();
    for (std::size_t j = 0; j < next.size(); ++j) {
      v[j] = momentum * v[j] + gd[j];
      next[j] -= lr * v[j];
    }
    p.value = Tensor(p.value.shape(), std::move(next));
  }
}

double lr_at(Index epoch, const TrainConfig& config) {
  if (epoch < 0) throw ContractError("lr_at: negative epoch");
  double lr = config.lr;
  for (Index e : config.lr_decay_epochs) {
    if (e <= epoch) lr *= config.lr_decay_factor;
  }
  return lr;
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) g = scale(g, s);
  }
  return norm;
}

TrainResult train(ToyNet& net, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, const std::optional<std::filesystem::path>& run_dir,
                  const std::string& config_echo, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.num_classes != net.config.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(train_set.num_classes) +
                      " classes, net expects " + std::to_string(net.config.num_classes));
  }
  if (train_set.n < 1) throw ConfigError("train: empty training set");
  for (ResidualBlock& b : net.blocks) {
    if (b.gate) b.gate->tau = config.tau;
  }

  std::ofstream log;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    const auto path = *run_dir / "metrics.jsonl";
    log.open(path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + path.string());
  }

  EvalOptions eval_opt;
  eval_opt.policy = config.policy;
  eval_opt.seed = derive_seed(config.seed, 0xE7A1);

  TrainResult result;
  bool have_best = false;
  std::vector<std::vector<double>> velocity;
  std::vector<Index> order = range(0, train_set.n);
  const double cpu_start = cpu_now();
  double last_epoch_cpu = 0.0;

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    const double epoch_start = cpu_now();
    if (config.max_cpu_seconds > 0.0 &&
        epoch_start - cpu_start + last_epoch_cpu > config.max_cpu_seconds) {
      result.budget_stop = true;
      break;
    }
    const double lr = lr_at(epoch, config);
    const double lambda = epoch < config.warmup_epochs ? 0.0 : config.lambda_eff;
    Rng shuffle_rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (Index i = train_set.n - 1; i > 0; --i) {
      const auto j = static_cast<Index>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[sz(i)], order[sz(j)]);
    }
    Rng sample_rng(derive_seed(config.seed, 0x5A3B0000ULL + static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    Index seen = 0;
    Index batch_no = 0;
    for (Index start = 0; start < train_set.n; start += config.batch_size, ++batch_no) {
      const Index end = std::min(train_set.n, start + config.batch_size);
      const std::span<const Index> idx(order.data() + start, sz(end - start));
      const VideoBatch batch = make_batch(train_set, idx);

      Tape tape;
      ParamScope scope(tape);
      ForwardOptions fo;
      fo.mode = Mode::train;
      fo.rng = &sample_rng;
      fo.baseline = config.policy;
      ForwardResult r = forward(net, scope, batch.folded(), fo);
      const Tensor l = loss(r.video_logits, batch.labels, r.gate_utils, lambda);
      const double lv = l.item();
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", batch " << batch_no << ", lr " << lr;
        throw NumericError(msg.str());
      }
      tape.backward(l);

      const auto params = parameters(net);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const Parameter* p : params) grads.push_back(scope.grad(*p));
      clip_grad_norm(grads, config.grad_clip);
      sgd_step(params, grads, lr, config.momentum, velocity);

      loss_sum += lv * static_cast<double>(batch.size());
      seen += batch.size();
    }

    const EvalReport ev = evaluate(net, val_set, eval_opt);
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.top1 = ev.top1;
    rec.top5 = ev.top5;
    rec.mean_flops = ev.mean_flops;
    rec.mean_util = ev.mean_util;
    rec.policy_fractions = ev.policy_fractions;
    result.history.push_back(rec);
    if (log) {
      log << rec.to_json() << '\n';
      log.flush();
    }
    last_epoch_cpu = cpu_now() - epoch_start;
    result.cpu_seconds = cpu_now() - cpu_start;
    if (on_epoch) on_epoch(rec);
    if (!have_best || rec.top1 > result.best.top1) {
      have_best = true;
      result.best = rec;
      result.best_checkpoint = make_checkpoint(net, config_echo);
      if (run_dir) save_checkpoint(*run_dir / "checkpoint.afck", result.best_checkpoint);
    }
    if (config.target_top1 && rec.top1 >= *config.target_top1) break;
  }
  if (!have_best) result.best_checkpoint = make_checkpoint(net, config_echo);
  return result;
}

}  // namespace chanfuse
