#include "chanfuse/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "chanfuse/errors.hpp"

namespace chanfuse {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("invalid value '" + raw + "' for " + key);
  }
  return v;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + f(v[i]);
  return s;
}

std::string fmt_dist(const std::array<double, 3>& d) {
  return fmt(d[0]) + "," + fmt(d[1]) + "," + fmt(d[2]);
}

std::uint8_t parse_decision(const std::string& key, const std::string& s) {
  if (s == "keep") return kKeep;
  if (s == "reuse") return kReuse;
  if (s == "skip") return kSkip;
  throw ConfigError("invalid value '" + s + "' for " + key + " (valid: keep, reuse, skip)");
}

std::string decision_name(std::uint8_t d) {
  static const char* names[] = {"keep", "reuse", "skip"};
  return names[d];
}

struct Entry {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using Table = std::map<std::string, Entry>;

using PolicyRef = BaselinePolicy& (*)(RunConfig&);

void add_policy_keys(Table& t, const std::string& prefix, PolicyRef ref) {
  auto cref = [ref](const RunConfig& c) -> const BaselinePolicy& {
    return ref(const_cast<RunConfig&>(c));
  };
  t[prefix + ".policy"] = {[=](RunConfig& c, const std::string& v) { ref(c).kind = parse_policy_kind(v); },
                           [=](const RunConfig& c) { return to_string(cref(c).kind); }};
  t[prefix + ".dist"] = {[=](RunConfig& c, const std::string& v) { ref(c).dist = parse_distribution(v); },
                         [=](const RunConfig& c) { return fmt_dist(cref(c).dist); }};
  const std::string ratio_key = prefix + ".keep_ratio";
  t[ratio_key] = {[=](RunConfig& c, const std::string& v) { ref(c).keep_ratio = parse_number<double>(ratio_key, v); },
                  [=](const RunConfig& c) { return fmt(cref(c).keep_ratio); }};
  const std::string forced_key = prefix + ".forced";
  t[forced_key] = {[=](RunConfig& c, const std::string& v) { ref(c).forced = parse_decision(forced_key, trim(v)); },
                   [=](const RunConfig& c) { return decision_name(cref(c).forced); }};
}

// Shorthand for scalar fields.
template <typename T, typename Owner>
Entry scalar(const std::string& key, Owner RunConfig::*section, T Owner::*field) {
  Entry e;
  e.set = [=](RunConfig& c, const std::string& v) { (c.*section).*field = parse_number<T>(key, v); };
  e.get = [=](const RunConfig& c) {
    if constexpr (std::is_floating_point_v<T>) {
      return fmt((c.*section).*field);
    } else {
      return std::to_string((c.*section).*field);
    }
  };
  return e;
}

const Table& table() {
  static const Table t = [] {
    Table t;
    using D = SynthMotionSpec;
    using M = ToyNetConfig;
    using Tr = TrainConfig;
    using E = EvalOptions;
    t["data.n_samples"] = scalar<Index, D>("data.n_samples", &RunConfig::data, &D::n_samples);
    t["data.frames"] = scalar<Index, D>("data.frames", &RunConfig::data, &D::frames);
    t["data.height"] = scalar<Index, D>("data.height", &RunConfig::data, &D::height);
    t["data.width"] = scalar<Index, D>("data.width", &RunConfig::data, &D::width);
    t["data.noise_std"] = scalar<double, D>("data.noise_std", &RunConfig::data, &D::noise_std);
    t["data.seed"] = scalar<std::uint64_t, D>("data.seed", &RunConfig::data, &D::seed);
    t["data.classes"] = {
        [](RunConfig& c, const std::string& v) { c.data.classes = parse_motion_classes(v); },
        [](const RunConfig& c) { return join_motion_classes(c.data.classes); }};

    t["model.in_channels"] = scalar<Index, M>("model.in_channels", &RunConfig::model, &M::in_channels);
    t["model.stem_channels"] = scalar<Index, M>("model.stem_channels", &RunConfig::model, &M::stem_channels);
    t["model.policy_hidden"] = scalar<Index, M>("model.policy_hidden", &RunConfig::model, &M::policy_hidden);
    t["model.shift_fraction"] = scalar<double, M>("model.shift_fraction", &RunConfig::model, &M::shift_fraction);
    t["model.seed"] = scalar<std::uint64_t, M>("model.seed", &RunConfig::model, &M::seed);
    t["model.variant"] = {[](RunConfig& c, const std::string& v) { c.model.variant = parse_variant(trim(v)); },
                          [](const RunConfig& c) { return to_string(c.model.variant); }};
    t["model.blocks"] = {
        [](RunConfig& c, const std::string& v) {
          std::vector<BlockSpec> blocks;
          for (const std::string& item : split(v, ',')) {
            const auto parts = split(item, ':');
            if (parts.size() != 3) {
              throw ConfigError("invalid block '" + item + "' for model.blocks (expected in:out:stride)");
            }
            blocks.push_back({parse_number<Index>("model.blocks", parts[0]),
                              parse_number<Index>("model.blocks", parts[1]),
                              parse_number<Index>("model.blocks", parts[2])});
          }
          c.model.blocks = blocks;
          if (c.model.gated.size() != blocks.size()) c.model.gated.assign(blocks.size(), true);
        },
        [](const RunConfig& c) {
          return join<BlockSpec>(c.model.blocks, [](const BlockSpec& b) {
            return std::to_string(b.in_channels) + ":" + std::to_string(b.out_channels) + ":" +
                   std::to_string(b.stride);
          });
        }};
    t["model.gated"] = {
        [](RunConfig& c, const std::string& v) {
          std::vector<bool> g;
          for (const std::string& item : split(v, ',')) {
            if (item != "0" && item != "1") throw ConfigError("invalid flag '" + item + "' for model.gated (use 0 or 1)");
            g.push_back(item == "1");
          }
          c.model.gated = g;
        },
        [](const RunConfig& c) {
          std::string s;
          for (std::size_t i = 0; i < c.model.gated.size(); ++i) s += (i ? ",": "") + std::string(c.model.gated[i] ? "1" : "0");
          return s;
        }};

    // One temperature drives the gates in training and at rest.
    Entry tau;
    tau.set = [](RunConfig& c, const std::string& v) {
      c.model.tau = c.train.tau = parse_number<double>("gate.tau", v);
    };
    tau.get = [](const RunConfig& c) { return fmt(c.train.tau); };
    t["gate.tau"] = tau;
    t["train.tau"] = tau;

    t["train.lambda_eff"] = scalar<double, Tr>("train.lambda_eff", &RunConfig::train, &Tr::lambda_eff);
    t["train.lr"] = scalar<double, Tr>("train.lr", &RunConfig::train, &Tr::lr);
    t["train.momentum"] = scalar<double, Tr>("train.momentum", &RunConfig::train, &Tr::momentum);
    t["train.epochs"] = scalar<Index, Tr>("train.epochs", &RunConfig::train, &Tr::epochs);
    t["train.lr_decay_factor"] = scalar<double, Tr>("train.lr_decay_factor", &RunConfig::train, &Tr::lr_decay_factor);
    t["train.batch_size"] = scalar<Index, Tr>("train.batch_size", &RunConfig::train, &Tr::batch_size);
    t["train.seed"] = scalar<std::uint64_t, Tr>("train.seed", &RunConfig::train, &Tr::seed);
    t["train.grad_clip"] = scalar<double, Tr>("train.grad_clip", &RunConfig::train, &Tr::grad_clip);
    t["train.warmup_epochs"] = scalar<Index, Tr>("train.warmup_epochs", &RunConfig::train, &Tr::warmup_epochs);
    t["train.max_cpu_seconds"] = scalar<double, Tr>("train.max_cpu_seconds", &RunConfig::train, &Tr::max_cpu_seconds);
    t["train.lr_decay_epochs"] = {
        [](RunConfig& c, const std::string& v) {
          std::vector<Index> e;
          for (const std::string& item : split(v, ',')) e.push_back(parse_number<Index>("train.lr_decay_epochs", item));
          c.train.lr_decay_epochs = e;
        },
        [](const RunConfig& c) {
          return join<Index>(c.train.lr_decay_epochs, [](const Index& e) { return std::to_string(e); });
        }};
    t["train.target_top1"] = {
        [](RunConfig& c, const std::string& v) {
          if (trim(v) == "none") {
            c.train.target_top1.reset();
          } else {
            c.train.target_top1 = parse_number<double>("train.target_top1", v);
          }
        },
        [](const RunConfig& c) { return c.train.target_top1 ? fmt(*c.train.target_top1) : std::string("none"); }};
    add_policy_keys(t, "train", [](RunConfig& c) -> BaselinePolicy& { return c.train.policy; });
    add_policy_keys(t, "eval", [](RunConfig& c) -> BaselinePolicy& { return c.eval.policy; });
    t["eval.batch_size"] = scalar<Index, E>("eval.batch_size", &RunConfig::eval, &E::batch_size);
    t["eval.seed"] = scalar<std::uint64_t, E>("eval.seed", &RunConfig::eval, &E::seed);
    return t;
  }();
  return t;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = table().find(key);
  if (it == table().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, e] : table()) out.push_back(key);
    return out;
  }();
  return k;
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::filesystem::filesystem_error("cannot read config", path, std::make_error_code(std::errc::no_such_file_or_directory));
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_text(ss.str(), path.string());
}

std::string RunConfig::echo() const {
  std::string s;
  for (const auto& [key, e] : table()) s += key + "=" + e.get(*this) + "\n";
  return s;
}

ToyNetConfig RunConfig::resolved_model() const {
  ToyNetConfig m = model;
  m.num_classes = static_cast<Index>(data.classes.size());
  m.frames = data.frames;
  m.tau = train.tau;
  return m;
}

void RunConfig::validate() const {
  data.validate();
  resolved_model().validate();
  if (model.in_channels != 1) throw ConfigError("model.in_channels must be 1 for SynthMotion clips");
  train.validate();
  eval.policy.validate();
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be positive");
}

std::array<double, 3> parse_distribution(const std::string& s) {
  const auto parts = split(s, ',');
  if (parts.size() != 3) throw ConfigError("distribution '" + s + "' must have three entries keep,reuse,skip");
  std::array<double, 3> d;
  for (std::size_t i = 0; i < 3; ++i) d[i] = parse_number<double>("dist", parts[i]);
  double total = 0.0;
  for (double p : d) {
    if (!(p >= 0.0)) throw ConfigError("distribution '" + s + "' has a negative entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("distribution '" + s + "' does not sum to 1");
  return d;
}

BaselinePolicy::Kind parse_policy_kind(const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "learned" || s == "none") return BaselinePolicy::Kind::none;
  if (s == "random") return BaselinePolicy::Kind::random;
  if (s == "threshold") return BaselinePolicy::Kind::threshold;
  if (s == "forced") return BaselinePolicy::Kind::forced;
  throw ConfigError("unknown policy '" + s + "' (valid: learned, random, threshold, forced)");
}

std::string to_string(BaselinePolicy::Kind k) {
  switch (k) {
    case BaselinePolicy::Kind::none: return "learned";
    case BaselinePolicy::Kind::random: return "random";
    case BaselinePolicy::Kind::threshold: return "threshold";
    case BaselinePolicy::Kind::forced: return "forced";
  }
  return "?";
}

}  // namespace chanfuse
