#include "chanfuse/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

#include "chanfuse/binary_io.hpp"
#include "chanfuse/errors.hpp"
#include "chanfuse/rng.hpp"

namespace chanfuse {
namespace {

std::size_t sz(Index n) { return static_cast<std::size_t>(n); }

constexpr std::array<const char*, 8> kClassNames = {"left", "right",  "up",        "down",
                                                    "grow", "shrink", "rotate_cw", "rotate_ccw"};
constexpr char kMagic[5] = {'A', 'F', 'S', 'V', '1'};

enum class ShapeKind { square, circle, triangle };

struct Pose {
  double cx, cy, r, angle;
};

// Geometry limits, in pixels.
constexpr double kMinRadius = 3.0;
constexpr double kMaxRadius = 5.0;
constexpr double kMaxSpeed = 2.0;
constexpr double kMinSpeed = 0.5;
constexpr double kRotRadiusMin = 4.0;
constexpr double kRotRadiusMax = 6.0;
constexpr double kMargin = 1.0;

double max_speed(const SynthMotionSpec& s) {
  if (s.frames < 2) return kMaxSpeed;
  const double room = static_cast<double>(std::min(s.height, s.width)) - 2.0 * (kMaxRadius + kMargin);
  return std::min(kMaxSpeed, room / static_cast<double>(s.frames - 1));
}

double grow_cap(const SynthMotionSpec& s) {
  return std::min(7.0, (static_cast<double>(std::min(s.height, s.width)) - 2.0 * kMargin) / 2.0 - 1.0);
}

double max_growth(const SynthMotionSpec& s) {
  if (s.frames < 2) return 0.5;
  return std::min(0.5, (grow_cap(s) - 3.5) / static_cast<double>(s.frames - 1));
}

bool inside(ShapeKind kind, const Pose& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  switch (kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= p.r * p.r;
    case ShapeKind::square: {
      const double c = std::cos(p.angle), s = std::sin(p.angle);
      const double u = c * dx + s * dy, v = -s * dx + c * dy;
      const double a = 0.75 * p.r;
      return std::abs(u) <= a && std::abs(v) <= a;
    }
    case ShapeKind::triangle: {
      std::array<double, 6> v{};
      for (int k = 0; k < 3; ++k) {
        const double t = p.angle - std::numbers::pi / 2 + 2.0 * std::numbers::pi * k / 3.0;
        v[sz(2 * k)] = p.r * std::cos(t);
        v[sz(2 * k + 1)] = p.r * std::sin(t);
      }
      bool pos = false, neg = false;
      for (int k = 0; k < 3; ++k) {
        const double ax = v[sz(2 * k)], ay = v[sz(2 * k + 1)];
        const double bx = v[sz((2 * k + 2) % 6)], by = v[sz((2 * k + 3) % 6)];
        const double cross = (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
        pos |= cross > 0;
        neg |= cross < 0;
      }
      return !(pos && neg);
    }
  }
  return false;
}

bool is_reversed(MotionClass c) {
  return c == MotionClass::right || c == MotionClass::down || c == MotionClass::shrink ||
         c == MotionClass::rotate_ccw;
}

/// Poses of the forward-time member of the class's reversal pair.
std::vector<Pose> canonical_poses(MotionClass canonical, const SynthMotionSpec& s, Rng& rng,
                                  ShapeKind& kind) {
  const double W = static_cast<double>(s.width), H = static_cast<double>(s.height);
  const Index T = s.frames;
  const double steps = static_cast<double>(T - 1);
  std::vector<Pose> poses(sz(T));
  const double angle0 = rng.uniform(0.0, 2.0 * std::numbers::pi);

  switch (canonical) {
    case MotionClass::left:
    case MotionClass::up: {
      kind = static_cast<ShapeKind>(rng.below(3));
      const double r = rng.uniform(kMinRadius, kMaxRadius);
      const double vmax = max_speed(s);
      const double v = rng.uniform(0.5 * vmax, vmax);
      const double travel = v * steps;
      const bool horizontal = canonical == MotionClass::left;
      const double along_len = horizontal ? W : H;
      const double across_len = horizontal ? H : W;
      const double start = rng.uniform(kMargin + r + travel, along_len - kMargin - r);
      const double across = rng.uniform(kMargin + r, across_len - kMargin - r);
      for (Index t = 0; t < T; ++t) {
        const double along = start - v * static_cast<double>(t);
        poses[sz(t)] = horizontal ? Pose{along, across, r, angle0} : Pose{across, along, r, angle0};
      }
      break;
    }
    case MotionClass::grow: {
      kind = static_cast<ShapeKind>(rng.below(3));
      const double r0 = rng.uniform(2.5, 3.5);
      const double gmax = max_growth(s);
      const double dr = rng.uniform(0.5 * gmax, gmax);
      const double r_end = r0 + dr * steps;
      const double cx = rng.uniform(kMargin + r_end, W - kMargin - r_end);
      const double cy = rng.uniform(kMargin + r_end, H - kMargin - r_end);
      for (Index t = 0; t < T; ++t) poses[sz(t)] = {cx, cy, r0 + dr * static_cast<double>(t), angle0};
      break;
    }
    default: {  // rotate_cw
      kind = rng.below(2) == 0 ? ShapeKind::square : ShapeKind::triangle;
      const double r = rng.uniform(kRotRadiusMin, kRotRadiusMax);
      const double omega = rng.uniform(0.15, 0.3);
      const double cx = rng.uniform(kMargin + r, W - kMargin - r);
      const double cy = rng.uniform(kMargin + r, H - kMargin - r);
      for (Index t = 0; t < T; ++t) poses[sz(t)] = {cx, cy, r, angle0 + omega * static_cast<double>(t)};
      break;
    }
  }
  return poses;
}

void render_clip(MotionClass cls, const SynthMotionSpec& s, Rng& rng, std::uint8_t* out) {
  const MotionClass canonical = is_reversed(cls) ? reversal_of(cls) : cls;
  ShapeKind kind = ShapeKind::circle;
  const std::vector<Pose> poses = canonical_poses(canonical, s, rng, kind);
  const double fg = rng.uniform(0.6, 1.0);
  const Index T = s.frames, H = s.height, W = s.width;
  const Index frame = H * W;
  for (Index t = 0; t < T; ++t) {
    // Reversed classes play the canonical clip backwards.
    const Index dst_t = is_reversed(cls) ? T - 1 - t : t;
    std::uint8_t* dst = out + dst_t * frame;
    const Pose& p = poses[sz(t)];
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        int hits = 0;
        for (double oy : {0.25, 0.75})
          for (double ox : {0.25, 0.75})
            hits += inside(kind, p, static_cast<double>(x) + ox, static_cast<double>(y) + oy) ? 1 : 0;
        double v = fg * hits / 4.0 + s.noise_std * rng.normal();
        v = std::clamp(v, 0.0, 1.0);
        dst[y * W + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  }
}

}  // namespace

std::string to_string(MotionClass c) { return kClassNames[static_cast<std::size_t>(c)]; }

MotionClass parse_motion_class(const std::string& name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i) {
    if (name == kClassNames[i]) return static_cast<MotionClass>(i);
  }
  std::string valid;
  for (const char* n : kClassNames) valid += std::string(valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown class '" + name + "' (valid classes: " + valid + ")");
}

std::vector<MotionClass> parse_motion_classes(const std::string& list) {
  std::vector<MotionClass> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_motion_class(item));
  }
  if (out.empty()) throw ConfigError("class list is empty");
  return out;
}

std::string join_motion_classes(const std::vector<MotionClass>& classes) {
  std::string s;
  for (std::size_t i = 0; i < classes.size(); ++i) s += (i ? "," : "") + to_string(classes[i]);
  return s;
}

MotionClass reversal_of(MotionClass c) {
  const auto i = static_cast<std::uint8_t>(c);
  return static_cast<MotionClass>(i ^ 1u);
}

void SynthMotionSpec::validate() const {
  if (n_samples < 1) throw ConfigError("n_samples must be positive");
  if (frames < 1) throw ConfigError("frames must be positive");
  if (height < 1 || width < 1) throw ConfigError("frame size must be positive");
  if (classes.empty()) throw ConfigError("at least one class is required");
  if (classes.size() > 65535) throw ConfigError("too many classes");
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (std::size_t j = i + 1; j < classes.size(); ++j)
      if (classes[i] == classes[j]) throw ConfigError("duplicate class " + to_string(classes[i]));
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be >= 0");
  const double side = static_cast<double>(std::min(height, width));
  if (side < 2.0 * (kRotRadiusMax + kMargin) + 2.0) {
    throw ConfigError("degenerate geometry: shapes up to radius " + std::to_string(kRotRadiusMax) +
                      " do not fit a " + std::to_string(height) + "x" + std::to_string(width) + " frame");
  }
  if (max_speed(*this) < kMinSpeed) {
    throw ConfigError("degenerate geometry: " + std::to_string(frames) +
                      " frames of motion do not fit a " + std::to_string(height) + "x" +
                      std::to_string(width) + " frame");
  }
  if (max_growth(*this) <= 0.05) {
    throw ConfigError("degenerate geometry: no room for growth over " + std::to_string(frames) + " frames");
  }
}

std::string SynthMotionSpec::manifest() const {
  std::ostringstream os;
  os.precision(17);
  os << "n_samples=" << n_samples << '\n'
     << "frames=" << frames << '\n'
     << "height=" << height << '\n'
     << "width=" << width << '\n'
     << "channels=1\n"
     << "classes=" << join_motion_classes(classes) << '\n'
     << "noise_std=" << noise_std << '\n'
     << "seed=" << seed << '\n';
  return os.str();
}

Dataset generate(const SynthMotionSpec& spec) {
  spec.validate();
  Dataset d;
  d.n = spec.n_samples;
  d.frames = spec.frames;
  d.channels = 1;
  d.height = spec.height;
  d.width = spec.width;
  d.num_classes = static_cast<Index>(spec.classes.size());
  d.labels.resize(sz(d.n));
  d.pixels.resize(sz(d.n * d.clip_size()));
  for (Index i = 0; i < d.n; ++i) {
    const Index label = i % d.num_classes;
    d.labels[sz(i)] = static_cast<std::uint16_t>(label);
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    render_clip(spec.classes[sz(label)], spec, rng, d.pixels.data() + i * d.clip_size());
  }
  return d;
}

Tensor VideoBatch::folded() const {
  const Shape& s = clips.shape();
  return clips.reshape({s[0] * s[1], s[2], s[3], s[4]});
}

VideoBatch make_batch(const Dataset& data, std::span<const Index> indices) {
  const Index clip = data.clip_size();
  Buffer v(sz(static_cast<Index>(indices.size()) * clip));
  VideoBatch b;
  b.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= data.n) throw ContractError("make_batch: sample index out of range");
    const std::uint8_t* src = data.pixels.data() + i * clip;
    double* dst = v.data() + static_cast<Index>(k) * clip;
    for (Index j = 0; j < clip; ++j) dst[j] = static_cast<double>(src[j]) / 255.0;
    b.labels.push_back(data.labels[sz(i)]);
  }
  b.clips = Tensor({static_cast<Index>(indices.size()), data.frames, data.channels, data.height,
                    data.width},
                   std::move(v));
  return b;
}

std::vector<char> serialize_dataset(const Dataset& d) {
  io::Writer w;
  w.bytes(kMagic, 5);
  w.u8(kDatasetVersion);
  for (Index v : {d.n, d.frames, d.channels, d.height, d.width, d.num_classes}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  for (std::uint16_t l : d.labels) w.u16(l);
  w.bytes(d.pixels.data(), d.pixels.size());
  return std::move(w.buffer());
}

Dataset parse_dataset(const std::vector<char>& bytes) {
  io::Reader r(bytes.data(), bytes.size(), "AFSV1");
  char magic[5];
  r.read(magic, 5);
  if (std::memcmp(magic, kMagic, 5) != 0) throw FormatError("AFSV1: bad magic at offset 0");
  const std::uint8_t version = r.u8();
  if (version != kDatasetVersion) {
    throw FormatError("AFSV1: unsupported version " + std::to_string(version) + " at offset 5");
  }
  Dataset d;
  d.n = r.u32();
  d.frames = r.u32();
  d.channels = r.u32();
  d.height = r.u32();
  d.width = r.u32();
  d.num_classes = r.u32();
  if (d.frames == 0 || d.channels == 0 || d.height == 0 || d.width == 0 || d.num_classes == 0) {
    r.fail("zero dimension in header");
  }
  // Check the full size up front so nothing partial is ever returned.
  const std::size_t expected = sz(d.n) * 2 + sz(d.n * d.clip_size());
  if (r.remaining() < expected) {
    throw FormatError("AFSV1: truncated at offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(kDatasetHeaderBytes + expected) + " bytes)");
  }
  if (r.remaining() > expected) {
    throw FormatError("AFSV1: trailing bytes at offset " + std::to_string(kDatasetHeaderBytes + expected));
  }
  d.labels.resize(sz(d.n));
  for (Index i = 0; i < d.n; ++i) {
    const std::size_t at = r.pos();
    d.labels[sz(i)] = r.u16();
    if (d.labels[sz(i)] >= d.num_classes) {
      throw FormatError("AFSV1: label out of range at offset " + std::to_string(at));
    }
  }
  d.pixels.resize(sz(d.n * d.clip_size()));
  r.read(d.pixels.data(), d.pixels.size());
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  io::write_file(path.string(), serialize_dataset(data));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(io::read_file(path.string()));
}

std::filesystem::path manifest_path(const std::filesystem::path& dataset_path) {
  return std::filesystem::path(dataset_path.string() + ".manifest");
}

void write_dataset_files(const std::filesystem::path& path, const SynthMotionSpec& spec,
                         const Dataset& data) {
  save_dataset(path, data);
  const std::string m = spec.manifest();
  io::write_file(manifest_path(path).string(), std::vector<char>(m.begin(), m.end()));
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : data_(load_dataset(path)) {}

std::optional<VideoBatch> DatasetReader::next(Index batch_size) {
  if (batch_size < 1) throw ContractError("DatasetReader: batch size must be positive");
  if (cursor_ >= data_.n) return std::nullopt;
  const Index end = std::min(data_.n, cursor_ + batch_size);
  std::vector<Index> idx;
  for (Index i = cursor_; i < end; ++i) idx.push_back(i);
  cursor_ = end;
  return make_batch(data_, idx);
}

}  // namespace chanfuse
