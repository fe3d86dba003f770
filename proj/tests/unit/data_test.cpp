#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "chanfuse/binary_io.hpp"
#include "chanfuse/data.hpp"
#include "chanfuse/errors.hpp"
#include "oracles.hpp"

using namespace chanfuse;

namespace {

SynthMotionSpec spec_with(std::vector<MotionClass> classes, Index n, std::uint64_t seed) {
  SynthMotionSpec s;
  s.classes = std::move(classes);
  s.n_samples = n;
  s.seed = seed;
  return s;
}

struct Moments {
  double mass, cx, cy;
};

// Intensity moments of one frame, thresholded to suppress pixel noise.
Moments moments(const Dataset& d, Index sample, Index frame) {
  const Index hw = d.height * d.width;
  const std::uint8_t* p = d.pixels.data() + sample * d.clip_size() + frame * hw;
  Moments m{0, 0, 0};
  for (Index y = 0; y < d.height; ++y)
    for (Index x = 0; x < d.width; ++x) {
      const double v = p[y * d.width + x] > 64 ? p[y * d.width + x] : 0.0;
      m.mass += v;
      m.cx += v * static_cast<double>(x);
      m.cy += v * static_cast<double>(y);
    }
  m.cx /= m.mass;
  m.cy /= m.mass;
  return m;
}

Dataset reversed_frames(const Dataset& d) {
  Dataset r = d;
  const Index frame = d.height * d.width;
  for (Index i = 0; i < d.n; ++i)
    for (Index t = 0; t < d.frames; ++t)
      std::copy_n(d.pixels.begin() + i * d.clip_size() + (d.frames - 1 - t) * frame, frame,
                  r.pixels.begin() + i * d.clip_size() + t * frame);
  return r;
}

}  // namespace

TEST(Generate, SameSeedIsByteIdentical) {
  const auto spec = spec_with({MotionClass::left, MotionClass::right}, 40, 7);
  EXPECT_EQ(serialize_dataset(generate(spec)), serialize_dataset(generate(spec)));
  EXPECT_NE(serialize_dataset(generate(spec)),
            serialize_dataset(generate(spec_with({MotionClass::left, MotionClass::right}, 40, 8))));
}

TEST(Generate, ClassesHaveTheirDefiningMotion) {
  const std::vector<MotionClass> all = {MotionClass::left, MotionClass::right, MotionClass::up,
                                        MotionClass::down, MotionClass::grow,  MotionClass::shrink};
  const Dataset d = generate(spec_with(all, 60, 3));
  for (Index i = 0; i < d.n; ++i) {
    const Moments a = moments(d, i, 0), b = moments(d, i, d.frames - 1);
    switch (static_cast<MotionClass>(d.labels[static_cast<std::size_t>(i)])) {
      case MotionClass::left: EXPECT_LT(b.cx, a.cx - 1.0); break;
      case MotionClass::right: EXPECT_GT(b.cx, a.cx + 1.0); break;
      case MotionClass::up: EXPECT_LT(b.cy, a.cy - 1.0); break;
      case MotionClass::down: EXPECT_GT(b.cy, a.cy + 1.0); break;
      case MotionClass::grow: EXPECT_GT(b.mass, a.mass); break;
      case MotionClass::shrink: EXPECT_LT(b.mass, a.mass); break;
      default: break;
    }
  }
}

TEST(Generate, ReversedLeftClipDriftsRight) {
  const Dataset d = generate(spec_with({MotionClass::left}, 20, 4));
  const Dataset r = reversed_frames(d);
  for (Index i = 0; i < d.n; ++i) {
    for (Index t = 1; t < d.frames; ++t) EXPECT_GE(moments(r, i, t).cx, moments(r, i, t - 1).cx - 0.25);
    EXPECT_GT(moments(r, i, d.frames - 1).cx, moments(r, i, 0).cx + 1.0);
  }
  EXPECT_EQ(reversal_of(MotionClass::left), MotionClass::right);
  EXPECT_EQ(reversal_of(MotionClass::rotate_ccw), MotionClass::rotate_cw);
  EXPECT_EQ(reversal_of(MotionClass::grow), MotionClass::shrink);
}

TEST(Generate, FileSizeFollowsFormat) {
  SynthMotionSpec s = spec_with({MotionClass::left, MotionClass::right}, 100, 1);
  const auto bytes = serialize_dataset(generate(s));
  EXPECT_EQ(bytes.size(), kDatasetHeaderBytes + 100 * 2 + 100 * 8 * 1024);
  EXPECT_EQ(std::string(bytes.data(), 5), "AFSV1");
}

TEST(Generate, BalancedRoundRobinLabels) {
  const Dataset d = generate(spec_with({MotionClass::up, MotionClass::down, MotionClass::grow}, 31, 2));
  std::array<int, 3> counts = {0, 0, 0};
  for (Index i = 0; i < d.n; ++i) {
    EXPECT_EQ(d.labels[static_cast<std::size_t>(i)], i % 3);
    ++counts[d.labels[static_cast<std::size_t>(i)]];
  }
  EXPECT_EQ(counts, (std::array<int, 3>{11, 10, 10}));
  const Dataset even = generate(spec_with({MotionClass::left, MotionClass::right}, 40, 2));
  EXPECT_EQ(std::count(even.labels.begin(), even.labels.end(), 0), 20);
}

TEST(Generate, OrderInvariantClassifierIsNearChance) {
  // Nearest class mean of the time-averaged clip, on a reversal pair.
  const Dataset train = generate(spec_with({MotionClass::left, MotionClass::right}, 400, 10));
  const Dataset test = generate(spec_with({MotionClass::left, MotionClass::right}, 200, 11));
  const Index hw = train.height * train.width;
  auto time_mean = [&](const Dataset& d, Index i) {
    std::vector<double> m(static_cast<std::size_t>(hw), 0.0);
    for (Index t = 0; t < d.frames; ++t)
      for (Index p = 0; p < hw; ++p) m[static_cast<std::size_t>(p)] += d.pixels[static_cast<std::size_t>(i * d.clip_size() + t * hw + p)];
    return m;
  };
  std::array<std::vector<double>, 2> centroid = {std::vector<double>(hw, 0.0), std::vector<double>(hw, 0.0)};
  for (Index i = 0; i < train.n; ++i) {
    const auto m = time_mean(train, i);
    auto& c = centroid[train.labels[static_cast<std::size_t>(i)]];
    for (Index p = 0; p < hw; ++p) c[static_cast<std::size_t>(p)] += m[static_cast<std::size_t>(p)];
  }
  Index correct = 0;
  for (Index i = 0; i < test.n; ++i) {
    const auto m = time_mean(test, i);
    std::array<double, 2> dist = {0, 0};
    for (int k = 0; k < 2; ++k)
      for (Index p = 0; p < hw; ++p) dist[k] += std::pow(m[static_cast<std::size_t>(p)] - centroid[k][static_cast<std::size_t>(p)] / 200.0, 2);
    correct += (dist[1] < dist[0]) == (test.labels[static_cast<std::size_t>(i)] == 1);
  }
  EXPECT_LE(static_cast<double>(correct) / test.n, 0.62);
}

TEST(Generate, InvalidSpecs) {
  SynthMotionSpec s;
  s.height = s.width = 8;
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthMotionSpec{};
  s.classes = {MotionClass::left, MotionClass::left};
  EXPECT_THROW(s.validate(), ConfigError);
  s = SynthMotionSpec{};
  s.noise_std = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  try {
    parse_motion_classes("left,sideways");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("rotate_ccw"), std::string::npos);
  }
}

TEST(DatasetFile, RoundTripIsLossless) {
  const auto dir = oracle::temp_dir("data_roundtrip");
  const SynthMotionSpec spec = spec_with({MotionClass::grow, MotionClass::shrink}, 12, 5);
  const Dataset d = generate(spec);
  write_dataset_files(dir / "d.afsv", spec, d);
  const Dataset back = load_dataset(dir / "d.afsv");
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(d));
  EXPECT_EQ(io::read_file((dir / "d.afsv").string()), serialize_dataset(d));
  std::ifstream manifest(manifest_path(dir / "d.afsv"));
  std::stringstream text;
  text << manifest.rdbuf();
  EXPECT_EQ(text.str(), spec.manifest());
  EXPECT_NE(text.str().find("classes=grow,shrink"), std::string::npos);
}

TEST(DatasetFile, TruncationAndCorruptionAreFormatErrors) {
  const auto bytes = serialize_dataset(generate(spec_with({MotionClass::left, MotionClass::right}, 4, 1)));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, kDatasetHeaderBytes - 1, kDatasetHeaderBytes + 3,
                          bytes.size() - 1}) {
    try {
      parse_dataset(std::vector<char>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)));
      FAIL() << "cut at " << cut;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
    }
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_dataset(bad), FormatError);
  bad = bytes;
  bad[5] = 9;
  EXPECT_THROW(parse_dataset(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(parse_dataset(bad), FormatError);
}

TEST(DatasetReader, StreamsBatchesAndRejectsTruncatedFiles) {
  const auto dir = oracle::temp_dir("data_reader");
  const Dataset d = generate(spec_with({MotionClass::left, MotionClass::right}, 10, 9));
  save_dataset(dir / "ok.afsv", d);
  DatasetReader reader(dir / "ok.afsv");
  std::vector<Index> sizes;
  while (auto b = reader.next(4)) {
    sizes.push_back(b->size());
    EXPECT_EQ(b->clips.shape(), (Shape{b->size(), 8, 1, 32, 32}));
    for (double v : b->clips.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  }
  EXPECT_EQ(sizes, (std::vector<Index>{4, 4, 2}));

  auto bytes = serialize_dataset(d);
  bytes.resize(bytes.size() - 100);
  io::write_file((dir / "cut.afsv").string(), bytes);
  EXPECT_THROW(DatasetReader(dir / "cut.afsv"), FormatError);
}

TEST(VideoBatch, DequantizesAndFolds) {
  const Dataset d = generate(spec_with({MotionClass::up, MotionClass::down}, 3, 1));
  const std::vector<Index> idx = {2, 0};
  const VideoBatch b = make_batch(d, idx);
  EXPECT_EQ(b.labels, (std::vector<int>{0, 0}));
  EXPECT_DOUBLE_EQ(b.clips.at(5), d.pixels[static_cast<std::size_t>(2 * d.clip_size() + 5)] / 255.0);
  EXPECT_EQ(b.folded().shape(), (Shape{16, 1, 32, 32}));
}
