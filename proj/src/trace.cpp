#include "chanfuse/trace.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

#include "chanfuse/errors.hpp"

namespace chanfuse {

std::array<double, 3> BlockTrace::fractions() const {
  std::array<double, 3> counts{0.0, 0.0, 0.0};
  for (std::uint8_t d : decisions) counts[d] += 1.0;
  const double n = static_cast<double>(decisions.size());
  if (n > 0)
    for (double& c : counts) c /= n;
  return counts;
}

void BlockTrace::validate() const {
  if (static_cast<Index>(decisions.size()) != samples * frames * channels) {
    throw ContractError("trace for block " + std::to_string(block) +
                        " has inconsistent decision count");
  }
  for (std::uint8_t d : decisions) {
    if (d > 2) throw ContractError("trace decision code outside {0,1,2}");
  }
  if (!soft.empty() && soft.size() != 3 * decisions.size()) {
    throw ContractError("trace soft sample length mismatch");
  }
}

void append_trace(PolicyTrace& into, const PolicyTrace& more) {
  if (into.empty()) {
    into = more;
    return;
  }
  if (into.size() != more.size()) throw ContractError("append_trace: block count differs");
  for (std::size_t b = 0; b < into.size(); ++b) {
    BlockTrace& dst = into[b];
    const BlockTrace& src = more[b];
    if (dst.block != src.block || dst.frames != src.frames || dst.channels != src.channels) {
      throw ContractError("append_trace: block layout differs");
    }
    dst.samples += src.samples;
    dst.decisions.insert(dst.decisions.end(), src.decisions.begin(), src.decisions.end());
    if (dst.soft.empty() || src.soft.empty()) {
      dst.soft.clear();
    } else {
      dst.soft.insert(dst.soft.end(), src.soft.begin(), src.soft.end());
    }
  }
}

void write_trace_csv(std::ostream& os, const PolicyTrace& trace, Index sample_offset) {
  for (const BlockTrace& b : trace) {
    for (Index s = 0; s < b.samples; ++s)
      for (Index t = 0; t < b.frames; ++t)
        for (Index c = 0; c < b.channels; ++c) {
          os << b.block << ',' << (s + sample_offset) << ',' << t << ',' << c << ','
             << static_cast<int>(b.at(s, t, c)) << '\n';
        }
  }
}

void write_trace_csv(const std::filesystem::path& path, const PolicyTrace& trace) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "block_id,sample_id,frame,channel,decision\n";
  write_trace_csv(os, trace);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

PolicyTrace read_trace_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line.rfind("block_id,sample_id,frame,channel,decision", 0) != 0) {
    throw FormatError(path.string() + ": unexpected trace header");
  }
  struct Row {
    Index sample, frame, channel;
    int decision;
  };
  std::map<Index, std::vector<Row>> by_block;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Index block = 0;
    Row r{};
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(ls >> block >> c1 >> r.sample >> c2 >> r.frame >> c3 >> r.channel >> c4 >> r.decision) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || r.decision < 0 || r.decision > 2 ||
        r.sample < 0 || r.frame < 0 || r.channel < 0) {
      throw FormatError(path.string() + ": malformed trace row at line " + std::to_string(line_no));
    }
    by_block[block].push_back(r);
  }
  PolicyTrace trace;
  for (auto& [block, rows] : by_block) {
    BlockTrace b;
    b.block = block;
    for (const Row& r : rows) {
      b.samples = std::max(b.samples, r.sample + 1);
      b.frames = std::max(b.frames, r.frame + 1);
      b.channels = std::max(b.channels, r.channel + 1);
    }
    if (static_cast<Index>(rows.size()) != b.samples * b.frames * b.channels) {
      throw FormatError(path.string() + ": block " + std::to_string(block) + " is incomplete");
    }
    b.decisions.assign(rows.size(), 0);
    for (const Row& r : rows) {
      b.decisions[static_cast<std::size_t>((r.sample * b.frames + r.frame) * b.channels +
                                           r.channel)] = static_cast<std::uint8_t>(r.decision);
    }
    trace.push_back(std::move(b));
  }
  return trace;
}

void write_trace_summary(const std::filesystem::path& path, const PolicyTrace& trace) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const BlockTrace& b : trace) {
    const auto f = b.fractions();
    blocks.push_back({{"block_id", b.block},
                      {"samples", b.samples},
                      {"frames", b.frames},
                      {"channels", b.channels},
                      {"keep", f[0]},
                      {"reuse", f[1]},
                      {"skip", f[2]}});
  }
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << nlohmann::json{{"blocks", blocks}}.dump(2) << '\n';
}

}  // namespace chanfuse
