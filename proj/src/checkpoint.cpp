#include "chanfuse/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <map>

#include "chanfuse/binary_io.hpp"

namespace chanfuse {

namespace io {

std::vector<char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

}  // namespace io

namespace {
constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
}

Checkpoint make_checkpoint(ToyNet& net, std::string config_echo) {
  Checkpoint c;
  c.config_echo = std::move(config_echo);
  for (Parameter* p : parameters(net)) c.blobs.push_back({p->name, p->value});
  for (auto& [name, t] : buffers(net)) c.blobs.push_back({name, *t});
  return c;
}

void restore_checkpoint(ToyNet& net, const Checkpoint& ckpt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& b : ckpt.blobs) {
    if (!by_name.emplace(b.name, &b.value).second) throw FormatError("checkpoint: duplicate blob " + b.name);
  }
  std::size_t used = 0;
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing blob " + name);
    if (it->second->shape() != dst.shape()) {
      throw FormatError("checkpoint: blob " + name + " has shape " + shape_str(it->second->shape()) +
                        ", expected " + shape_str(dst.shape()));
    }
    dst = *it->second;
    ++used;
  };
  for (Parameter* p : parameters(net)) take(p->name, p->value);
  for (auto& [name, t] : buffers(net)) take(name, *t);
  if (used != by_name.size()) throw FormatError("checkpoint: contains blobs the network does not have");
}

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt) {
  io::Writer w;
  w.bytes(kMagic, 4);
  w.u8(kCheckpointVersion);
  w.str(ckpt.config_echo);
  w.u32(static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    w.str(b.name);
    w.u32(static_cast<std::uint32_t>(b.value.rank()));
    for (Index d : b.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : b.value.data()) w.f64(v);
  }
  return std::move(w.buffer());
}

Checkpoint parse_checkpoint(const std::vector<char>& bytes) {
  io::Reader r(bytes.data(), bytes.size(), "checkpoint");
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0");
  }
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at offset 4");
  }
  Checkpoint c;
  c.config_echo = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Checkpoint::Blob b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("invalid rank " + std::to_string(rank));
    Shape shape(rank);
    Index n = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail("zero dimension");
      n *= d;
    }
    r.need(static_cast<std::size_t>(n) * 8);
    Buffer data(static_cast<std::size_t>(n));
    r.read(data.data(), data.size() * 8);
    b.value = Tensor(std::move(shape), std::move(data));
    c.blobs.push_back(std::move(b));
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file(path.string(), serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path.string()));
}

}  // namespace chanfuse
