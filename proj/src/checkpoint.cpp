#include "mdist/checkpoint.hpp"

#include <algorithm>
#include <bit>

namespace mdist {

namespace {
constexpr std::string_view kMagic("MDCKPT\0\0", 8);
}

bool CheckpointEntry::operator==(const CheckpointEntry& o) const {
  if (name != o.name || spec != o.spec || rows != o.rows || cols != o.cols) return false;
  if (values.size() != o.values.size()) return false;
  // Bitwise comparison so NaN payloads and signed zeros count.
  return std::equal(values.data(), values.data() + values.size(), o.values.data(),
                    [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); });
}

void Checkpoint::add_network(const std::string& name, const NetworkSpec& spec, const ParamStore& params) {
  entries.push_back({name, spec, params.size(), 1, params.values()});
}

void Checkpoint::add_matrix(const std::string& name, const Mat& m) {
  entries.push_back({name, std::nullopt, m.rows(), m.cols(), Eigen::Map<const Vec>(m.data(), m.size())});
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return true;
  return false;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw Error(ErrorCode::kInvalidArgument, "checkpoint has no entry '" + name + "'");
}

ParamStore Checkpoint::params(const std::string& name) const {
  const auto& e = at(name);
  ParamStore p(e.values.size());
  p.mutable_values() = e.values;
  return p;
}

NetworkSpec Checkpoint::spec(const std::string& name) const {
  const auto& e = at(name);
  if (!e.spec) throw Error(ErrorCode::kInvalidArgument, "entry '" + name + "' is not a network");
  return *e.spec;
}

Mat Checkpoint::matrix(const std::string& name) const {
  const auto& e = at(name);
  return Eigen::Map<const Mat>(e.values.data(), e.rows, e.cols);
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u64(ckpt.seed);
  w.str(ckpt.metadata);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    w.u8(e.spec ? 1 : 0);
    if (e.spec) {
      w.i32(e.spec->input_dim);
      w.i32(e.spec->hidden_dim);
      w.i32(e.spec->hidden_layers);
      w.i32(e.spec->action_dim);
      w.u8(e.spec->recurrent);
      w.u8(e.spec->has_value_head);
      w.u8(static_cast<std::uint8_t>(e.spec->embedding_tap));
    }
    w.u64(static_cast<std::uint64_t>(e.rows));
    w.u64(static_cast<std::uint64_t>(e.cols));
    w.f64s({e.values.data(), static_cast<std::size_t>(e.values.size())});
  }
  w.u64(fnv1a(w.bytes()));
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kMagic.size() + 4 || r.raw(kMagic.size()) != kMagic)
    throw Error(ErrorCode::kCorrupt, "not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version));
  if (bytes.size() < 8 + 12 + 8) throw Error(ErrorCode::kCorrupt, "truncated checkpoint");
  const std::uint64_t stored = ByteReader(bytes.substr(bytes.size() - 8)).u64();
  if (stored != fnv1a(bytes.substr(0, bytes.size() - 8)))
    throw Error(ErrorCode::kCorrupt, "checkpoint checksum mismatch (truncated or modified)");
  Checkpoint ckpt;
  ckpt.seed = r.u64();
  ckpt.metadata = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    if (r.u8()) {
      NetworkSpec s;
      s.input_dim = r.i32();
      s.hidden_dim = r.i32();
      s.hidden_layers = r.i32();
      s.action_dim = r.i32();
      s.recurrent = r.u8() != 0;
      s.has_value_head = r.u8() != 0;
      if (r.u8() != 0) throw Error(ErrorCode::kCorrupt, "unknown embedding tap");
      e.spec = s;
    }
    e.rows = static_cast<Eigen::Index>(r.u64());
    e.cols = static_cast<Eigen::Index>(r.u64());
    if (e.rows < 0 || e.cols < 0 || static_cast<std::size_t>(e.rows * e.cols) * 8 > r.remaining())
      throw Error(ErrorCode::kCorrupt, "entry '" + e.name + "' exceeds file size");
    e.values.resize(e.rows * e.cols);
    r.f64s({e.values.data(), static_cast<std::size_t>(e.values.size())});
    if (e.spec) {
      Eigen::Index expected = -1;
      try {
        expected = Network(*e.spec).num_params();
      } catch (const Error&) {
      }
      if (expected != e.values.size())
        throw Error(ErrorCode::kCorrupt, "entry '" + e.name + "' length does not match its spec");
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (r.remaining() != 8) throw Error(ErrorCode::kCorrupt, "trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

std::uint64_t file_hash(const std::string& path) { return fnv1a(read_file(path)); }

}  // namespace mdist
