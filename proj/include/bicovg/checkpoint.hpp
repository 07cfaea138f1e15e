#pragma once

// Versioned binary checkpoints.
//
// Layout (all multi-byte values little-endian):
//   magic "BCVG" | version u32 | arch hash u64 | master seed u64
//   params:  count u32, then per record: name (u32 len + bytes),
//            shape 4 x i64, payload f32[elems]
//   norm buffers: same record format (running mean/var of batch-norm blocks)
//   optimizer: kind string ("none" when absent), group count u32, then per
//            group: steps u64, param count u32, slot count u32, and per
//            slot x param a record with an f64 payload
//   fusion:  flag u8, count u32, f64 pre-activations
//
// Parameter payloads are 32-bit per the container contract; optimizer state
// keeps full doubles so a resumed run continues from exactly the moments it
// stopped with. The same file read and rewritten is byte-identical, which is
// what lets `fuse` update the fusion section without touching the rest.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/config.hpp"
#include "bicovg/model.hpp"
#include "bicovg/training.hpp"

namespace bicovg {

constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecordF32 {
  std::string name;
  Shape4 shape;
  std::vector<float> data;
};

struct TensorRecordF64 {
  std::string name;
  Shape4 shape;
  std::vector<double> data;
};

struct OptGroupState {
  std::uint64_t steps = 0;
  std::uint32_t param_count = 0;
  std::uint32_t slot_count = 0;
  std::vector<TensorRecordF64> records;  // slot-major, group param order
};

struct CheckpointDoc {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t arch_hash = 0;
  std::uint64_t seed = 0;
  std::vector<TensorRecordF32> params;
  std::vector<TensorRecordF32> norms;
  std::string opt_kind = "none";
  std::vector<OptGroupState> opt_groups;
  bool has_alpha = false;
  std::vector<double> alpha;
};

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint64_t arch_hash = 0;
  std::uint64_t seed = 0;
};

namespace ckptdetail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    b[i] = static_cast<unsigned char>(
        (static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
  put_bytes(out, b, sizeof(T));
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_le(out, u);
}

inline void put_f64(std::ostream& out, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  put_le(out, u);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_le(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

inline void get_bytes(std::istream& in, void* p, std::size_t n,
                      const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw std::runtime_error(path + ": truncated checkpoint");
}

template <typename T>
T get_le(std::istream& in, const std::string& path) {
  unsigned char b[sizeof(T)];
  get_bytes(in, b, sizeof(T), path);
  std::uint64_t u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(u);
}

inline float get_f32(std::istream& in, const std::string& path) {
  std::uint32_t u = get_le<std::uint32_t>(in, path);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline double get_f64(std::istream& in, const std::string& path) {
  std::uint64_t u = get_le<std::uint64_t>(in, path);
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

inline std::string get_str(std::istream& in, const std::string& path) {
  std::uint32_t len = get_le<std::uint32_t>(in, path);
  if (len > (1u << 16))
    throw std::runtime_error(path + ": implausible string length");
  std::string s(len, '\0');
  get_bytes(in, s.data(), len, path);
  return s;
}

inline Shape4 get_shape(std::istream& in, const std::string& path) {
  Shape4 s;
  s.b = get_le<std::int64_t>(in, path);
  s.c = get_le<std::int64_t>(in, path);
  s.h = get_le<std::int64_t>(in, path);
  s.w = get_le<std::int64_t>(in, path);
  if (s.b <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0 ||
      s.b * s.c * s.h * s.w > (int64_t(1) << 31))
    throw std::runtime_error(path + ": corrupt tensor shape");
  return s;
}

inline void put_shape(std::ostream& out, const Shape4& s) {
  put_le(out, s.b);
  put_le(out, s.c);
  put_le(out, s.h);
  put_le(out, s.w);
}

}  // namespace ckptdetail

inline void write_checkpoint(const std::string& path,
                             const CheckpointDoc& doc) {
  using namespace ckptdetail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  put_bytes(out, "BCVG", 4);
  put_le(out, doc.version);
  put_le(out, doc.arch_hash);
  put_le(out, doc.seed);
  auto put_f32_records = [&](const std::vector<TensorRecordF32>& recs) {
    put_le(out, static_cast<std::uint32_t>(recs.size()));
    for (const TensorRecordF32& r : recs) {
      put_str(out, r.name);
      put_shape(out, r.shape);
      for (float f : r.data) put_f32(out, f);
    }
  };
  put_f32_records(doc.params);
  put_f32_records(doc.norms);
  put_str(out, doc.opt_kind);
  put_le(out, static_cast<std::uint32_t>(doc.opt_groups.size()));
  for (const OptGroupState& g : doc.opt_groups) {
    put_le(out, g.steps);
    put_le(out, g.param_count);
    put_le(out, g.slot_count);
    for (const TensorRecordF64& r : g.records) {
      put_str(out, r.name);
      put_shape(out, r.shape);
      for (double d : r.data) put_f64(out, d);
    }
  }
  put_le(out, static_cast<std::uint8_t>(doc.has_alpha ? 1 : 0));
  put_le(out, static_cast<std::uint32_t>(doc.alpha.size()));
  for (double a : doc.alpha) put_f64(out, a);
  if (!out) throw std::runtime_error(path + ": write failed");
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  using namespace ckptdetail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  get_bytes(in, magic, 4, path);
  if (std::memcmp(magic, "BCVG", 4) != 0)
    throw std::runtime_error(path + ": not a checkpoint (bad magic)");
  CheckpointHeader h;
  h.version = get_le<std::uint32_t>(in, path);
  if (h.version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(h.version));
  h.arch_hash = get_le<std::uint64_t>(in, path);
  h.seed = get_le<std::uint64_t>(in, path);
  return h;
}

inline CheckpointDoc read_checkpoint(const std::string& path) {
  using namespace ckptdetail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  get_bytes(in, magic, 4, path);
  if (std::memcmp(magic, "BCVG", 4) != 0)
    throw std::runtime_error(path + ": not a checkpoint (bad magic)");
  CheckpointDoc doc;
  doc.version = get_le<std::uint32_t>(in, path);
  if (doc.version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(doc.version));
  doc.arch_hash = get_le<std::uint64_t>(in, path);
  doc.seed = get_le<std::uint64_t>(in, path);
  auto get_f32_records = [&](std::vector<TensorRecordF32>& recs) {
    std::uint32_t count = get_le<std::uint32_t>(in, path);
    if (count > (1u << 20))
      throw std::runtime_error(path + ": implausible record count");
    recs.resize(count);
    for (TensorRecordF32& r : recs) {
      r.name = get_str(in, path);
      r.shape = get_shape(in, path);
      r.data.resize(static_cast<std::size_t>(r.shape.elems()));
      for (float& f : r.data) f = get_f32(in, path);
    }
  };
  get_f32_records(doc.params);
  get_f32_records(doc.norms);
  doc.opt_kind = get_str(in, path);
  std::uint32_t groups = get_le<std::uint32_t>(in, path);
  if (groups > (1u << 16))
    throw std::runtime_error(path + ": implausible group count");
  doc.opt_groups.resize(groups);
  for (OptGroupState& g : doc.opt_groups) {
    g.steps = get_le<std::uint64_t>(in, path);
    g.param_count = get_le<std::uint32_t>(in, path);
    g.slot_count = get_le<std::uint32_t>(in, path);
    if (std::uint64_t(g.param_count) * g.slot_count > (1u << 20))
      throw std::runtime_error(path + ": implausible optimizer state size");
    g.records.resize(std::size_t(g.param_count) * g.slot_count);
    for (TensorRecordF64& r : g.records) {
      r.name = get_str(in, path);
      r.shape = get_shape(in, path);
      r.data.resize(static_cast<std::size_t>(r.shape.elems()));
      for (double& d : r.data) d = get_f64(in, path);
    }
  }
  doc.has_alpha = get_le<std::uint8_t>(in, path) != 0;
  std::uint32_t acount = get_le<std::uint32_t>(in, path);
  if (acount > (1u << 16))
    throw std::runtime_error(path + ": implausible fusion head count");
  doc.alpha.resize(acount);
  for (double& a : doc.alpha) a = get_f64(in, path);
  if (in.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(path + ": trailing bytes after checkpoint");
  return doc;
}

namespace ckptdetail {

inline TensorRecordF32 record_from_tensor(const std::string& name,
                                          const Tensor4& t) {
  TensorRecordF32 r;
  r.name = name;
  r.shape = t.shape();
  r.data.resize(static_cast<std::size_t>(t.elems()));
  for (int64_t i = 0; i < t.elems(); ++i)
    r.data[static_cast<std::size_t>(i)] = static_cast<float>(t.flat(i));
  return r;
}

inline void tensor_from_record(const TensorRecordF32& r, Tensor4& dst,
                               const char* what) {
  if (!(dst.shape() == r.shape))
    throw std::runtime_error(std::string("checkpoint: ") + what + " '" +
                             r.name + "' has shape " + r.shape.str() +
                             ", net expects " + dst.shape().str());
  double* p = dst.data();
  for (std::size_t i = 0; i < r.data.size(); ++i)
    p[i] = static_cast<double>(r.data[i]);
}

}  // namespace ckptdetail

// Snapshot of the live network (plus optimizer state when a trainer is
// given, plus fusion pre-activations when available).
inline CheckpointDoc doc_from_net(Network& net, Trainer* trainer = nullptr,
                                  const std::vector<double>* alpha = nullptr) {
  using namespace ckptdetail;
  CheckpointDoc doc;
  doc.arch_hash = arch_hash(net.arch());
  doc.seed = net.seed();
  for (const ParamDesc& d : enumerate_params(net.arch(), net.layout())) {
    int64_t gi;
    ParamId id;
    if (!net.find_param(d.name, gi, id))
      throw std::logic_error("checkpoint: enumerated param '" + d.name +
                             "' missing from net");
    doc.params.push_back(record_from_tensor(d.name, net.group(gi).value(id)));
  }
  for (int64_t b = 0; b < net.layout().num_blocks; ++b) {
    if (net.arch().blocks[static_cast<std::size_t>(b)].norm != NormKind::batch)
      continue;
    const std::string stem = "block" + std::to_string(b);
    doc.norms.push_back(
        record_from_tensor(stem + ".bn_mean", net.net_block(b).bn.mean));
    doc.norms.push_back(
        record_from_tensor(stem + ".bn_var", net.net_block(b).bn.var));
  }
  if (trainer) {
    doc.opt_kind = trainer->optimizer(0).kind();
    for (int64_t gi = 0; gi < net.group_count(); ++gi) {
      GroupOptimizer& opt = trainer->optimizer(gi);
      GradientGroup& g = net.group(gi);
      opt.ensure_state(g);
      OptGroupState gs;
      gs.steps = static_cast<std::uint64_t>(opt.steps_taken());
      gs.param_count = static_cast<std::uint32_t>(g.param_count());
      gs.slot_count = opt.has_second_moment() ? 2 : 1;
      for (std::uint32_t slot = 0; slot < gs.slot_count; ++slot) {
        for (ParamId p = 0; p < g.param_count(); ++p) {
          const Tensor4& t = opt.state(slot, static_cast<std::size_t>(p));
          TensorRecordF64 r;
          r.name = g.param_name(p);
          r.shape = t.shape();
          r.data.resize(static_cast<std::size_t>(t.elems()));
          for (int64_t i = 0; i < t.elems(); ++i)
            r.data[static_cast<std::size_t>(i)] = t.flat(i);
          gs.records.push_back(std::move(r));
        }
      }
      doc.opt_groups.push_back(std::move(gs));
    }
  }
  if (alpha) {
    doc.has_alpha = true;
    doc.alpha = *alpha;
  }
  return doc;
}

// Writes the document's values into a constructed network (and trainer, when
// resuming). Arch hash, every name and every shape must match; partial
// application never happens because all checks run before any write.
inline void apply_doc(const CheckpointDoc& doc, Network& net,
                      Trainer* trainer = nullptr) {
  using namespace ckptdetail;
  if (doc.arch_hash != arch_hash(net.arch()))
    throw std::runtime_error(
        "checkpoint: arch hash mismatch (file " + std::to_string(doc.arch_hash) +
        ", net " + std::to_string(arch_hash(net.arch())) + ")");
  // check phase: nothing in the net changes until everything lines up
  std::vector<ParamDesc> descs = enumerate_params(net.arch(), net.layout());
  if (doc.params.size() != descs.size())
    throw std::runtime_error("checkpoint: holds " +
                             std::to_string(doc.params.size()) +
                             " params, net has " +
                             std::to_string(descs.size()));
  for (std::size_t i = 0; i < descs.size(); ++i) {
    if (doc.params[i].name != descs[i].name)
      throw std::runtime_error("checkpoint: param " + std::to_string(i) +
                               " is '" + doc.params[i].name + "', net expects '" +
                               descs[i].name + "'");
    int64_t gi;
    ParamId id;
    net.find_param(descs[i].name, gi, id);
    if (!(net.group(gi).value(id).shape() == doc.params[i].shape))
      throw std::runtime_error("checkpoint: param '" + descs[i].name +
                               "' has shape " + doc.params[i].shape.str() +
                               ", net expects " +
                               net.group(gi).value(id).shape().str());
  }
  std::vector<int64_t> bn_blocks;
  for (int64_t b = 0; b < net.layout().num_blocks; ++b)
    if (net.arch().blocks[static_cast<std::size_t>(b)].norm == NormKind::batch)
      bn_blocks.push_back(b);
  if (doc.norms.size() != 2 * bn_blocks.size())
    throw std::runtime_error("checkpoint: holds " +
                             std::to_string(doc.norms.size()) +
                             " norm buffers, net has " +
                             std::to_string(2 * bn_blocks.size()));
  for (std::size_t i = 0; i < bn_blocks.size(); ++i) {
    const std::string stem = "block" + std::to_string(bn_blocks[i]);
    const BatchNormState& bn = net.net_block(bn_blocks[i]).bn;
    if (doc.norms[2 * i].name != stem + ".bn_mean" ||
        doc.norms[2 * i + 1].name != stem + ".bn_var")
      throw std::runtime_error("checkpoint: norm buffers for " + stem +
                               " missing or out of order");
    if (!(doc.norms[2 * i].shape == bn.mean.shape()) ||
        !(doc.norms[2 * i + 1].shape == bn.var.shape()))
      throw std::runtime_error("checkpoint: norm buffer shape mismatch for " +
                               stem);
  }
  if (trainer) {
    if (doc.opt_kind != trainer->optimizer(0).kind())
      throw std::runtime_error("checkpoint: optimizer is '" + doc.opt_kind +
                               "', trainer runs '" +
                               trainer->optimizer(0).kind() + "'");
    if (doc.opt_groups.size() != static_cast<std::size_t>(net.group_count()))
      throw std::runtime_error("checkpoint: optimizer state group count "
                               "mismatch");
    for (int64_t gi = 0; gi < net.group_count(); ++gi) {
      const OptGroupState& gs = doc.opt_groups[static_cast<std::size_t>(gi)];
      GroupOptimizer& opt = trainer->optimizer(gi);
      GradientGroup& g = net.group(gi);
      opt.ensure_state(g);
      std::uint32_t slots = opt.has_second_moment() ? 2 : 1;
      if (gs.slot_count != slots ||
          gs.param_count != static_cast<std::uint32_t>(g.param_count()) ||
          gs.records.size() != std::size_t(gs.param_count) * gs.slot_count)
        throw std::runtime_error("checkpoint: optimizer state layout "
                                 "mismatch in group " + std::to_string(gi));
      for (std::uint32_t slot = 0; slot < slots; ++slot) {
        for (ParamId p = 0; p < g.param_count(); ++p) {
          const TensorRecordF64& r =
              gs.records[slot * gs.param_count + static_cast<std::size_t>(p)];
          if (r.name != g.param_name(p))
            throw std::runtime_error("checkpoint: optimizer record '" +
                                     r.name + "' does not match param '" +
                                     g.param_name(p) + "'");
          if (!(opt.state(slot, static_cast<std::size_t>(p)).shape() ==
                r.shape))
            throw std::runtime_error("checkpoint: optimizer record '" +
                                     r.name + "' shape mismatch");
        }
      }
    }
  }

  // write phase: every copy below is already known to fit
  for (std::size_t i = 0; i < descs.size(); ++i) {
    int64_t gi;
    ParamId id;
    net.find_param(descs[i].name, gi, id);
    tensor_from_record(doc.params[i], net.group(gi).mutable_value(id),
                       "param");
  }
  for (std::size_t i = 0; i < bn_blocks.size(); ++i) {
    BatchNormState& bn = net.net_block(bn_blocks[i]).bn;
    tensor_from_record(doc.norms[2 * i], bn.mean, "norm buffer");
    tensor_from_record(doc.norms[2 * i + 1], bn.var, "norm buffer");
  }
  if (trainer) {
    for (int64_t gi = 0; gi < net.group_count(); ++gi) {
      const OptGroupState& gs = doc.opt_groups[static_cast<std::size_t>(gi)];
      GroupOptimizer& opt = trainer->optimizer(gi);
      GradientGroup& g = net.group(gi);
      for (std::uint32_t slot = 0; slot < gs.slot_count; ++slot) {
        for (ParamId p = 0; p < g.param_count(); ++p) {
          const TensorRecordF64& r =
              gs.records[slot * gs.param_count + static_cast<std::size_t>(p)];
          double* pd = opt.state(slot, static_cast<std::size_t>(p)).data();
          for (std::size_t i = 0; i < r.data.size(); ++i) pd[i] = r.data[i];
        }
      }
      opt.set_steps_taken(static_cast<int64_t>(gs.steps));
    }
    trainer->set_step_count(
        doc.opt_groups.empty()
            ? 0
            : static_cast<int64_t>(doc.opt_groups[0].steps));
  }
}

inline void save_checkpoint(const std::string& path, Network& net,
                            Trainer* trainer = nullptr,
                            const std::vector<double>* alpha = nullptr) {
  write_checkpoint(path, doc_from_net(net, trainer, alpha));
}

}  // namespace bicovg
