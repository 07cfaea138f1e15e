#pragma once

// Run configuration: a small INI dialect, validation, and the derived layout
// (group membership, head and adapter placement, spatial bookkeeping).
//
// File format:
//   schema = 1                      required, before any section
//   [arch]    network-level keys
//   [goodness] global encoder ablation switches
//   [block]   one section per block, in depth order
//   [train]   optimizer and schedule
//   [data]    dataset source
// '#' and ';' start comments. Errors carry "origin:line" prefixes.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/blocks.hpp"
#include "bicovg/rng.hpp"

namespace bicovg {

struct TrainConfig {
  std::uint64_t seed = 1;
  int64_t epochs = 20;
  int64_t batch_size = 32;
  std::string optimizer = "sgd";  // sgd | adam | adamw
  double lr = 0.05;
  double lr_end = 5e-4;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double clip_norm = 1.0;
  int64_t warmup_epochs = 0;
  std::string schedule = "standard";  // standard | interleaved
  std::string augment = "none";       // none | crop-flip | crop-flip-jitter
};

struct DataConfig {
  std::string format = "synth";  // idx | raw | synth
  // idx: four paths below; raw: train_images/test_images name manifest
  // files and the label paths stay empty; synth: paths unused
  std::string train_images, train_labels, test_images, test_labels;
  int64_t limit_train = 0;  // 0 = use everything
  int64_t limit_test = 0;
  bool normalize = true;
  int64_t synth_classes = 10;
  int64_t synth_train = 2000;
  int64_t synth_test = 500;
  int64_t synth_size = 28;
  int64_t synth_channels = 1;
  double synth_noise = 0.35;
  int64_t synth_shift = 0;
  std::uint64_t synth_seed = 7;
};

struct ArchConfig {
  std::string name = "unnamed";
  int64_t input_channels = 1;
  int64_t input_size = 28;
  int64_t classes = 10;
  int64_t group_size = 1;  // m: blocks per training group
  int64_t adapter_hidden = 512;
  std::vector<int64_t> boundaries;  // adapter positions when group_size == 1
  bool include_cc = true;
  bool include_multiscale = true;
  std::vector<BlockShape> blocks;
};

struct Config {
  int64_t schema = 0;
  ArchConfig arch;
  TrainConfig train;
  DataConfig data;
};

// Derived placement facts. Heads sit at group exits; adapters sit on the
// carried map after a group exit (all exits but the last when group_size > 1,
// the configured boundary list when every block is its own group).
struct ArchLayout {
  int64_t num_blocks = 0;
  int64_t num_groups = 0;
  std::vector<int64_t> spatial;      // H = W at each block's statistics tap
  std::vector<int64_t> dims;         // goodness vector length per block
  std::vector<int64_t> group_of;     // block -> group
  std::vector<int64_t> group_exit;   // group -> its last block
  std::vector<bool> has_head;        // per block
  std::vector<bool> adapter_after;   // per block: adapter on its output
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] inline void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail(where, "expected a boolean, got '" + v + "'");
}

inline int64_t parse_int(const std::string& v, const std::string& where) {
  try {
    std::size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    fail(where, "expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& where) {
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    fail(where, "expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& v, const std::string& where) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    fail(where, "expected a number, got '" + v + "'");
  }
}

inline std::vector<int64_t> parse_int_list(const std::string& v,
                                           const std::string& where) {
  std::vector<int64_t> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) out.push_back(parse_int(trim(cur), where));
  if (out.empty()) fail(where, "expected a comma-separated integer list");
  return out;
}

inline void set_arch_key(ArchConfig& a, const std::string& k,
                         const std::string& v, const std::string& where) {
  if (k == "name") a.name = v;
  else if (k == "input_channels") a.input_channels = parse_int(v, where);
  else if (k == "input_size") a.input_size = parse_int(v, where);
  else if (k == "classes") a.classes = parse_int(v, where);
  else if (k == "group_size") a.group_size = parse_int(v, where);
  else if (k == "adapter_hidden") a.adapter_hidden = parse_int(v, where);
  else if (k == "boundaries") a.boundaries = parse_int_list(v, where);
  else fail(where, "unknown key '" + k + "' in [arch]");
}

inline void set_goodness_key(ArchConfig& a, const std::string& k,
                             const std::string& v, const std::string& where) {
  if (k == "include_cc") a.include_cc = parse_bool(v, where);
  else if (k == "include_multiscale") a.include_multiscale = parse_bool(v, where);
  else fail(where, "unknown key '" + k + "' in [goodness]");
}

inline void set_block_key(BlockShape& b, const std::string& k,
                          const std::string& v, const std::string& where) {
  if (k == "out_channels") {
    b.out_channels = parse_int(v, where);
    b.goodness.channels = b.out_channels;
  } else if (k == "pool") {
    b.pool = parse_bool(v, where);
  } else if (k == "dropout") {
    b.dropout = parse_double(v, where);
  } else if (k == "norm") {
    try {
      b.norm = norm_kind_from_string(v);
    } catch (const std::invalid_argument& e) {
      fail(where, e.what());
    }
  } else if (k == "scales") {
    auto s = parse_int_list(v, where);
    if (s.size() != 2) fail(where, "scales wants exactly two values, got " +
                                       std::to_string(s.size()));
    b.goodness.scale1 = s[0];
    b.goodness.scale2 = s[1];
  } else if (k == "reduction") {
    b.goodness.reduction = parse_int(v, where);
  } else {
    fail(where, "unknown key '" + k + "' in [block]");
  }
}

inline void set_train_key(TrainConfig& t, const std::string& k,
                          const std::string& v, const std::string& where) {
  if (k == "seed") t.seed = parse_u64(v, where);
  else if (k == "epochs") t.epochs = parse_int(v, where);
  else if (k == "batch_size") t.batch_size = parse_int(v, where);
  else if (k == "optimizer") t.optimizer = v;
  else if (k == "lr") t.lr = parse_double(v, where);
  else if (k == "lr_end") t.lr_end = parse_double(v, where);
  else if (k == "weight_decay") t.weight_decay = parse_double(v, where);
  else if (k == "momentum") t.momentum = parse_double(v, where);
  else if (k == "clip_norm") t.clip_norm = parse_double(v, where);
  else if (k == "warmup_epochs") t.warmup_epochs = parse_int(v, where);
  else if (k == "schedule") t.schedule = v;
  else if (k == "augment") t.augment = v;
  else fail(where, "unknown key '" + k + "' in [train]");
}

inline void set_data_key(DataConfig& d, const std::string& k,
                         const std::string& v, const std::string& where) {
  if (k == "format") d.format = v;
  else if (k == "train_images") d.train_images = v;
  else if (k == "train_labels") d.train_labels = v;
  else if (k == "test_images") d.test_images = v;
  else if (k == "test_labels") d.test_labels = v;
  else if (k == "limit_train") d.limit_train = parse_int(v, where);
  else if (k == "limit_test") d.limit_test = parse_int(v, where);
  else if (k == "normalize") d.normalize = parse_bool(v, where);
  else if (k == "synth_classes") d.synth_classes = parse_int(v, where);
  else if (k == "synth_train") d.synth_train = parse_int(v, where);
  else if (k == "synth_test") d.synth_test = parse_int(v, where);
  else if (k == "synth_size") d.synth_size = parse_int(v, where);
  else if (k == "synth_channels") d.synth_channels = parse_int(v, where);
  else if (k == "synth_noise") d.synth_noise = parse_double(v, where);
  else if (k == "synth_shift") d.synth_shift = parse_int(v, where);
  else if (k == "synth_seed") d.synth_seed = parse_u64(v, where);
  else fail(where, "unknown key '" + k + "' in [data]");
}

}  // namespace cfgdetail

inline Config parse_config_text(const std::string& text,
                                const std::string& origin) {
  using namespace cfgdetail;
  Config c;
  std::string section;  // "" until the first [section]
  bool saw_schema = false;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string where = origin + ":" + std::to_string(line);
    std::size_t cpos = raw.find_first_of("#;");
    if (cpos != std::string::npos) raw = raw.substr(0, cpos);
    std::string s = trim(raw);
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') fail(where, "unterminated section header '" + s + "'");
      section = s.substr(1, s.size() - 2);
      if (section != "arch" && section != "goodness" && section != "block" &&
          section != "train" && section != "data")
        fail(where, "unknown section [" + section + "]");
      if (section == "block") c.arch.blocks.emplace_back();
      continue;
    }
    std::size_t eq = s.find('=');
    if (eq == std::string::npos) fail(where, "expected 'key = value', got '" + s + "'");
    std::string k = trim(s.substr(0, eq));
    std::string v = trim(s.substr(eq + 1));
    if (k.empty()) fail(where, "empty key");
    if (section.empty()) {
      if (k == "schema") {
        c.schema = parse_int(v, where);
        saw_schema = true;
        if (c.schema != 1)
          fail(where, "unsupported schema " + std::to_string(c.schema) +
                          " (this build reads schema 1)");
      } else {
        fail(where, "key '" + k + "' outside any section (only 'schema' may "
                    "appear before the first section)");
      }
      continue;
    }
    if (section == "arch") set_arch_key(c.arch, k, v, where);
    else if (section == "goodness") set_goodness_key(c.arch, k, v, where);
    else if (section == "block") set_block_key(c.arch.blocks.back(), k, v, where);
    else if (section == "train") set_train_key(c.train, k, v, where);
    else if (section == "data") set_data_key(c.data, k, v, where);
  }
  if (!saw_schema) throw std::invalid_argument(origin + ": missing 'schema = 1' line");
  return c;
}

inline Config load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

// Command-line override: "section.key=value", or "block.<i>.key=value" for a
// single block's settings.
inline void apply_override(Config& c, const std::string& kv) {
  using namespace cfgdetail;
  std::string where = "--set " + kv;
  std::size_t eq = kv.find('=');
  if (eq == std::string::npos) fail(where, "expected section.key=value");
  std::string path = trim(kv.substr(0, eq));
  std::string v = trim(kv.substr(eq + 1));
  std::size_t dot = path.find('.');
  if (dot == std::string::npos) fail(where, "expected section.key=value");
  std::string section = path.substr(0, dot);
  std::string rest = path.substr(dot + 1);
  if (section == "arch") set_arch_key(c.arch, rest, v, where);
  else if (section == "goodness") set_goodness_key(c.arch, rest, v, where);
  else if (section == "train") set_train_key(c.train, rest, v, where);
  else if (section == "data") set_data_key(c.data, rest, v, where);
  else if (section == "block") {
    std::size_t d2 = rest.find('.');
    if (d2 == std::string::npos)
      fail(where, "block overrides use block.<index>.<key>");
    int64_t idx = parse_int(rest.substr(0, d2), where);
    if (idx < 0 || idx >= static_cast<int64_t>(c.arch.blocks.size()))
      fail(where, "block index " + std::to_string(idx) + " out of range (have " +
                      std::to_string(c.arch.blocks.size()) + " blocks)");
    set_block_key(c.arch.blocks[static_cast<std::size_t>(idx)],
                  rest.substr(d2 + 1), v, where);
  } else {
    fail(where, "unknown section '" + section + "'");
  }
}

// Wires derived per-block fields, checks every structural constraint, and
// returns the placement facts. Safe to call repeatedly.
inline ArchLayout finalize_arch(ArchConfig& a) {
  using cfgdetail::fail;
  const std::string w = "arch";
  if (a.blocks.empty()) fail(w, "no [block] sections");
  if (a.input_channels <= 0 || a.input_size <= 0)
    fail(w, "input dims must be positive");
  if (a.classes < 2) fail(w, "need at least 2 classes");
  if (a.adapter_hidden < 1) fail(w, "adapter_hidden must be >= 1");
  int64_t L = static_cast<int64_t>(a.blocks.size());
  if (a.group_size < 1 || a.group_size > L)
    fail(w, "group_size " + std::to_string(a.group_size) +
                " out of range for " + std::to_string(L) + " blocks");
  if (L % a.group_size != 0)
    fail(w, "group_size " + std::to_string(a.group_size) +
                " does not divide the block count " + std::to_string(L));

  ArchLayout lay;
  lay.num_blocks = L;
  lay.num_groups = L / a.group_size;
  lay.spatial.resize(L);
  lay.dims.resize(L);
  lay.group_of.resize(L);
  lay.has_head.assign(L, false);
  lay.adapter_after.assign(L, false);

  int64_t prev_c = a.input_channels;
  int64_t sp = a.input_size;
  for (int64_t i = 0; i < L; ++i) {
    BlockShape& b = a.blocks[static_cast<std::size_t>(i)];
    std::string bw = "block " + std::to_string(i);
    b.in_channels = prev_c;
    b.goodness.channels = b.out_channels;
    b.goodness.include_cc = a.include_cc;
    b.goodness.include_multiscale = a.include_multiscale;
    try {
      b.validate();
    } catch (const std::invalid_argument& e) {
      fail(bw, e.what());
    }
    lay.spatial[i] = sp;  // statistics tap sees the pre-pool resolution
    int64_t max_scale = b.goodness.active_scales().back();
    if (max_scale > sp)
      fail(bw, "scale " + std::to_string(max_scale) +
                   " exceeds the feature map size " + std::to_string(sp));
    lay.dims[i] = b.goodness.dim();
    if (b.pool) {
      if (sp % 2 != 0)
        fail(bw, "pool on an odd spatial size " + std::to_string(sp));
      sp /= 2;
    }
    prev_c = b.out_channels;
    lay.group_of[i] = i / a.group_size;
  }

  lay.group_exit.resize(lay.num_groups);
  for (int64_t gi = 0; gi < lay.num_groups; ++gi) {
    lay.group_exit[gi] = (gi + 1) * a.group_size - 1;
    lay.has_head[lay.group_exit[gi]] = true;
  }

  if (a.group_size == 1) {
    int64_t prev = -1;
    for (int64_t bnd : a.boundaries) {
      if (bnd <= prev) fail(w, "boundaries must be strictly increasing");
      if (bnd < 0 || bnd >= L - 1)
        fail(w, "boundary " + std::to_string(bnd) +
                    " out of range [0, " + std::to_string(L - 2) + "]");
      lay.adapter_after[bnd] = true;
      prev = bnd;
    }
  } else {
    for (int64_t gi = 0; gi + 1 < lay.num_groups; ++gi)
      lay.adapter_after[lay.group_exit[gi]] = true;
  }
  return lay;
}

inline ArchLayout finalize(Config& c) {
  using cfgdetail::fail;
  if (c.schema != 1) fail("config", "schema must be 1");
  if (c.train.epochs < 0) fail("train", "epochs must be >= 0");
  if (c.train.batch_size < 1) fail("train", "batch_size must be >= 1");
  if (c.train.optimizer != "sgd" && c.train.optimizer != "adam" &&
      c.train.optimizer != "adamw")
    fail("train", "optimizer must be sgd, adam, or adamw, got '" +
                      c.train.optimizer + "'");
  if (c.train.schedule != "standard" && c.train.schedule != "interleaved")
    fail("train", "schedule must be standard or interleaved, got '" +
                      c.train.schedule + "'");
  if (c.train.augment != "none" && c.train.augment != "crop-flip" &&
      c.train.augment != "crop-flip-jitter")
    fail("train", "augment must be none, crop-flip or crop-flip-jitter, got '" +
                      c.train.augment + "'");
  if (c.train.lr <= 0) fail("train", "lr must be positive");
  if (c.train.clip_norm < 0)
    fail("train", "clip_norm must be >= 0 (0 disables clipping)");
  if (c.train.warmup_epochs < 0) fail("train", "warmup_epochs must be >= 0");
  if (c.data.format != "idx" && c.data.format != "raw" &&
      c.data.format != "synth")
    fail("data", "format must be idx, raw or synth, got '" + c.data.format +
                     "'");
  return finalize_arch(c.arch);
}

// Stable text form of everything that fixes parameter shapes and forward
// semantics; its 64-bit hash guards checkpoint / architecture mismatches.
inline std::string canonical_arch(const ArchConfig& a) {
  char buf[128];
  std::string s = "archfmt 1\n";
  auto num = [&](double d) {
    std::snprintf(buf, sizeof(buf), "%.17g", d);
    return std::string(buf);
  };
  s += "input " + std::to_string(a.input_channels) + " " +
       std::to_string(a.input_size) + " classes " + std::to_string(a.classes) +
       "\n";
  s += "groups " + std::to_string(a.group_size) + " hidden " +
       std::to_string(a.adapter_hidden) + " boundaries";
  for (int64_t b : a.boundaries) s += " " + std::to_string(b);
  s += "\n";
  s += std::string("goodness cc ") + (a.include_cc ? "1" : "0") + " ms " +
       (a.include_multiscale ? "1" : "0") + "\n";
  for (const BlockShape& b : a.blocks) {
    s += "block out " + std::to_string(b.out_channels) + " pool " +
         (b.pool ? "1" : "0") + " dropout " + num(b.dropout) + " norm " +
         to_string(b.norm) + " scales " + std::to_string(b.goodness.scale1) +
         " " + std::to_string(b.goodness.scale2) + " reduction " +
         std::to_string(b.goodness.reduction) + "\n";
  }
  return s;
}

inline std::uint64_t arch_hash(const ArchConfig& a) {
  return fnv1a64(canonical_arch(a));
}

// Writes a config back out in the file format, so a run directory carries
// the fully resolved settings it actually used. Round-trips through the
// parser to the same configuration.
inline std::string dump_config(const Config& c) {
  auto num = [](double d) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", d);
    if (std::stod(buf) != d) std::snprintf(buf, sizeof(buf), "%.17g", d);
    return std::string(buf);
  };
  auto onoff = [](bool b) { return b ? "true" : "false"; };
  std::ostringstream o;
  o << "schema = " << c.schema << "\n\n";
  const ArchConfig& a = c.arch;
  o << "[arch]\n";
  o << "name = " << a.name << "\n";
  o << "input_channels = " << a.input_channels << "\n";
  o << "input_size = " << a.input_size << "\n";
  o << "classes = " << a.classes << "\n";
  o << "group_size = " << a.group_size << "\n";
  o << "adapter_hidden = " << a.adapter_hidden << "\n";
  if (!a.boundaries.empty()) {
    o << "boundaries = ";
    for (std::size_t i = 0; i < a.boundaries.size(); ++i)
      o << (i ? "," : "") << a.boundaries[i];
    o << "\n";
  }
  o << "\n[goodness]\n";
  o << "include_cc = " << onoff(a.include_cc) << "\n";
  o << "include_multiscale = " << onoff(a.include_multiscale) << "\n";
  for (const BlockShape& b : a.blocks) {
    o << "\n[block]\n";
    o << "out_channels = " << b.out_channels << "\n";
    o << "pool = " << onoff(b.pool) << "\n";
    o << "dropout = " << num(b.dropout) << "\n";
    o << "norm = " << to_string(b.norm) << "\n";
    o << "scales = " << b.goodness.scale1 << "," << b.goodness.scale2 << "\n";
    o << "reduction = " << b.goodness.reduction << "\n";
  }
  const TrainConfig& t = c.train;
  o << "\n[train]\n";
  o << "seed = " << t.seed << "\n";
  o << "epochs = " << t.epochs << "\n";
  o << "batch_size = " << t.batch_size << "\n";
  o << "optimizer = " << t.optimizer << "\n";
  o << "lr = " << num(t.lr) << "\n";
  o << "lr_end = " << num(t.lr_end) << "\n";
  o << "weight_decay = " << num(t.weight_decay) << "\n";
  o << "momentum = " << num(t.momentum) << "\n";
  o << "clip_norm = " << num(t.clip_norm) << "\n";
  o << "warmup_epochs = " << t.warmup_epochs << "\n";
  o << "schedule = " << t.schedule << "\n";
  o << "augment = " << t.augment << "\n";
  const DataConfig& d = c.data;
  o << "\n[data]\n";
  o << "format = " << d.format << "\n";
  if (!d.train_images.empty()) o << "train_images = " << d.train_images << "\n";
  if (!d.train_labels.empty()) o << "train_labels = " << d.train_labels << "\n";
  if (!d.test_images.empty()) o << "test_images = " << d.test_images << "\n";
  if (!d.test_labels.empty()) o << "test_labels = " << d.test_labels << "\n";
  if (d.limit_train) o << "limit_train = " << d.limit_train << "\n";
  if (d.limit_test) o << "limit_test = " << d.limit_test << "\n";
  o << "normalize = " << onoff(d.normalize) << "\n";
  if (d.format == "synth") {
    o << "synth_classes = " << d.synth_classes << "\n";
    o << "synth_train = " << d.synth_train << "\n";
    o << "synth_test = " << d.synth_test << "\n";
    o << "synth_size = " << d.synth_size << "\n";
    o << "synth_channels = " << d.synth_channels << "\n";
    o << "synth_noise = " << num(d.synth_noise) << "\n";
    o << "synth_shift = " << d.synth_shift << "\n";
    o << "synth_seed = " << d.synth_seed << "\n";
  }
  return o.str();
}

}  // namespace bicovg
