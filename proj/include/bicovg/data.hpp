#pragma once

// Dataset handling: IDX container load/save, raw-blob manifests, a synthetic
// corpus generator, normalization, and batch assembly.
//
// The backing store is a plain float vector, deliberately outside the tensor
// allocation ledger: peak-memory measurements of a run report engine tensors,
// not the dataset copy.
//
// IDX files: big-endian header [0, 0, dtype, ndims] then one u32 per dim.
// Readers accept ubyte (0x08, scaled by 1/255) and float32 (0x0D) images with
// 3 dims (N,H,W) or 4 dims (N,C,H,W), and ubyte labels with 1 dim. The writer
// emits float32 4-dim images and ubyte labels.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bicovg/config.hpp"
#include "bicovg/rng.hpp"
#include "bicovg/tensor.hpp"

namespace bicovg {

struct Dataset {
  int64_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> images;  // n*c*h*w row-major
  std::vector<int> labels;
  int64_t classes = 0;

  int64_t sample_elems() const { return c * h * w; }
  void check() const {
    if (n <= 0 || c <= 0 || h <= 0 || w <= 0)
      throw std::invalid_argument("dataset: empty or malformed dims");
    if (static_cast<int64_t>(images.size()) != n * sample_elems())
      throw std::invalid_argument("dataset: image buffer size mismatch");
    if (static_cast<int64_t>(labels.size()) != n)
      throw std::invalid_argument("dataset: label count mismatch");
    for (int lbl : labels)
      if (lbl < 0 || lbl >= classes)
        throw std::invalid_argument("dataset: label " + std::to_string(lbl) +
                                    " outside [0, " + std::to_string(classes) +
                                    ")");
  }
};

namespace idxdetail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error(path + ": truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

inline float read_bef32(std::istream& in, const std::string& path) {
  std::uint32_t u = read_be32(in, path);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline void write_bef32(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  write_be32(out, u);
}

}  // namespace idxdetail

inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  using namespace idxdetail;
  Dataset d;
  {
    std::ifstream in(images_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + images_path + "'");
    std::uint32_t magic = read_be32(in, images_path);
    std::uint32_t dtype = (magic >> 8) & 0xff;
    std::uint32_t ndims = magic & 0xff;
    if ((magic >> 16) != 0)
      throw std::runtime_error(images_path + ": bad magic");
    if (dtype != 0x08 && dtype != 0x0D)
      throw std::runtime_error(images_path + ": unsupported element type " +
                               std::to_string(dtype));
    if (ndims != 3 && ndims != 4)
      throw std::runtime_error(images_path + ": expected 3 or 4 dims, got " +
                               std::to_string(ndims));
    std::vector<int64_t> dims;
    for (std::uint32_t i = 0; i < ndims; ++i)
      dims.push_back(read_be32(in, images_path));
    d.n = dims[0];
    d.c = ndims == 4 ? dims[1] : 1;
    d.h = dims[ndims - 2];
    d.w = dims[ndims - 1];
    int64_t total = d.n * d.c * d.h * d.w;
    d.images.resize(static_cast<std::size_t>(total));
    if (dtype == 0x08) {
      std::vector<unsigned char> raw(static_cast<std::size_t>(total));
      in.read(reinterpret_cast<char*>(raw.data()), total);
      if (!in) throw std::runtime_error(images_path + ": truncated pixel data");
      for (int64_t i = 0; i < total; ++i)
        d.images[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(i)] / 255.0f;
    } else {
      for (int64_t i = 0; i < total; ++i)
        d.images[static_cast<std::size_t>(i)] = read_bef32(in, images_path);
    }
  }
  {
    std::ifstream in(labels_path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + labels_path + "'");
    std::uint32_t magic = read_be32(in, labels_path);
    if (magic != 0x00000801)
      throw std::runtime_error(labels_path + ": not a ubyte label file");
    int64_t n = read_be32(in, labels_path);
    if (n != d.n)
      throw std::runtime_error(labels_path + ": " + std::to_string(n) +
                               " labels for " + std::to_string(d.n) + " images");
    std::vector<unsigned char> raw(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(raw.data()), n);
    if (!in) throw std::runtime_error(labels_path + ": truncated labels");
    d.labels.resize(static_cast<std::size_t>(n));
    int maxl = 0;
    for (int64_t i = 0; i < n; ++i) {
      d.labels[static_cast<std::size_t>(i)] = raw[static_cast<std::size_t>(i)];
      maxl = std::max(maxl, d.labels[static_cast<std::size_t>(i)]);
    }
    d.classes = maxl + 1;
  }
  d.check();
  return d;
}

inline void save_idx(const Dataset& d, const std::string& images_path,
                     const std::string& labels_path) {
  using namespace idxdetail;
  d.check();
  if (d.classes > 256)
    throw std::invalid_argument("save_idx: ubyte labels cap classes at 256");
  {
    std::ofstream out(images_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + images_path + "'");
    write_be32(out, 0x00000D04);  // float32, 4 dims
    write_be32(out, static_cast<std::uint32_t>(d.n));
    write_be32(out, static_cast<std::uint32_t>(d.c));
    write_be32(out, static_cast<std::uint32_t>(d.h));
    write_be32(out, static_cast<std::uint32_t>(d.w));
    for (float f : d.images) write_bef32(out, f);
    if (!out) throw std::runtime_error("short write to '" + images_path + "'");
  }
  {
    std::ofstream out(labels_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + labels_path + "'");
    write_be32(out, 0x00000801);
    write_be32(out, static_cast<std::uint32_t>(d.n));
    for (int l : d.labels) {
      unsigned char b = static_cast<unsigned char>(l);
      out.write(reinterpret_cast<char*>(&b), 1);
    }
    if (!out) throw std::runtime_error("short write to '" + labels_path + "'");
  }
}

// ---- synthetic corpus ----
//
// Each class gets a prototype: a coarse random field upsampled bilinearly to
// the target resolution, then scaled to unit mean-square energy so that class
// identity lives in spatial layout rather than gross magnitude. Samples are
// prototype + i.i.d. Gaussian pixel noise. Train and test share prototypes
// (stream "synth-proto") but draw noise from split-specific streams.

// ---- raw little-endian blobs with a text manifest ----
//
// The manifest is a flat key = value file ('#' comments allowed):
//   images = train.bin      (path relative to the manifest)
//   labels = train-lbl.bin
//   dtype = f32 | u8        (u8 pixels are scaled by 1/255)
//   count / channels / height / width = dims
//   classes = 10            (optional; default max label + 1)
// The image blob holds count*channels*height*width little-endian values in
// row-major order; the label blob holds count bytes.

inline Dataset load_raw_manifest(const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error(manifest_path + ": cannot open manifest");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(mf, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(manifest_path + ":" + std::to_string(lineno) +
                               ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (!kv.emplace(key, val).second)
      throw std::runtime_error(manifest_path + ":" + std::to_string(lineno) +
                               ": duplicate key '" + key + "'");
  }
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end())
      throw std::runtime_error(manifest_path + ": missing key '" + key + "'");
    return it->second;
  };
  auto need_int = [&](const std::string& key) {
    const std::string& v = need(key);
    std::size_t pos = 0;
    int64_t out = 0;
    try {
      out = std::stoll(v, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != v.size() || out <= 0)
      throw std::runtime_error(manifest_path + ": key '" + key +
                               "' must be a positive integer, got '" + v + "'");
    return out;
  };

  Dataset d;
  d.n = need_int("count");
  d.c = need_int("channels");
  d.h = need_int("height");
  d.w = need_int("width");
  std::string dtype = need("dtype");
  if (dtype != "f32" && dtype != "u8")
    throw std::runtime_error(manifest_path + ": dtype must be f32 or u8, got '" +
                             dtype + "'");
  std::filesystem::path base =
      std::filesystem::path(manifest_path).parent_path();
  std::string images_path = (base / need("images")).string();
  std::string labels_path = (base / need("labels")).string();

  int64_t elems = d.n * d.sample_elems();
  std::ifstream imf(images_path, std::ios::binary);
  if (!imf) throw std::runtime_error(images_path + ": cannot open image blob");
  d.images.resize(static_cast<std::size_t>(elems));
  if (dtype == "f32") {
    std::vector<unsigned char> buf(static_cast<std::size_t>(elems) * 4);
    imf.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
    if (imf.gcount() != static_cast<std::streamsize>(buf.size()))
      throw std::runtime_error(images_path + ": truncated image blob");
    for (int64_t i = 0; i < elems; ++i) {
      const unsigned char* b = &buf[static_cast<std::size_t>(i) * 4];
      std::uint32_t u = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                        (std::uint32_t(b[2]) << 16) |
                        (std::uint32_t(b[3]) << 24);
      float f;
      std::memcpy(&f, &u, 4);
      d.images[static_cast<std::size_t>(i)] = f;
    }
  } else {
    std::vector<unsigned char> buf(static_cast<std::size_t>(elems));
    imf.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
    if (imf.gcount() != static_cast<std::streamsize>(buf.size()))
      throw std::runtime_error(images_path + ": truncated image blob");
    for (int64_t i = 0; i < elems; ++i)
      d.images[static_cast<std::size_t>(i)] =
          float(buf[static_cast<std::size_t>(i)]) / 255.0f;
  }
  if (imf.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(images_path + ": trailing bytes after " +
                             std::to_string(elems) + " pixels");

  std::ifstream lbf(labels_path, std::ios::binary);
  if (!lbf) throw std::runtime_error(labels_path + ": cannot open label blob");
  std::vector<unsigned char> lbuf(static_cast<std::size_t>(d.n));
  lbf.read(reinterpret_cast<char*>(lbuf.data()),
           static_cast<std::streamsize>(lbuf.size()));
  if (lbf.gcount() != static_cast<std::streamsize>(lbuf.size()))
    throw std::runtime_error(labels_path + ": truncated label blob");
  if (lbf.peek() != std::char_traits<char>::eof())
    throw std::runtime_error(labels_path + ": trailing bytes after " +
                             std::to_string(d.n) + " labels");
  d.labels.assign(lbuf.begin(), lbuf.end());

  int maxl = 0;
  for (int lbl : d.labels) maxl = std::max(maxl, lbl);
  d.classes = kv.count("classes") ? need_int("classes") : maxl + 1;
  d.check();
  return d;
}

struct SynthSpec {
  int64_t classes = 10;
  int64_t count = 1000;
  int64_t size = 28;
  int64_t channels = 1;
  double noise = 0.35;
  int64_t shift = 0;  // max |translation| of the prototype, per sample, px
  std::uint64_t seed = 7;
};

namespace synthdetail {

constexpr int64_t kProtoGrid = 7;

// align-corners bilinear sample of a g x g grid at output pixel (y, x)
inline double upsample_at(const std::vector<double>& grid, int64_t g,
                          int64_t size, int64_t y, int64_t x) {
  double sy = size > 1 ? double(y) * double(g - 1) / double(size - 1) : 0.0;
  double sx = size > 1 ? double(x) * double(g - 1) / double(size - 1) : 0.0;
  int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
  int64_t y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
  double fy = sy - double(y0), fx = sx - double(x0);
  double a = grid[static_cast<std::size_t>(y0 * g + x0)];
  double b = grid[static_cast<std::size_t>(y0 * g + x1)];
  double c = grid[static_cast<std::size_t>(y1 * g + x0)];
  double d = grid[static_cast<std::size_t>(y1 * g + x1)];
  return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) +
         d * fy * fx;
}

}  // namespace synthdetail

// Prototypes only; exposed so tests can inspect the class signal.
inline std::vector<float> synth_prototypes(const SynthSpec& s) {
  using namespace synthdetail;
  if (s.classes < 2 || s.size < 2 || s.channels < 1)
    throw std::invalid_argument("synthetic spec: degenerate dims");
  auto rng = stream_rng(s.seed, "synth-proto");
  std::normal_distribution<double> gauss(0.0, 1.0);
  int64_t per_class = s.channels * s.size * s.size;
  std::vector<float> protos(static_cast<std::size_t>(s.classes * per_class));
  for (int64_t k = 0; k < s.classes; ++k) {
    std::vector<double> full(static_cast<std::size_t>(per_class));
    for (int64_t ch = 0; ch < s.channels; ++ch) {
      std::vector<double> grid(kProtoGrid * kProtoGrid);
      for (double& v : grid) v = gauss(rng);
      for (int64_t y = 0; y < s.size; ++y)
        for (int64_t x = 0; x < s.size; ++x)
          full[static_cast<std::size_t>((ch * s.size + y) * s.size + x)] =
              upsample_at(grid, kProtoGrid, s.size, y, x);
    }
    double energy = 0;
    for (double v : full) energy += v * v;
    double scale = 1.0 / std::sqrt(energy / double(per_class));
    for (int64_t i = 0; i < per_class; ++i)
      protos[static_cast<std::size_t>(k * per_class + i)] =
          static_cast<float>(full[static_cast<std::size_t>(i)] * scale);
  }
  return protos;
}

// Each sample is its class prototype, translated by a per-sample integer
// offset when `shift` > 0 (zero fill at the edges), plus white noise. The
// offsets draw from their own stream, so the noise field of a sample is
// identical across shift settings.
inline Dataset make_synthetic(const SynthSpec& s, const std::string& split) {
  if (s.shift < 0 || s.shift >= s.size)
    throw std::invalid_argument("synthetic spec: shift must be in [0, size)");
  std::vector<float> protos = synth_prototypes(s);
  auto rng = stream_rng(s.seed, "synth-" + split);
  auto shift_rng = stream_rng(s.seed, "synth-shift-" + split);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int64_t> offset(-s.shift, s.shift);
  Dataset d;
  d.n = s.count;
  d.c = s.channels;
  d.h = s.size;
  d.w = s.size;
  d.classes = s.classes;
  int64_t per = d.sample_elems();
  d.images.resize(static_cast<std::size_t>(d.n * per));
  d.labels.resize(static_cast<std::size_t>(d.n));
  for (int64_t i = 0; i < d.n; ++i) {
    int64_t k = i % s.classes;  // balanced; epoch shuffling randomizes order
    d.labels[static_cast<std::size_t>(i)] = static_cast<int>(k);
    const float* p = &protos[static_cast<std::size_t>(k * per)];
    float* out = &d.images[static_cast<std::size_t>(i * per)];
    int64_t dy = 0, dx = 0;
    if (s.shift > 0) {
      dy = offset(shift_rng);
      dx = offset(shift_rng);
    }
    for (int64_t ch = 0; ch < s.channels; ++ch)
      for (int64_t y = 0; y < s.size; ++y)
        for (int64_t x = 0; x < s.size; ++x) {
          int64_t sy = y - dy, sx = x - dx;
          double base =
              (sy >= 0 && sy < s.size && sx >= 0 && sx < s.size)
                  ? p[static_cast<std::size_t>((ch * s.size + sy) * s.size +
                                               sx)]
                  : 0.0;
          out[static_cast<std::size_t>((ch * s.size + y) * s.size + x)] =
              static_cast<float>(base + s.noise * gauss(rng));
        }
  }
  d.check();
  return d;
}

struct NormStats {
  double mean = 0;
  double sd = 1;
};

// Mean/std computed on the first dataset, applied to both (train statistics
// leak nothing from test). Std guards against constant inputs. Returns the
// constants so the transform can be undone.
inline NormStats normalize_pair(Dataset& train, Dataset& test) {
  NormStats st;
  for (float v : train.images) st.mean += v;
  st.mean /= double(train.images.size());
  double var = 0;
  for (float v : train.images) var += (v - st.mean) * (v - st.mean);
  var /= double(train.images.size());
  st.sd = std::sqrt(var);
  if (st.sd < 1e-8) st.sd = 1.0;
  auto apply = [&](Dataset& d) {
    for (float& v : d.images)
      v = static_cast<float>((v - st.mean) / st.sd);
  };
  apply(train);
  apply(test);
  return st;
}

inline void denormalize(Dataset& d, const NormStats& st) {
  for (float& v : d.images)
    v = static_cast<float>(double(v) * st.sd + st.mean);
}

inline void truncate_dataset(Dataset& d, int64_t limit) {
  if (limit <= 0 || limit >= d.n) return;
  d.n = limit;
  d.images.resize(static_cast<std::size_t>(d.n * d.sample_elems()));
  d.labels.resize(static_cast<std::size_t>(d.n));
}

struct SplitPair {
  Dataset train;
  Dataset test;
};

// Config-driven loading: format dispatch, truncation, then normalization
// with train statistics applied to both splits.
inline SplitPair load_train_test(const DataConfig& dc) {
  SplitPair sp;
  if (dc.format == "synth") {
    SynthSpec s;
    s.classes = dc.synth_classes;
    s.size = dc.synth_size;
    s.channels = dc.synth_channels;
    s.noise = dc.synth_noise;
    s.shift = dc.synth_shift;
    s.seed = dc.synth_seed;
    s.count = dc.synth_train;
    sp.train = make_synthetic(s, "train");
    s.count = dc.synth_test;
    sp.test = make_synthetic(s, "test");
  } else if (dc.format == "idx") {
    sp.train = load_idx(dc.train_images, dc.train_labels);
    sp.test = load_idx(dc.test_images, dc.test_labels);
  } else if (dc.format == "raw") {
    sp.train = load_raw_manifest(dc.train_images);
    sp.test = load_raw_manifest(dc.test_images);
  } else {
    throw std::invalid_argument("data: unknown format '" + dc.format + "'");
  }
  truncate_dataset(sp.train, dc.limit_train);
  truncate_dataset(sp.test, dc.limit_test);
  if (dc.normalize) normalize_pair(sp.train, sp.test);
  return sp;
}

inline Tensor4 batch_images(const Dataset& d,
                            const std::vector<int64_t>& idx) {
  Tensor4 out = Tensor4::zeros(
      {static_cast<int64_t>(idx.size()), d.c, d.h, d.w});
  double* dst = out.data();
  int64_t per = d.sample_elems();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= d.n)
      throw std::out_of_range("batch_images: index " + std::to_string(idx[i]));
    const float* src = &d.images[static_cast<std::size_t>(idx[i] * per)];
    for (int64_t j = 0; j < per; ++j)
      dst[static_cast<int64_t>(i) * per + j] = src[static_cast<std::size_t>(j)];
  }
  return out;
}

inline std::vector<int> batch_labels(const Dataset& d,
                                     const std::vector<int64_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i] = d.labels[static_cast<std::size_t>(idx[i])];
  return out;
}

// Zero-pad-and-crop plus horizontal flip, applied per sample in place on an
// assembled batch. Offsets and flips draw sequentially from `rng`.
inline void augment_crop_flip(Tensor4& batch, int64_t pad,
                              std::mt19937_64& rng) {
  Shape4 s = batch.shape();
  std::uniform_int_distribution<int64_t> off(0, 2 * pad);
  std::bernoulli_distribution flip(0.5);
  Tensor4 tmp = Tensor4::zeros({1, s.c, s.h, s.w});
  for (int64_t b = 0; b < s.b; ++b) {
    int64_t dy = off(rng) - pad, dx = off(rng) - pad;
    bool fl = flip(rng);
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x) {
          int64_t sy = y + dy;
          int64_t sx = fl ? (s.w - 1 - x) + dx : x + dx;
          double v = 0;
          if (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w)
            v = batch.at(b, c, sy, sx);
          tmp.set(0, c, y, x, v);
        }
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t y = 0; y < s.h; ++y)
        for (int64_t x = 0; x < s.w; ++x)
          batch.set(b, c, y, x, tmp.at(0, c, y, x));
  }
}

// Per-sample brightness/contrast jitter: x' = a*x + b with a ~ U(0.8, 1.2)
// and b ~ U(-0.1, 0.1) in normalized units, shared across channels. This is
// the grayscale degradation of color jitter; on multi-channel data it still
// jitters only intensity, never hue.
inline void augment_jitter(Tensor4& batch, std::mt19937_64& rng) {
  Shape4 s = batch.shape();
  std::uniform_real_distribution<double> contrast(0.8, 1.2);
  std::uniform_real_distribution<double> brightness(-0.1, 0.1);
  int64_t per = s.c * s.h * s.w;
  double* p = batch.data();
  for (int64_t b = 0; b < s.b; ++b) {
    double a = contrast(rng), off = brightness(rng);
    for (int64_t j = 0; j < per; ++j) p[b * per + j] = a * p[b * per + j] + off;
  }
}

}  // namespace bicovg
