#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedforge/analytics.hpp"
#include "fedforge/data.hpp"
#include "fedforge/model.hpp"
#include "fedforge/tensor.hpp"

namespace fedforge {

namespace io {

// All binary payloads are little-endian. Assumed little-endian host (the
// supported build targets are x86-64 / aarch64).

inline void write_doubles(std::ostream& os, const double* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& is, double* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw Error("file truncated while reading float payload");
}

inline void write_i32(std::ostream& os, const int* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t v = data[i];
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
}

inline void read_i32(std::istream& is, int* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::int32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw Error("file truncated while reading int payload");
    data[i] = v;
  }
}

// Write via temp file + rename so partial runs never corrupt outputs.
inline void atomic_write(const std::filesystem::path& path,
                         const std::string& contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace io

// FFCKPT1 <arch> <H> <W> <C> <classes> <hidden>\n + params as LE doubles
inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
  std::ostringstream os(std::ios::binary);
  const auto& s = m.spec;
  os << "FFCKPT1 " << arch_name(s.arch) << " " << s.height << " " << s.width
     << " " << s.channels << " " << s.classes << " " << s.hidden << "\n";
  io::write_doubles(os, m.params.data(), m.params.size());
  io::atomic_write(path, os.str());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic, arch;
  ModelSpec spec;
  hs >> magic >> arch >> spec.height >> spec.width >> spec.channels >>
      spec.classes >> spec.hidden;
  if (!hs || magic != "FFCKPT1") {
    throw Error("bad checkpoint header in " + path.string());
  }
  spec.arch = arch_from_name(arch);
  Model m = Model::zeros(spec);
  io::read_doubles(is, m.params.data(), m.params.size());
  if (!m.params.finite()) throw Error("checkpoint contains non-finite params");
  return m;
}

// FFDATA1 <N> <H> <W> <C> <classes>\n + labels as LE int32 + pixels as LE doubles
inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  std::ostringstream os(std::ios::binary);
  os << "FFDATA1 " << ds.size() << " " << ds.height() << " " << ds.width()
     << " " << ds.channels() << " " << ds.classes << "\n";
  io::write_i32(os, ds.labels.data(), ds.labels.size());
  io::write_doubles(os, ds.images.data(), ds.images.size());
  io::atomic_write(path, os.str());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open dataset: " + path.string());
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic;
  std::size_t n, h, w, c, classes;
  hs >> magic >> n >> h >> w >> c >> classes;
  if (!hs || magic != "FFDATA1") {
    throw Error("bad dataset header in " + path.string());
  }
  Dataset ds;
  ds.classes = classes;
  ds.labels.resize(n);
  io::read_i32(is, ds.labels.data(), n);
  std::vector<double> pixels(n * h * w * c);
  io::read_doubles(is, pixels.data(), pixels.size());
  ds.images = Tensor::checked({n, h, w, c}, std::move(pixels));
  for (int lbl : ds.labels) {
    if (lbl < 0 || static_cast<std::size_t>(lbl) >= classes) {
      throw Error("dataset label out of range in " + path.string());
    }
  }
  return ds;
}

// FFTRIG1 <H> <W> <C> <y_t> <mask_h> <mask_w>\n + delta then mask as LE doubles
inline void save_trigger(const std::filesystem::path& path, const Trigger& t) {
  // bounding box of the mask support, for the header
  std::size_t mh = 0, mw = 0;
  const std::size_t H = t.mask.dim(0), W = t.mask.dim(1), C = t.mask.dim(2);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t ch = 0; ch < C; ++ch) {
        if (t.mask.at3(y, x, ch) != 0.0) {
          mh = std::max(mh, y + 1);
          mw = std::max(mw, x + 1);
        }
      }
    }
  }
  std::ostringstream os(std::ios::binary);
  os << "FFTRIG1 " << H << " " << W << " " << C << " " << t.target << " " << mh
     << " " << mw << "\n";
  io::write_doubles(os, t.pattern.data(), t.pattern.size());
  io::write_doubles(os, t.mask.data(), t.mask.size());
  io::atomic_write(path, os.str());
}

inline Trigger load_trigger(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open trigger: " + path.string());
  std::string header;
  std::getline(is, header);
  std::istringstream hs(header);
  std::string magic;
  std::size_t h, w, c, mh, mw;
  int target;
  hs >> magic >> h >> w >> c >> target >> mh >> mw;
  if (!hs || magic != "FFTRIG1") {
    throw Error("bad trigger header in " + path.string());
  }
  Trigger t;
  std::vector<double> delta(h * w * c), mask(h * w * c);
  io::read_doubles(is, delta.data(), delta.size());
  io::read_doubles(is, mask.data(), mask.size());
  t.pattern = Tensor::checked({h, w, c}, std::move(delta));
  t.mask = Tensor({h, w, c}, std::move(mask));
  t.target = target;
  return t;
}

// round,mta,asr,update_norm,malicious_selected,mean_C,mean_eta_eff,trig_opt_seconds
inline std::string rounds_csv(const std::vector<RoundRecord>& records,
                              bool timing_in_csv = false) {
  std::ostringstream os;
  os << "round,mta,asr,update_norm,malicious_selected,mean_C,mean_eta_eff,"
        "trig_opt_seconds\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6g,%d,%.6f,%.6f,%.3f\n",
                  r.round, r.mta, r.asr, r.update_norm,
                  r.malicious_selected ? 1 : 0, r.mean_consensus, r.mean_eta_eff,
                  timing_in_csv ? r.trig_opt_seconds : 0.0);
    os << buf;
  }
  return os.str();
}

}  // namespace fedforge
