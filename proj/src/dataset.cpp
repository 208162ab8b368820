#include "stm/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stm {

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

DenseArray read_f32(const std::string& path, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  std::uintmax_t bytes = std::filesystem::file_size(path);
  if (bytes != n * sizeof(float)) {
    throw std::runtime_error(path + ": expected " +
                             std::to_string(n * sizeof(float)) + " bytes for " +
                             shape_str(shape) + ", found " +
                             std::to_string(bytes));
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  DenseArray out(shape);
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(n * sizeof(float)));
  if (!f) throw std::runtime_error("short read on " + path);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = buf[i];
  return out;
}

}  // namespace

DatasetBundle load_bundle(const std::string& dir, bool skip_adjacency) {
  DatasetBundle b;
  std::ifstream man(dir + "/manifest.txt");
  if (!man) throw std::runtime_error("cannot open " + dir + "/manifest.txt");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(man, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(dir + "/manifest.txt:" + std::to_string(lineno) +
                               ": expected key=value, got '" + line + "'");
    }
    std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "format") {
      if (v != "stm-dataset v1") {
        throw std::runtime_error("unsupported dataset format '" + v + "'");
      }
    } else if (k == "samples") b.samples = std::stoull(v);
    else if (k == "T") b.T = std::stoull(v);
    else if (k == "window_len") b.window_len = std::stoull(v);
    else if (k == "N") b.N = std::stoull(v);
    else if (k == "M") b.M = std::stoull(v);
    else if (k == "C") b.C = std::stoull(v);
    else if (k == "seed") b.seed = std::stoull(v);
    else if (k == "ratios") {
      for (const auto& r : split_csv(v)) b.ratios.push_back(std::stod(r));
    } else if (k == "features") {
      b.schema.names = split_csv(v);
    } else if (k == "network_flags") {
      for (const auto& r : split_csv(v))
        b.schema.network_flags.push_back(std::stoull(r));
    } else if (k == "fault") {
      auto parts = split_csv(v);
      if (parts.size() != 6) {
        throw std::runtime_error("manifest fault row needs 6 fields, got '" +
                                 v + "'");
      }
      b.faults.push_back({std::stoull(parts[0]), parts[1],
                          std::stoull(parts[2]), std::stoull(parts[3]),
                          std::stoull(parts[4]), std::stod(parts[5])});
    } else if (k == "noise_amp" || k == "fault_intensity") {
      // generation knobs recorded for replay, unused on load
    } else {
      throw std::runtime_error("manifest: unknown key '" + k + "'");
    }
  }
  if (b.samples == 0 || b.T == 0 || b.window_len == 0 || b.N == 0 ||
      b.M == 0 || b.C == 0) {
    throw std::runtime_error("manifest: missing extents");
  }
  if (b.window_len < 2 * b.T) {
    throw std::runtime_error("manifest: window_len must be >= 2T");
  }
  if (b.schema.names.size() != b.C) {
    throw std::runtime_error("manifest: feature list does not match C");
  }
  for (auto i : b.schema.network_flags) {
    if (i >= b.C) throw std::runtime_error("manifest: network flag out of range");
  }

  b.states = read_f32(dir + "/states.bin",
                      {b.samples, b.window_len, b.N, b.C});
  if (!skip_adjacency) {
    b.adjacency = read_f32(dir + "/adjacency.bin",
                           {b.samples, b.window_len, b.N, b.N});
  }

  const std::string dep_path = dir + "/deployment.bin";
  if (std::filesystem::file_size(dep_path) != b.M * sizeof(std::uint32_t)) {
    throw std::runtime_error(dep_path + ": byte length does not match M");
  }
  std::ifstream dep(dep_path, std::ios::binary);
  for (std::size_t i = 0; i < b.M; ++i) {
    std::uint32_t x = 0;
    dep.read(reinterpret_cast<char*>(&x), sizeof(x));
    b.map.host_counts.push_back(x);
  }
  if (b.map.total() != b.N) {
    throw std::runtime_error("deployment counts sum to " +
                             std::to_string(b.map.total()) + ", manifest N=" +
                             std::to_string(b.N));
  }
  return b;
}

SplitSpec make_split(std::size_t samples) {
  auto counts = apportion_counts({0.8, 0.1, 0.1}, samples);
  SplitSpec s;
  s.train_end = counts[0];
  s.val_end = counts[0] + counts[1];
  s.test_end = samples;
  return s;
}

double NormalizerState::normalize_value(double v, std::size_t c) const {
  if (flagged[c]) {
    if (v < 0.0) {
      throw std::domain_error("negative value on log1p feature " +
                              std::to_string(c));
    }
    v = std::log1p(v);
  }
  double lo = fmin[c], hi = fmax[c];
  if (hi <= lo) return 0.0;
  return (v - lo) / (hi - lo);
}

double NormalizerState::denormalize_value(double v, std::size_t c) const {
  double lo = fmin[c], hi = fmax[c];
  double raw = hi <= lo ? lo : lo + v * (hi - lo);
  if (flagged[c]) raw = std::expm1(raw);
  return raw;
}

NormalizerState fit_normalizer(const DatasetBundle& b, const SplitSpec& split) {
  if (split.train_count() == 0) {
    throw std::invalid_argument("normalizer: empty train split");
  }
  NormalizerState ns;
  ns.fmin.assign(b.C, 1e300);
  ns.fmax.assign(b.C, -1e300);
  ns.flagged.assign(b.C, 0);
  for (auto i : b.schema.network_flags) ns.flagged[i] = 1;
  for (std::size_t s = 0; s < split.train_end; ++s) {
    for (std::size_t t = 0; t < b.window_len; ++t) {
      for (std::size_t n = 0; n < b.N; ++n) {
        for (std::size_t c = 0; c < b.C; ++c) {
          double v =
              b.states.data[((s * b.window_len + t) * b.N + n) * b.C + c];
          if (ns.flagged[c]) {
            if (v < 0.0) {
              throw std::domain_error("negative value on log1p feature " +
                                      std::to_string(c));
            }
            v = std::log1p(v);
          }
          ns.fmin[c] = std::min(ns.fmin[c], v);
          ns.fmax[c] = std::max(ns.fmax[c], v);
        }
      }
    }
  }
  return ns;
}

DenseArray preprocess(const DatasetBundle& b, const NormalizerState& ns) {
  DenseArray out(b.states.shape);
  const std::size_t C = b.C;
  for (std::size_t i = 0; i < b.states.size(); ++i) {
    out.data[i] = ns.normalize_value(b.states.data[i], i % C);
  }
  return out;
}

std::vector<WindowPair> window_pairs(const DatasetBundle& b,
                                     const DenseArray& normalized,
                                     std::size_t begin, std::size_t end) {
  if (normalized.shape != b.states.shape) {
    throw std::invalid_argument("window_pairs: normalized array shape "
                                "mismatch");
  }
  if (end > b.samples || begin > end) {
    throw std::invalid_argument("window_pairs: bad sample range");
  }
  const std::size_t T = b.T, N = b.N, C = b.C, W = b.window_len;
  std::vector<WindowPair> out;
  for (std::size_t s = begin; s < end; ++s) {
    WindowPair p;
    p.hist = DenseArray({T, N, C});
    p.target = DenseArray({T, N, C});
    const std::size_t base = s * W * N * C;
    std::copy_n(normalized.data.begin() + base, T * N * C,
                p.hist.data.begin());
    std::copy_n(normalized.data.begin() + base + (W - T) * N * C, T * N * C,
                p.target.data.begin());
    if (b.adjacency.size() > 0) {
      p.adj = DenseArray({T, N, N});
      std::copy_n(b.adjacency.data.begin() + s * W * N * N, T * N * N,
                  p.adj.data.begin());
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace stm
