#pragma once

// Ingestion of the dynamic gas-mixture sensor files: whitespace-separated
// "time conc_a conc_b s1..s16" lines, one optional header line. Detects
// contiguous concentration-level spans, standardizes channels (z-score,
// training stats only), cuts fixed-width windows inside spans, and produces
// deterministic 6:2:2 splits. Binary sample archives share the checkpoint
// endianness rules (little-endian 64-bit floats).

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "menglan/tensor.hpp"

namespace menglan {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr std::size_t kSensorCount = 16;
constexpr std::size_t kRawColumns = 3 + kSensorCount;

struct RawRecord {
  double time = 0.0;
  double conc_a = 0.0;  // CO or methane
  double conc_b = 0.0;  // ethylene
  std::array<double, kSensorCount> sensors{};
};

inline std::vector<RawRecord> parse_raw_records(std::istream& in, const std::string& name) {
  std::vector<RawRecord> records;
  std::string line;
  std::size_t lineno = 0;
  bool header_allowance = true;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) continue;
    auto numeric = [](const std::string& s) {
      char* end = nullptr;
      std::strtod(s.c_str(), &end);
      return end == s.c_str() + s.size() && !s.empty();
    };
    if (header_allowance && !numeric(tokens[0])) {
      header_allowance = false;  // single header line skipped
      continue;
    }
    header_allowance = false;
    if (tokens.size() != kRawColumns)
      throw ParseError(name + ":" + std::to_string(lineno) + ": expected " +
                       std::to_string(kRawColumns) + " columns, got " +
                       std::to_string(tokens.size()));
    RawRecord r;
    std::array<double, kRawColumns> vals;
    for (std::size_t i = 0; i < kRawColumns; ++i) {
      if (!numeric(tokens[i]))
        throw ParseError(name + ":" + std::to_string(lineno) + ": non-numeric field '" +
                         tokens[i] + "'");
      vals[i] = std::stod(tokens[i]);
    }
    r.time = vals[0];
    r.conc_a = vals[1];
    r.conc_b = vals[2];
    for (std::size_t i = 0; i < kSensorCount; ++i) r.sensors[i] = vals[3 + i];
    records.push_back(r);
  }
  return records;
}

inline std::vector<RawRecord> parse_raw_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open raw file: " + path);
  return parse_raw_records(in, path);
}

/// A maximal contiguous span of constant (conc_a, conc_b); [begin, end).
struct Level {
  double conc_a = 0.0;
  double conc_b = 0.0;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - begin; }
};

inline std::vector<Level> detect_levels(const std::vector<RawRecord>& records) {
  std::vector<Level> levels;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (levels.empty() || levels.back().conc_a != records[i].conc_a ||
        levels.back().conc_b != records[i].conc_b) {
      levels.push_back({records[i].conc_a, records[i].conc_b, i, i + 1});
    } else {
      levels.back().end = i + 1;
    }
  }
  return levels;
}

inline std::size_t distinct_level_pairs(const std::vector<Level>& levels) {
  std::vector<std::pair<double, double>> seen;
  for (const auto& l : levels) {
    std::pair<double, double> p{l.conc_a, l.conc_b};
    bool found = false;
    for (const auto& q : seen) found = found || q == p;
    if (!found) seen.push_back(p);
  }
  return seen.size();
}

struct StandardizationStats {
  std::array<double, kSensorCount> mean{};
  std::array<double, kSensorCount> stddev{};
  double eps = 1e-8;
};

/// Z-score per channel: x' = (x - mean_c) / (std_c + eps). When stats are
/// given they are applied as-is (validation/test use training stats only);
/// otherwise they are computed from the input.
inline std::pair<std::vector<RawRecord>, StandardizationStats> standardize(
    const std::vector<RawRecord>& records,
    const std::optional<StandardizationStats>& given = std::nullopt) {
  if (records.empty()) throw ContractError("standardize: empty input");
  StandardizationStats stats;
  if (given) {
    stats = *given;
  } else {
    for (std::size_t c = 0; c < kSensorCount; ++c) {
      double m = 0.0;
      for (const auto& r : records) m += r.sensors[c];
      m /= static_cast<double>(records.size());
      double v = 0.0;
      for (const auto& r : records) {
        double d = r.sensors[c] - m;
        v += d * d;
      }
      stats.mean[c] = m;
      stats.stddev[c] = std::sqrt(v / static_cast<double>(records.size()));
    }
  }
  std::vector<RawRecord> out = records;
  for (auto& r : out)
    for (std::size_t c = 0; c < kSensorCount; ++c)
      r.sensors[c] = (r.sensors[c] - stats.mean[c]) / (stats.stddev[c] + stats.eps);
  return {out, stats};
}

inline std::vector<RawRecord> unstandardize(const std::vector<RawRecord>& records,
                                            const StandardizationStats& stats) {
  std::vector<RawRecord> out = records;
  for (auto& r : out)
    for (std::size_t c = 0; c < kSensorCount; ++c)
      r.sensors[c] = r.sensors[c] * (stats.stddev[c] + stats.eps) + stats.mean[c];
  return out;
}

/// One training example: a [16 x W] window plus the span's nominal
/// concentrations. Values are raw in the archive; standardization happens
/// against training-split stats at train/eval time.
struct SampleWindow {
  std::vector<double> values;  // 16 x W row-major
  double target_a = 0.0;
  double target_b = 0.0;
  std::uint32_t level_id = 0;
  std::uint64_t begin = 0;  // record index of the first column

  double target(const std::string& selector) const {
    return selector == "ethylene" ? target_b : target_a;
  }
};

struct WindowConfig {
  std::size_t width = 64;
  std::size_t stride = 64;
  std::size_t cap = 0;  // 0 = unlimited windows per level span
};

inline std::vector<SampleWindow> make_windows(const std::vector<RawRecord>& records,
                                              const std::vector<Level>& levels,
                                              const WindowConfig& cfg,
                                              std::ostream* warn = nullptr) {
  if (cfg.width < 1 || cfg.stride < 1) throw ConfigError("make_windows: width/stride >= 1");
  std::vector<SampleWindow> out;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const Level& lv = levels[li];
    if (lv.length() < cfg.width) {
      if (warn)
        *warn << "warning: span " << li << " (length " << lv.length() << ") shorter than window "
              << cfg.width << ", skipped\n";
      continue;
    }
    std::size_t taken = 0;
    for (std::size_t start = lv.begin; start + cfg.width <= lv.end; start += cfg.stride) {
      if (cfg.cap > 0 && taken >= cfg.cap) break;
      SampleWindow w;
      w.values.resize(kSensorCount * cfg.width);
      for (std::size_t c = 0; c < kSensorCount; ++c)
        for (std::size_t t = 0; t < cfg.width; ++t)
          w.values[c * cfg.width + t] = records[start + t].sensors[c];
      w.target_a = lv.conc_a;
      w.target_b = lv.conc_b;
      w.level_id = static_cast<std::uint32_t>(li);
      w.begin = start;
      out.push_back(std::move(w));
      ++taken;
    }
  }
  return out;
}

// ---- splits -----------------------------------------------------------------

struct SplitIndex {
  std::vector<std::size_t> train, val, test;
  std::uint64_t seed = 0;
};

/// Seeded Fisher-Yates shuffle, then a contiguous 6:2:2 cut:
/// floor(0.6 n) / floor(0.2 n) / remainder.
inline SplitIndex split(std::size_t n, std::uint64_t seed) {
  if (n < 5) throw ContractError("split: need at least 5 samples, got " + std::to_string(n));
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  Rng rng = Rng(seed).fork("split");
  for (std::size_t i = n - 1; i > 0; --i) {
    std::size_t j = rng.next_u64() % (i + 1);
    std::swap(ids[i], ids[j]);
  }
  SplitIndex s;
  s.seed = seed;
  std::size_t ntr = static_cast<std::size_t>(0.6 * static_cast<double>(n));
  std::size_t nva = static_cast<std::size_t>(0.2 * static_cast<double>(n));
  s.train.assign(ids.begin(), ids.begin() + ntr);
  s.val.assign(ids.begin() + ntr, ids.begin() + ntr + nva);
  s.test.assign(ids.begin() + ntr + nva, ids.end());
  return s;
}

inline void write_split_index(const SplitIndex& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write split index: " + path);
  auto section = [&out](const char* name, const std::vector<std::size_t>& ids) {
    out << "[" << name << "]\n";
    for (std::size_t id : ids) out << id << "\n";
  };
  section("train", s.train);
  section("val", s.val);
  section("test", s.test);
}

// ---- stats over windows -------------------------------------------------------

/// Per-channel mean/std over a subset of windows (the training split).
inline StandardizationStats window_stats(const std::vector<SampleWindow>& samples,
                                         const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw ContractError("window_stats: empty id list");
  StandardizationStats stats;
  const std::size_t w = samples[ids[0]].values.size() / kSensorCount;
  const double total = static_cast<double>(ids.size() * w);
  for (std::size_t c = 0; c < kSensorCount; ++c) {
    double m = 0.0;
    for (std::size_t id : ids)
      for (std::size_t t = 0; t < w; ++t) m += samples[id].values[c * w + t];
    m /= total;
    double v = 0.0;
    for (std::size_t id : ids)
      for (std::size_t t = 0; t < w; ++t) {
        double d = samples[id].values[c * w + t] - m;
        v += d * d;
      }
    stats.mean[c] = m;
    stats.stddev[c] = std::sqrt(v / total);
  }
  return stats;
}

/// Assembles a standardized batch tensor [n x 16 x W] for the given ids.
inline Tensor batch_tensor(const std::vector<SampleWindow>& samples,
                           const std::vector<std::size_t>& ids,
                           const StandardizationStats& stats) {
  if (ids.empty()) throw ContractError("batch_tensor: empty id list");
  const std::size_t w = samples[ids[0]].values.size() / kSensorCount;
  Tensor x(Shape{ids.size(), kSensorCount, w});
  auto& xv = x.mut_data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& vals = samples[ids[i]].values;
    for (std::size_t c = 0; c < kSensorCount; ++c)
      for (std::size_t t = 0; t < w; ++t)
        xv[(i * kSensorCount + c) * w + t] =
            (vals[c * w + t] - stats.mean[c]) / (stats.stddev[c] + stats.eps);
  }
  return x;
}

inline Tensor target_tensor(const std::vector<SampleWindow>& samples,
                            const std::vector<std::size_t>& ids, const std::string& selector) {
  Tensor y(Shape{ids.size()});
  for (std::size_t i = 0; i < ids.size(); ++i) y.at(i) = samples[ids[i]].target(selector);
  return y;
}

// ---- sample archive (binary) ---------------------------------------------------

namespace detail {
// little-endian scalar IO; the build targets little-endian hosts
template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("unexpected end of binary stream");
  return v;
}
}  // namespace detail

constexpr char kArchiveMagic[4] = {'M', 'G', 'A', 'R'};
constexpr std::uint32_t kArchiveVersion = 1;

struct SampleArchive {
  std::size_t window_width = 0;
  std::uint64_t source_digest = 0;
  std::vector<SampleWindow> samples;
};

inline std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for digest: " + path);
  std::uint64_t h = 0xCBF29CE484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ull;
    }
    if (!in) break;
  }
  return h;
}

inline void write_archive(const SampleArchive& a, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write archive: " + path);
  out.write(kArchiveMagic, 4);
  detail::write_pod<std::uint32_t>(out, kArchiveVersion);
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(kSensorCount));
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(a.window_width));
  detail::write_pod<std::uint64_t>(out, a.source_digest);
  detail::write_pod<std::uint64_t>(out, a.samples.size());
  for (const auto& s : a.samples) {
    detail::write_pod<double>(out, s.target_a);
    detail::write_pod<double>(out, s.target_b);
    detail::write_pod<std::uint32_t>(out, s.level_id);
    detail::write_pod<std::uint64_t>(out, s.begin);
    out.write(reinterpret_cast<const char*>(s.values.data()),
              static_cast<std::streamsize>(s.values.size() * sizeof(double)));
  }
  if (!out) throw IoError("write failed: " + path);
}

inline SampleArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open archive: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kArchiveMagic, 4) != 0)
    throw FormatError("bad archive magic in " + path);
  auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kArchiveVersion)
    throw FormatError("unsupported archive version " + std::to_string(version));
  auto channels = detail::read_pod<std::uint32_t>(in);
  if (channels != kSensorCount)
    throw FormatError("archive channel count " + std::to_string(channels));
  SampleArchive a;
  a.window_width = detail::read_pod<std::uint32_t>(in);
  a.source_digest = detail::read_pod<std::uint64_t>(in);
  auto count = detail::read_pod<std::uint64_t>(in);
  a.samples.resize(count);
  for (auto& s : a.samples) {
    s.target_a = detail::read_pod<double>(in);
    s.target_b = detail::read_pod<double>(in);
    s.level_id = detail::read_pod<std::uint32_t>(in);
    s.begin = detail::read_pod<std::uint64_t>(in);
    s.values.resize(kSensorCount * a.window_width);
    in.read(reinterpret_cast<char*>(s.values.data()),
            static_cast<std::streamsize>(s.values.size() * sizeof(double)));
    if (!in) throw FormatError("truncated archive: " + path);
  }
  return a;
}

}  // namespace menglan
