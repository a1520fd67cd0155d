#pragma once

// Checkpoint file layout (little-endian):
//   magic "MGLN" | u32 version | u64 config hash | u32 kind length | kind
//   | u32 config length | config text | standardization stats (16 means,
//   16 stds, eps as f64) | u64 parameter scalar count | parameter blocks
//   in declaration order as f64.
// Loading validates magic, version, and config hash.

#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "menglan/data.hpp"
#include "menglan/model.hpp"

namespace menglan {

constexpr char kCheckpointMagic[4] = {'M', 'G', 'L', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;

/// Bytes preceding the parameter blocks for a given model; count_params
/// bytes equals file size minus this header.
inline std::size_t checkpoint_header_bytes(const std::string& kind, const ModelConfig& cfg) {
  return 4 + 4 + 8 + 4 + kind.size() + 4 + cfg.serialize().size() + 33 * 8 + 8;
}

inline void save_checkpoint(RegressionModel& model, const StandardizationStats& stats,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 4);
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_pod<std::uint64_t>(out, model.config().hash());
  std::string kind = model.kind();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(kind.size()));
  out.write(kind.data(), static_cast<std::streamsize>(kind.size()));
  std::string cfg = model.config().serialize();
  detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (double m : stats.mean) detail::write_pod<double>(out, m);
  for (double s : stats.stddev) detail::write_pod<double>(out, s);
  detail::write_pod<double>(out, stats.eps);
  std::uint64_t total = 0;
  for (auto& t : model.parameters()) total += t.size();
  detail::write_pod<std::uint64_t>(out, total);
  for (auto& t : model.parameters())
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw IoError("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
  std::unique_ptr<RegressionModel> model;
  StandardizationStats stats;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  auto stored_hash = detail::read_pod<std::uint64_t>(in);
  auto kind_len = detail::read_pod<std::uint32_t>(in);
  std::string kind(kind_len, '\0');
  in.read(kind.data(), kind_len);
  auto cfg_len = detail::read_pod<std::uint32_t>(in);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw FormatError("truncated checkpoint header: " + path);
  ModelConfig cfg = ModelConfig::deserialize(cfg_text);
  if (cfg.hash() != stored_hash)
    throw FormatError("checkpoint config hash mismatch: stored " + std::to_string(stored_hash) +
                      " vs recomputed " + std::to_string(cfg.hash()));
  LoadedCheckpoint lc;
  for (double& m : lc.stats.mean) m = detail::read_pod<double>(in);
  for (double& s : lc.stats.stddev) s = detail::read_pod<double>(in);
  lc.stats.eps = detail::read_pod<double>(in);
  auto total = detail::read_pod<std::uint64_t>(in);
  lc.model = build_any_model(kind, cfg, Rng(cfg.seed));
  std::uint64_t have = 0;
  for (auto& t : lc.model->parameters()) have += t.size();
  if (have != total)
    throw FormatError("checkpoint holds " + std::to_string(total) + " scalars, model needs " +
                      std::to_string(have));
  for (auto& t : lc.model->parameters()) {
    in.read(reinterpret_cast<char*>(t.mut_data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw FormatError("truncated checkpoint parameters: " + path);
  }
  return lc;
}

}  // namespace menglan
