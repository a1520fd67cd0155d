#pragma once

// Synthetic gas-mixture raw files in the public dataset's wire format
// ("time conc_a conc_b s1..s16"). Sensor responses are smooth nonlinear
// functions of the two concentrations plus drift and noise, so a trained
// regressor has real signal to recover. Used by tests and as a
// desk-scale stand-in when the real recordings are not on disk.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "menglan/data.hpp"
#include "menglan/tensor.hpp"

namespace menglan {

struct SynthConfig {
  std::size_t levels = 40;          // concentration set-points
  std::size_t span_length = 400;    // records per level
  double max_conc_a = 500.0;        // ppm
  double max_conc_b = 20.0;         // ppm (ethylene)
  double noise = 0.02;
  std::uint64_t seed = 7;
};

inline std::vector<RawRecord> generate_raw_records(const SynthConfig& cfg) {
  Rng rng = Rng(cfg.seed).fork("synth");
  // per-sensor response coefficients
  std::array<double, kSensorCount> ga, gb, gab, base, tau;
  for (std::size_t s = 0; s < kSensorCount; ++s) {
    ga[s] = rng.uniform(0.2, 1.0);
    gb[s] = rng.uniform(0.5, 2.0);
    gab[s] = rng.uniform(-0.2, 0.2);
    base[s] = rng.uniform(500.0, 5000.0);
    tau[s] = rng.uniform(20.0, 80.0);
  }
  std::vector<RawRecord> records;
  records.reserve(cfg.levels * cfg.span_length);
  double t = 0.0;
  std::array<double, kSensorCount> state = base;
  for (std::size_t lv = 0; lv < cfg.levels; ++lv) {
    double ca = std::floor(rng.uniform(0.0, 11.0)) / 10.0 * cfg.max_conc_a;
    double cb = std::floor(rng.uniform(0.0, 11.0)) / 10.0 * cfg.max_conc_b;
    for (std::size_t i = 0; i < cfg.span_length; ++i) {
      RawRecord r;
      r.time = t;
      t += 0.01;  // 100 Hz
      r.conc_a = ca;
      r.conc_b = cb;
      for (std::size_t s = 0; s < kSensorCount; ++s) {
        double target = base[s] * (1.0 + ga[s] * std::sqrt(ca / cfg.max_conc_a) +
                                   gb[s] * (cb / cfg.max_conc_b) +
                                   gab[s] * (ca / cfg.max_conc_a) * (cb / cfg.max_conc_b));
        // first-order sensor dynamics toward the set-point response
        state[s] += (target - state[s]) / tau[s];
        r.sensors[s] = state[s] * (1.0 + cfg.noise * (rng.uniform() - 0.5));
      }
      records.push_back(r);
    }
  }
  return records;
}

inline void write_raw_file(const std::vector<RawRecord>& records, const std::string& path,
                           bool header = true) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write raw file: " + path);
  out.precision(10);
  if (header) out << "time conc_a conc_b s1 s2 s3 s4 s5 s6 s7 s8 s9 s10 s11 s12 s13 s14 s15 s16\n";
  for (const auto& r : records) {
    out << r.time << " " << r.conc_a << " " << r.conc_b;
    for (double s : r.sensors) out << " " << s;
    out << "\n";
  }
}

}  // namespace menglan
