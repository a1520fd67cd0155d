// Emits a synthetic gas-mixture raw file in the public dataset's text
// format, for desk-scale experiments and demos.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "menglan/synth.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic gas-mixture raw file generator"};
  std::string out_path;
  menglan::SynthConfig cfg;
  app.add_option("out", out_path, "output raw text file")->required();
  app.add_option("--levels", cfg.levels, "number of concentration set-points");
  app.add_option("--span", cfg.span_length, "records per set-point");
  app.add_option("--noise", cfg.noise, "relative sensor noise");
  app.add_option("--seed", cfg.seed);
  CLI11_PARSE(app, argc, argv);
  try {
    auto records = menglan::generate_raw_records(cfg);
    menglan::write_raw_file(records, out_path);
    std::cout << "wrote " << records.size() << " records to " << out_path << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
