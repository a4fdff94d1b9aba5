#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lbq/errors.hpp"
#include "lbq/pipeline.hpp"

namespace {

void print_report(const lbq::ReportResult& r) {
  std::printf("%-12s %-14s %-4s %12s %12s\n", "row", "model", "mode", "ppl_train", "ppl_heldout");
  const char* names[] = {"init", "+WAT", "+naive-A4", "+AAR"};
  for (std::size_t i = 0; i < r.ablation.size(); ++i) {
    const auto& e = r.ablation[i];
    std::printf("%-12s %-14s %-4s %12.4f %12.4f\n", names[i], e.model.c_str(), e.mode.c_str(),
                e.ppl_train, e.ppl_heldout);
  }
  if (r.init_ablation.size() == 2)
    std::printf("init ablation (heldout ppl after WAT): em %.4f, rtn %.4f\n",
                r.init_ablation[0].ppl_heldout, r.init_ablation[1].ppl_heldout);
  std::printf("WAT polarized share %.4f, L_reg final/initial %.3g\n", r.wat_polarization,
              r.wat_l_reg_ratio);
  if (r.joint)
    std::printf("decoupled mean L_rec %.6g, joint probe %s\n", r.decoupled_mean_l_rec,
                r.joint->diverged ? "diverged" : std::to_string(r.joint->final_mean_l_rec).c_str());
  std::printf("7B-shape memory ratio %.6f (%.3fx), parameter bits/weight %.6f (published %.3f)\n",
              r.llama_memory.ratio_nominal, r.llama_memory.compression_nominal,
              r.llama_memory.bits_p_per_weight_nominal, r.llama_memory.printed_bits_p);
  for (const auto& p : r.written) std::printf("wrote %s\n", p.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"W(1+1)A4 quantization pipeline on a toy decoder"};
  std::string command, config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
  app.add_option("command", command,
                 "pretrain-teacher | ptq-init | train-wat | train-aar | eval | bench | "
                 "joint-probe | report | run-all")
      ->required();
  app.add_option("-c,--config", config_path, "configuration file")->required();
  app.add_option("-o,--override", overrides, "section.key=value, repeatable");
  app.add_flag("-q,--quiet", quiet, "no progress output");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const lbq::Command cmd = lbq::parse_command(command);
    lbq::Pipeline pipeline(lbq::load_config(config_path, overrides));
    if (quiet) pipeline.set_log(nullptr);
    if (cmd == lbq::Command::Report || cmd == lbq::Command::RunAll) {
      print_report(cmd == lbq::Command::Report ? pipeline.report() : pipeline.run_all());
      return 0;
    }
    return pipeline.run(cmd) ? 4 : 0;
  } catch (const lbq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const lbq::StageOrderError& e) {
    std::cerr << "stage order error: " << e.what() << '\n';
    return 3;
  } catch (const lbq::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return 4;
  } catch (const lbq::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
