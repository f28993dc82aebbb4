#include <string>
#include <vector>

#include <CLI11.hpp>

#include "faith/bounds.hpp"
#include "faith/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"faith: transformer robustness verification with a scheduling cost machine"};
  app.require_subcommand(1);

  faith::cli::VerifyOptions vo;
  std::string verify_norm = "linf";
  bool naive_flag = false;
  CLI::App* verify = app.add_subcommand("verify", "verify robustness of one input");
  verify->add_option("--model", vo.model_path, "model manifest JSON")->required();
  verify->add_option("--input", vo.input_path, "embedding input file")->required();
  verify->add_option("--eps", vo.epsilon, "perturbation radius")->required();
  verify->add_option("--norm", verify_norm, "perturbation norm: l1, l2, linf");
  verify->add_option("--margin", vo.margin, "required class margin");
  verify->add_option("--out", vo.out_path, "report JSON path");
  verify->add_option("--meta", vo.meta_path, "hardware metafile for traffic accounting");
  verify->add_flag("--naive", naive_flag, "evaluate the unfused baseline graph");

  faith::cli::MaxEpsOptions mo;
  std::string maxeps_norm = "linf";
  CLI::App* maxeps = app.add_subcommand("maxeps", "maximal verified epsilon by bisection");
  maxeps->add_option("--model", mo.model_path)->required();
  maxeps->add_option("--input", mo.input_path)->required();
  maxeps->add_option("--norm", maxeps_norm);
  maxeps->add_option("--tol", mo.tol, "bisection tolerance");
  maxeps->add_option("--eps-max", mo.eps_max, "search upper bound");
  maxeps->add_option("--out", mo.out_path);

  faith::cli::TuneCmdOptions to;
  CLI::App* tune = app.add_subcommand("tune", "expert-guided schedule search");
  tune->add_option("--meta", to.meta_path, "hardware metafile JSON");
  tune->add_option("--pattern", to.pattern,
                   "gemm | vector_reduction | elementwise_mul | scalar_vector")
      ->required();
  tune->add_option("--shape", to.shape, "workload shape (pattern-specific)")->required();
  tune->add_option("--seed", to.seed);
  tune->add_option("--out", to.out_path, "best schedule JSON");
  tune->add_option("--trace", to.trace_path, "search trace JSONL");

  faith::cli::BenchOptions bo;
  CLI::App* bench = app.add_subcommand("bench", "naive vs fused sweeps");
  bench->add_option("--meta", bo.meta_path);
  bench->add_option("--model", bo.model_path, "model manifest; sets the attention head count");
  bench->add_option("--out", bo.out_path);
  bench->add_option("--seed", bo.seed);
  bench->add_option("--wall-pert-cap", bo.wall_pert_cap,
                    "perturbation width used for wall-clock runs");
  bench->add_option("--precision", bo.precision, "wall-clock run precision: f64 or f32");
  bench->add_option("--length-sweep,--lengths", bo.lengths, "length sweep");
  bench->add_option("--embed-sweep,--embeds", bo.embeds, "embedding size sweep");

  CLI11_PARSE(app, argc, argv);

  if (verify->parsed()) {
    vo.norm = faith::norm_from_name(verify_norm);
    vo.fused = !naive_flag;
    return faith::cli::cmd_verify(vo);
  }
  if (maxeps->parsed()) {
    mo.norm = faith::norm_from_name(maxeps_norm);
    return faith::cli::cmd_maxeps(mo);
  }
  if (tune->parsed()) return faith::cli::cmd_tune(to);
  if (bench->parsed()) return faith::cli::cmd_bench(bo);
  return 2;
}
