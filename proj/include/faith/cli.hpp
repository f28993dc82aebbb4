#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "faith/bounds.hpp"

namespace faith::cli {

// Command implementations shared by the binary and the test suite. Exit
// codes: 0 verified / success, 1 not verified, 2 error.

struct VerifyOptions {
  std::string model_path;
  std::string input_path;
  std::string out_path;   // optional report JSON
  std::string meta_path;  // optional; built-in a100-like when empty
  double epsilon = 0.0;
  Norm norm = Norm::LInf;
  double margin = 0.0;
  bool fused = true;
};

int cmd_verify(const VerifyOptions& options, bool* verified_out = nullptr);

struct MaxEpsOptions {
  std::string model_path;
  std::string input_path;
  std::string out_path;
  Norm norm = Norm::LInf;
  double tol = 1e-3;
  double eps_max = 1.0;
};

int cmd_maxeps(const MaxEpsOptions& options, double* eps_out = nullptr);

struct TuneCmdOptions {
  std::string meta_path;  // optional
  std::string pattern = "gemm";
  std::vector<std::size_t> shape;  // gemm: rows,inner,outer,pert; reduction: vectors,length;
                                   // elementwise: neurons,pert; scalar_vector: m,n
  std::uint64_t seed = 0;
  std::string out_path;
  std::string trace_path;
};

int cmd_tune(const TuneCmdOptions& options);

struct BenchOptions {
  std::string meta_path;   // optional
  std::string model_path;  // optional: heads for the dot-product rows
  std::string out_path;
  std::uint64_t seed = 0;
  // Wall-clock runs use this perturbation width; modeled costs use the full
  // L*E dimension (host-infeasible at the large sweep points otherwise).
  std::size_t wall_pert_cap = 16;
  // Host precision of the wall-clock executor runs ("f64" or "f32"); f32 is
  // the benchmarking-only mode.
  std::string precision = "f64";
  std::vector<std::size_t> lengths = {2, 4, 8, 16, 32, 64, 128};
  std::vector<std::size_t> embeds = {64, 128, 256, 384, 512, 640};
};

int cmd_bench(const BenchOptions& options);

}  // namespace faith::cli
