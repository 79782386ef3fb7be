#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "tkmamba/tensor.hpp"
#include "tkmamba/textbridge.hpp"

namespace tkm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitNumeric = 3 };

/// Entry point of the `tkmamba` tool. Subcommands: synth, preprocess, train,
/// eval, overfit, gradcheck, bench-scan. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

/// [K,dim] rows of one branch ordered by `class_names`. Throws ValidationError
/// when a class has no entry.
template <typename T>
Tensor<T> class_matrix(const TextEmbeddingSet& set, int branch, const std::vector<std::string>& class_names);

inline constexpr const char* kEvalCsvHeader = "case_id,class,dice,nsd";
inline constexpr const char* kBenchCsvHeader = "length,sequential_ms,parallel_ms,quadratic_ms";

}  // namespace tkm
