#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pomni {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,            // anything not listed below
  kExitUsage = 2,              // bad flags, config, modality token or data path
  kExitMissingCheckpoint = 3,  // upstream or resume checkpoint absent
  kExitNonFinite = 4,          // NaN/Inf loss or gradient; last checkpoint kept
  kExitFormat = 5,             // corrupt checkpoint or recording
  kExitShape = 6,              // checkpoint tensors do not fit the model
};

/// Commands: gen-data, train-tokenizer, pretrain, finetune, evaluate.
/// `args` excludes the program name. Returns an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pomni
