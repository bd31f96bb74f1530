#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "taskvec/analysis.hpp"

namespace taskvec::verify {

struct Options {
  std::uint64_t seed = 0;
  std::size_t instances = 100;  // for the random-instance suites
  std::size_t threads = 1;      // instance-level fan-out; results do not depend on it
};

// decomposition, jensen, omega-forms, gradients, fisher, kl, o1, composition,
// masking, accumulation, determinism
const std::vector<std::string>& suite_names();

// Runs one suite ("all" runs every suite). Throws ValidationError on an
// unknown name.
std::vector<VerificationReport> run_suite(const std::string& name, const Options& options);

}  // namespace taskvec::verify
