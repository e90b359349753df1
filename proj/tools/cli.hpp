#pragma once

#include <iosfwd>

namespace brrm::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kDomainFailure = 1;
inline constexpr int kConfigError = 2;
inline constexpr int kIoError = 3;
inline constexpr int kBackendError = 4;

// Entry point shared by the binary and the in-process CLI tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace brrm::cli
