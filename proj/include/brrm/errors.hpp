#pragma once

#include <stdexcept>
#include <string>

namespace brrm {

enum class ErrorKind {
    input,          // precondition violated by the caller
    config,         // invalid or unknown configuration key
    io,             // file could not be read or written
    backend,        // generation backend unavailable after retries
    empty_dataset,  // dataset contained no valid items
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

  private:
    ErrorKind kind_;
};

inline Error input_error(const std::string& what) { return Error(ErrorKind::input, what); }
inline Error config_error(const std::string& what) { return Error(ErrorKind::config, what); }
inline Error io_error(const std::string& what) { return Error(ErrorKind::io, what); }

// Raised by backends for failures worth retrying (connection refused, timeouts, 5xx, 429).
class TransientBackendError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace brrm
