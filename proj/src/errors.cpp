#include "brrm/errors.hpp"

namespace brrm {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::input: return "input_error";
        case ErrorKind::config: return "config_error";
        case ErrorKind::io: return "io_error";
        case ErrorKind::backend: return "backend_unavailable";
        case ErrorKind::empty_dataset: return "empty_dataset";
    }
    return "error";
}

}  // namespace brrm
