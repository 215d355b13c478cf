#include "haloprobe/error.hpp"

namespace haloprobe {

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::validation: return 3;
        case ErrorKind::io: return 3;
        case ErrorKind::divergence: return 4;
        case ErrorKind::protocol: return 5;
    }
    return 1;
}

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::validation: return "validation";
        case ErrorKind::io: return "io";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::protocol: return "protocol";
    }
    return "unknown";
}

}  // namespace haloprobe
