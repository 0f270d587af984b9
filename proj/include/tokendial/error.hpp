#pragma once

#include <stdexcept>
#include <string>

namespace tokendial {

enum class ErrorCode {
    precondition,
    dimension_mismatch,
    not_found,
    format,
    degenerate,
    no_foreground,
    divergence,
    not_trained,
    conflict,
    unavailable,
};

// Single exception type for the library; `code()` lets callers (CLI exit codes,
// HTTP status mapping) dispatch without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& msg) {
    if (!cond) throw Error(code, msg);
}

}  // namespace tokendial
